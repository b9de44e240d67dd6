"""Exception types raised across the package."""


class BscError(Exception):
    """Base class for all errors raised by bscnet."""


class ShapeMismatch(BscError, ValueError):
    pass


class DuplicateCoordinate(BscError, ValueError):
    def __init__(self, coord):
        self.coord = tuple(int(c) for c in coord)
        super().__init__(f"duplicate coordinate {self.coord}")


class StrideViolation(BscError, ValueError):
    pass


class EmptyInput(BscError, ValueError):
    pass


class ParseError(BscError, ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class NonFiniteWeight(BscError, ValueError):
    pass


class NonFiniteActivation(BscError, ValueError):
    pass


class DegenerateScale(BscError, ValueError):
    pass


class LengthMismatch(BscError, ValueError):
    pass


class GroupDivisibility(BscError, ValueError):
    pass


class MissingTargetCoords(BscError, ValueError):
    pass


class UnrecordedNode(BscError, RuntimeError):
    pass


class AllIgnored(BscError, ValueError):
    pass


class EpochOutOfRange(BscError, ValueError):
    pass


class SpaceTooLarge(BscError, ValueError):
    pass


class IndivisibleGroups(BscError, ValueError):
    pass


class InvalidSpec(BscError, ValueError):
    pass


class InvalidConfig(BscError, ValueError):
    pass


class LayerNotFound(BscError, KeyError):
    pass


class ConfigError(BscError, ValueError):
    pass


class ChecksumMismatch(BscError, ValueError):
    pass


class UnknownVersion(BscError, ValueError):
    pass


class MissingTensor(BscError, KeyError):
    pass


class IncompatibleSpec(BscError, ValueError):
    pass
