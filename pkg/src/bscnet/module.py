"""Parameter containers shared by layers and networks."""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .autodiff import Parameter
from .errors import MissingTensor, ShapeMismatch

_COST_TRACE: list = []


@contextmanager
def cost_trace():
    """Collect ``(name, binary, macs, kind)`` records from layers run inside."""
    log: list = []
    _COST_TRACE.append(log)
    try:
        yield log
    finally:
        _COST_TRACE.remove(log)


def trace_cost(module, kind: str, ops: float, binary: bool = False):
    if _COST_TRACE:
        _COST_TRACE[-1].append((getattr(module, "_path", ""), kind, float(ops), bool(binary)))


class Module:
    """Minimal layer base: walks attributes for parameters, buffers and children."""

    #: set on layers whose weights and inputs are binarized in binary mode
    binarizable = False

    def __init__(self):
        self.training = True
        self.binary = False
        self._buffers: list[str] = []
        self._path = ""

    def register_buffer(self, name: str, value):
        setattr(self, name, np.array(value, dtype=np.float64))
        self._buffers.append(name)

    def _child_items(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._child_items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = ""):
        for mname, mod in self.named_modules(prefix):
            for name, val in vars(mod).items():
                if isinstance(val, Parameter):
                    yield (f"{mname}.{name}" if mname else name), val

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for mname, mod in self.named_modules():
            for name in mod._buffers:
                yield (f"{mname}.{name}" if mname else name), mod, name

    def finalize(self):
        """Record dotted paths on every submodule and name every parameter."""
        for path, mod in self.named_modules():
            mod._path = path
        for name, p in self.named_parameters():
            p.name = name
        return self

    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def set_binary(self, flag: bool = True):
        for _, mod in self.named_modules():
            mod.binary = bool(flag)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.value.copy() for name, p in self.named_parameters()}
        for name, mod, attr in self.named_buffers():
            state[name] = getattr(mod, attr).copy()
        return state

    def load_state_dict(self, state: dict):
        for name, p in self.named_parameters():
            if name not in state:
                raise MissingTensor(name)
            val = np.asarray(state[name], dtype=np.float64)
            if val.shape != p.value.shape:
                raise ShapeMismatch(f"{name}: expected {p.value.shape}, got {val.shape}")
            p.value = val.copy()
        for name, mod, attr in self.named_buffers():
            if name not in state:
                raise MissingTensor(name)
            setattr(mod, attr, np.asarray(state[name], dtype=np.float64).copy())
        return self
