"""FCN and UNET segmentation networks built from the baseline blocks."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .conv import Conv1x1, DownBlock, InputLayer, SfscConv, SSCBlock, UpBlock, unpool
from .errors import InvalidSpec
from .module import Module
from .search import DEFAULT_SPACE, SearchSpace, ShiftConfig, SupernetConv, searchable_layers
from .sparse import SparseTensor

PRESETS = {
    "fcn-s": dict(family="fcn", base_filters=16, filters_step=16, blocks_per_level=1, levels=8),
    "fcn-h": dict(family="fcn", base_filters=24, filters_step=24, blocks_per_level=2, levels=8),
    "unet-s": dict(family="unet", base_filters=16, filters_step=16, blocks_per_level=1, levels=6),
    "unet-h": dict(family="unet", base_filters=32, filters_step=32, blocks_per_level=2, levels=6),
}


@dataclass
class NetworkSpec:
    family: str = "unet"
    levels: int = 6
    base_filters: int = 16
    filters_step: int = 16
    blocks_per_level: int = 1
    num_classes: int = 20
    binary: bool = False
    shift_config: ShiftConfig | None = None
    search_mode: bool = False
    in_channels: int = 1
    groups: int = 8
    relaxation: str = "sigmoid"
    search_space: tuple = field(default_factory=lambda: DEFAULT_SPACE.directions)
    seed: int = 0

    @classmethod
    def preset(cls, name: str, **overrides) -> "NetworkSpec":
        if name not in PRESETS:
            raise InvalidSpec(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def channels(self) -> list:
        return [self.base_filters + k * self.filters_step for k in range(self.levels)]

    def num_searchable(self) -> int:
        dec = self.levels - 1 if self.family == "unet" else 0
        return (self.levels + dec) * self.blocks_per_level

    def space(self) -> SearchSpace:
        return SearchSpace(tuple(self.search_space))

    def validate(self):
        if self.family not in ("fcn", "unet"):
            raise InvalidSpec(f"unknown family {self.family!r}")
        for name in ("levels", "base_filters", "filters_step", "blocks_per_level", "num_classes", "in_channels", "groups"):
            if int(getattr(self, name)) < 1:
                raise InvalidSpec(f"{name} must be positive")
        if self.shift_config is not None and len(self.shift_config) != self.num_searchable():
            raise InvalidSpec(
                f"shift config has {len(self.shift_config)} layers, network has {self.num_searchable()}"
            )
        if self.search_mode or self.shift_config is not None:
            bad = [c for c in self.channels() if c % self.groups]
            if bad:
                raise InvalidSpec(f"channel counts {bad} are not divisible by {self.groups} groups")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shift_config"] = None if self.shift_config is None else [[list(v) for v in layer] for layer in self.shift_config]
        d["search_space"] = [list(v) for v in self.search_space]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        if d.get("shift_config") is not None:
            d["shift_config"] = ShiftConfig(d["shift_config"])
        if "search_space" in d:
            d["search_space"] = tuple(tuple(v) for v in d["search_space"])
        return cls(**d)


class Stage(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = list(blocks)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        for b in self.blocks:
            x = b(x)
        return x


class SegmentationNet(Module):
    """Shared plumbing of the FCN and UNET builders."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self._rng = np.random.default_rng(spec.seed)
        self._layer_count = 0

    def _block(self, cin, cout) -> SSCBlock:
        spec = self.spec
        i = self._layer_count
        self._layer_count += 1
        if spec.search_mode:
            conv = SupernetConv(cin, cout, spec.groups, spec.space(), spec.relaxation, rng=self._rng)
        elif spec.shift_config is not None:
            conv = SfscConv(cin, cout, spec.shift_config[i], rng=self._rng)
        else:
            conv = SfscConv(cin, cout, [(0, 0, 0)], rng=self._rng)
        return SSCBlock(cin, cout, conv, rng=self._rng)

    def _stage(self, cin, cout) -> Stage:
        n = self.spec.blocks_per_level
        return Stage([self._block(cin if b == 0 else cout, cout) for b in range(n)])

    def predict(self, x: SparseTensor) -> np.ndarray:
        """Logits in inference mode, without recording gradients."""
        prev = self.training
        self.eval()
        try:
            return np.asarray(ad.value(self(x)))
        finally:
            self.train(prev)

    def set_binary(self, flag: bool = True):
        super().set_binary(flag)
        self.spec = replace(self.spec, binary=bool(flag))
        return self

    def searchable(self) -> list:
        return searchable_layers(self)

    def shift_config(self) -> ShiftConfig:
        return ShiftConfig([m.directions for m in self.searchable() if isinstance(m, SfscConv)])

    def apply_shift_config(self, config):
        layers = [m for m in self.searchable() if isinstance(m, SfscConv)]
        if len(config) != len(layers):
            raise InvalidSpec(f"config has {len(config)} layers, network has {len(layers)}")
        for m, dirs in zip(layers, config):
            if len(dirs) != m.groups:
                raise InvalidSpec(f"layer {m._path} has {m.groups} groups, config gives {len(dirs)}")
            m.directions = [tuple(d) for d in dirs]
        self.spec = replace(self.spec, shift_config=ShiftConfig(config))
        return self

    def first_binary_layer(self) -> str:
        for name, m in self.named_modules():
            if isinstance(m, (SfscConv, SupernetConv)):
                return name
        raise InvalidSpec("network has no binary layer")

    def derived_copy(self, rescale: bool = False):
        """Discrete network from a search-mode network, with weights transferred."""
        if not self.spec.search_mode:
            raise InvalidSpec("only a search-mode network can be derived")
        state = self.state_dict()
        dirs = []
        for name, m in self.named_modules():
            if isinstance(m, SupernetConv):
                choice, layer = m.derive(rescale)
                dirs.append([m.space.directions[j] for j in choice])
                state[f"{name}.weight"] = layer.weight.value
                del state[f"{name}.alpha"]
        config = ShiftConfig(dirs)
        spec = replace(self.spec, search_mode=False, shift_config=config)
        net = build_network(spec)
        net.load_state_dict(state)
        net.set_binary(self.binary)
        net.train(self.training)
        return net, config


class UNet(SegmentationNet):
    def __init__(self, spec: NetworkSpec):
        super().__init__(spec)
        ch = spec.channels()
        L = spec.levels
        rng = self._rng
        self.input_layer = InputLayer(spec.in_channels, ch[0], rng=rng)
        self.enc = [self._stage(ch[0], ch[0])] + [None] * (L - 1)
        self.down = []
        for lvl in range(1, L):
            self.down.append(DownBlock(ch[lvl - 1], ch[lvl], rng=rng))
            self.enc[lvl] = self._stage(ch[lvl], ch[lvl])
        # decoder modules are stored in execution order, deepest first
        self.up, self.dec = [], []
        for lvl in reversed(range(L - 1)):
            self.up.append(UpBlock(ch[lvl + 1], ch[lvl], "deconv", rng=rng))
            self.dec.append(self._stage(2 * ch[lvl], ch[lvl]))
        self.classifier = Conv1x1(ch[0], spec.num_classes, bias=True, rng=rng)
        self.finalize()

    def __call__(self, x: SparseTensor):
        x = self.input_layer(x)
        skips = []
        L = self.spec.levels
        for lvl in range(L):
            x = self.enc[lvl](x)
            if lvl < L - 1:
                skips.append(x)
                x = self.down[lvl](x)
        for i, lvl in enumerate(reversed(range(L - 1))):
            skip = skips[lvl]
            up = self.up[i](x, skip)
            x = self.dec[i](skip.replace_features(ad.concat([skip.features, up.features], axis=1)))
        return self.classifier(x.features)


class FCN(SegmentationNet):
    def __init__(self, spec: NetworkSpec):
        super().__init__(spec)
        ch = spec.channels()
        L = spec.levels
        rng = self._rng
        self.input_layer = InputLayer(spec.in_channels, ch[0], rng=rng)
        self.enc = [self._stage(ch[0], ch[0])]
        self.down = []
        for lvl in range(1, L):
            self.down.append(DownBlock(ch[lvl - 1], ch[lvl], rng=rng))
            self.enc.append(self._stage(ch[lvl], ch[lvl]))
        self.score = [Conv1x1(c, ch[0], rng=rng) for c in ch]
        self.classifier = Conv1x1(ch[0], spec.num_classes, bias=True, rng=rng)
        self.finalize()

    def __call__(self, x: SparseTensor):
        x = self.input_layer(x)
        feats = []
        L = self.spec.levels
        for lvl in range(L):
            x = self.enc[lvl](x)
            feats.append(x)
            if lvl < L - 1:
                x = self.down[lvl](x)
        full = feats[0]
        total = None
        for lvl, f in enumerate(feats):
            up = f if lvl == 0 else unpool(f, full)
            s = self.score[lvl](up.features)
            total = s if total is None else ad.add(total, s)
        return self.classifier(total)


def build_network(spec: NetworkSpec) -> SegmentationNet:
    spec = copy.copy(spec).validate()
    net = UNet(spec) if spec.family == "unet" else FCN(spec)
    net.set_binary(spec.binary)
    return net
