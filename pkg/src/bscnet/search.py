"""Differentiable search over per-group shift directions.

Each searchable layer keeps one latent 5x5x5 kernel ``V`` per channel group
and a row of architecture parameters per group.  Every candidate direction
``s`` reads the 3x3x3 sub-window of ``V`` centred at ``s``, so the relaxed
mixture ``sum_j pi_j F_j`` is a single 5x5x5 convolution whose kernel at
position ``p`` is ``V[p] * sum_{j : p in window(s_j)} pi_j``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .conv import SfscConv, gather_conv
from .errors import IndivisibleGroups, ParseError, ShapeMismatch, SpaceTooLarge
from .module import _COST_TRACE, Module, trace_cost
from .sparse import KernelOffsets, SparseTensor, build_kernel_map, cube_offsets

FUSED_SIZE = 5
WINDOW_SIZE = 3

STILL = (0, 0, 0)
CORNERS = tuple(itertools.product((-1, 1), repeat=3))


@dataclass(frozen=True)
class SearchSpace:
    directions: tuple = (STILL,) + CORNERS

    def __post_init__(self):
        dirs = tuple(tuple(int(v) for v in d) for d in self.directions)
        if len(set(dirs)) != len(dirs):
            raise ValueError("search-space directions must be distinct")
        if STILL not in dirs:
            raise ValueError("search space must contain (0, 0, 0)")
        object.__setattr__(self, "directions", dirs)

    def __len__(self):
        return len(self.directions)

    def index(self, direction) -> int:
        return self.directions.index(tuple(int(v) for v in direction))


DEFAULT_SPACE = SearchSpace()


def window_positions(shift, fused_size: int = FUSED_SIZE, window_size: int = WINDOW_SIZE) -> np.ndarray:
    """Index into the fused cube of every window offset, in window order."""
    fused = {tuple(o): i for i, o in enumerate(cube_offsets(fused_size).tolist())}
    shift = np.asarray(shift, dtype=np.int64)
    try:
        return np.array([fused[tuple((o + shift).tolist())] for o in cube_offsets(window_size)])
    except KeyError:
        raise SpaceTooLarge(f"window at shift {tuple(shift)} leaves the {fused_size}^3 cube") from None


def window_masks(space: SearchSpace) -> np.ndarray:
    """``(125, n_s)`` indicator of fused-cube positions covered by each window."""
    masks = np.zeros((FUSED_SIZE**3, len(space)))
    for j, d in enumerate(space.directions):
        masks[window_positions(d), j] = 1.0
    return masks


def relax(alpha, mode: str = "sigmoid"):
    """Soft selectors: elementwise sigmoid or row-wise softmax of ``alpha``."""
    if mode == "sigmoid":
        out = ad.sigmoid(alpha)
    elif mode == "softmax":
        out = ad.softmax(alpha)
    else:
        raise ValueError(f"unknown relaxation {mode!r}")
    return out if isinstance(alpha, ad.Var) else out.value


def confidence_loss(selector, mode: str = "sigmoid"):
    """Regularizer pushing selectors to discrete values.

    sigmoid: ``-mean |pi - 0.5|``.  softmax: ``-sum_i log pi[i, argmax_i]``.
    """
    pi = ad.constant(selector)
    if mode == "sigmoid":
        out = ad.mul(ad.mean(ad.abs(ad.sub(pi, 0.5))), -1.0)
    elif mode == "softmax":
        pv = pi.value
        onehot = np.zeros_like(pv)
        onehot[np.arange(pv.shape[0]), pv.argmax(axis=1)] = 1.0
        out = ad.mul(ad.sum(ad.mul(ad.log(pi), onehot)), -1.0)
    else:
        raise ValueError(f"unknown relaxation {mode!r}")
    return out if isinstance(selector, ad.Var) else float(out.value)


def _fused_kernel(v, pi, masks: np.ndarray, binary: bool):
    """Effective ``(125, C_in, C_out)`` kernel from per-group latents and selectors.

    ``v``: ``(G, 125, C_in, C_g)``; ``pi``: ``(G, n_s)``.  In binary mode the
    latents are sign-binarized first and group ``g`` is scaled by the
    mask-weighted mean ``|V|`` so that a one-hot selector reproduces the
    sub-window's own mean-|W| scale.
    """
    v, pi = ad.constant(v), ad.constant(pi)
    g, p, cin, cg = v.shape
    m = ad.matmul(pi, masks.T)  # (G, 125)
    m4 = ad.reshape(m, (g, p, 1, 1))
    if binary:
        absv = ad.sum(ad.reshape(ad.abs(v), (g, p, cin * cg)), axis=2)  # (G, 125)
        num = ad.sum(ad.mul(m, absv), axis=1)
        den = ad.add(ad.mul(ad.sum(m, axis=1), float(cin * cg)), 1e-300)
        scale = ad.reshape(ad.div(num, den), (g, 1, 1, 1))
        kern = ad.mul(ad.mul(_sign_ste(v), scale), m4)
    else:
        kern = ad.mul(v, m4)
    # (G, 125, C_in, C_g) -> (125, C_in, G * C_g), group-major channels
    kv = kern.value.transpose(1, 2, 0, 3).reshape(p, cin, g * cg)
    return ad.op(
        kv,
        (kern,),
        lambda gr: (gr.reshape(p, cin, g, cg).transpose(2, 0, 1, 3),),
    )


def _sign_ste(w):
    w = ad.constant(w)
    wv = w.value
    return ad.op(np.where(wv >= 0, 1.0, -1.0), (w,), lambda g: (np.where(np.abs(wv) <= 1.0, g, 0.0),))


def supernet_forward(input: SparseTensor, latents, selector, space: SearchSpace = DEFAULT_SPACE, out_coords=None, binary: bool = False) -> SparseTensor:
    """Fused 5x5x5 evaluation of the relaxed shift mixture of every group."""
    latents_v = ad.value(latents)
    if np.ndim(latents_v) != 4 or latents_v.shape[1] != FUSED_SIZE**3:
        raise ShapeMismatch("latents must be (groups, 125, C_in, C_group)")
    if np.shape(ad.value(selector)) != (latents_v.shape[0], len(space)):
        raise ShapeMismatch("selector must be (groups, n_s)")
    masks = window_masks(space)
    kern = _fused_kernel(latents, selector, masks, binary)
    x = input.features
    if binary:
        x = ad.sign_act(x)
    coords = input.coords if out_coords is None else out_coords
    kmap = build_kernel_map(input, coords, KernelOffsets.cube(FUSED_SIZE), input.stride)
    f = gather_conv(x, kern, kmap.neighbor_table())
    if not any(isinstance(t, ad.Var) for t in (input.features, latents, selector)):
        f = f.value
    return SparseTensor(kmap.out_coords, f, input.stride, check=False)


class SupernetConv(Module):
    """Searchable layer: per-group fused 5x5x5 latents plus architecture parameters."""

    binarizable = True

    def __init__(self, cin, cout, groups=8, space: SearchSpace = DEFAULT_SPACE, relaxation="sigmoid", *, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if cout % groups:
            raise IndivisibleGroups(f"{cout} channels cannot be split into {groups} groups")
        for d in space.directions:
            window_positions(d)
        self.space = space
        self.relaxation = relaxation
        cg = cout // groups
        fan_in = WINDOW_SIZE**3 * cin
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(groups, FUSED_SIZE**3, cin, cg)))
        self.alpha = Parameter(np.zeros((groups, len(space))))
        self.capture = False
        self.last_input = None
        self.last_output = None

    @property
    def groups(self) -> int:
        return self.weight.shape[0]

    def selector(self):
        return relax(ad.param(self.alpha), self.relaxation)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        binary = self.binary and self.binarizable
        g, p, cin, cg = self.weight.shape
        if _COST_TRACE:
            kmap = build_kernel_map(x, x.coords, KernelOffsets.cube(FUSED_SIZE), x.stride)
            trace_cost(self, "supernet", 2.0 * kmap.pair_counts().sum() * cin * cg * g, binary)
        out = supernet_forward(x, ad.param(self.weight), self.selector(), self.space, binary=binary)
        if self.capture:
            self.last_input = x
            self.last_output = np.array(ad.value(out.features))
        return out

    def derive(self, rescale: bool = False) -> tuple[list, SfscConv]:
        """Discrete layer from the argmax direction of every group.

        The 3x3x3 kernel of group ``i`` is the sub-window of its latent at the
        chosen shift; ``rescale`` multiplies it by the converged selector value.
        """
        g, p, cin, cg = self.weight.shape
        choice = [int(np.argmax(row)) for row in self.alpha.value]
        dirs = [self.space.directions[j] for j in choice]
        layer = SfscConv(cin, g * cg, dirs, WINDOW_SIZE)
        w = np.zeros((WINDOW_SIZE**3, cin, g * cg))
        pi = relax(self.alpha.value, self.relaxation)
        for i, j in enumerate(choice):
            sub = self.weight.value[i, window_positions(dirs[i])]
            if rescale:
                sub = sub * pi[i, j]
            w[:, :, i * cg:(i + 1) * cg] = sub
        layer.weight.value = w
        return choice, layer


def alternating_search(net, train_data, stage, seed: int = 0, val_data=None, history=None, **kwargs):
    """Train a supernet, alternating weight batches and architecture batches.

    Odd minibatches (1-based) update weights with ``alpha`` frozen; even ones
    update ``alpha`` with weights frozen, on task loss plus
    ``stage.confidence_weight`` times the summed confidence loss.
    """
    from .train import run_stage

    return run_stage(net, train_data, stage, seed=seed, val_data=val_data, history=history, **kwargs)


def searchable_layers(net) -> list:
    return [m for _, m in net.named_modules() if isinstance(m, (SupernetConv, SfscConv))]


def total_confidence_loss(net, mode: str = "sigmoid"):
    losses = [confidence_loss(m.selector(), mode) for m in searchable_layers(net) if isinstance(m, SupernetConv)]
    if not losses:
        return None
    total = losses[0]
    for item in losses[1:]:
        total = ad.add(total, item)
    return total


class ShiftConfig(list):
    """Per searchable layer, the shift direction of every channel group."""

    def __init__(self, layers=()):
        super().__init__([tuple(tuple(int(v) for v in d) for d in layer) for layer in layers])

    def indices(self, space: SearchSpace) -> list:
        return [[space.index(d) for d in layer] for layer in self]

    @classmethod
    def from_indices(cls, indices, space: SearchSpace) -> "ShiftConfig":
        return cls([[space.directions[j] for j in row] for row in indices])

    def dumps(self) -> str:
        return "".join(" ".join(",".join(str(v) for v in d) for d in layer) + "\n" for layer in self)

    @classmethod
    def loads(cls, text: str) -> "ShiftConfig":
        layers = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                layer = [tuple(int(v) for v in tok.split(",")) for tok in line.split()]
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if any(len(d) != 3 for d in layer):
                raise ParseError(lineno, "directions are x,y,z triples")
            layers.append(layer)
        return cls(layers)


def derive_architecture(supernet, rescale: bool = False):
    """Collapse a trained supernet into a discrete network.

    Returns ``(ShiftConfig, derived_network)``; every non-searchable tensor
    is copied verbatim.
    """
    derived, config = supernet.derived_copy(rescale=rescale)
    return config, derived


def design_space_size(n_s: int, n_g: int, num_layers: int) -> int:
    if min(n_s, n_g, num_layers) < 1:
        raise ValueError("all arguments must be positive")
    return (n_s**n_g) ** num_layers


def format_count(n: int, digits: int = 2) -> str:
    """Scientific notation with ``digits`` significant figures, e.g. ``9.1e+46``."""
    return f"{float(n):.{digits - 1}e}"


_PRESETS = {
    "scannet": ((1, 1, 1), (-1, -1, -1)),
    "nyu": ((1, 1, 0), (-1, -1, 0)),
}


def manual_group_directions(preset: str, groups: int) -> list:
    if preset not in _PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(_PRESETS)}")
    if groups % 4:
        raise IndivisibleGroups(f"{groups} groups cannot be split into halves and quarters")
    pos, neg = _PRESETS[preset]
    return [STILL] * (groups // 2) + [pos] * (groups // 4) + [neg] * (groups // 4)


def manual_shift_config(preset: str, groups: int, num_layers: int = 1) -> ShiftConfig:
    """Half the groups unshifted, a quarter each at the preset's two directions."""
    return ShiftConfig([manual_group_directions(preset, groups)] * num_layers)


def random_shift_config(space: SearchSpace, groups: int, layers: int, rng) -> ShiftConfig:
    rng = np.random.default_rng(rng)
    idx = rng.integers(0, len(space), size=(layers, groups))
    return ShiftConfig.from_indices(idx.tolist(), space)
