"""Sparse convolution, shifted sparse convolution and the baseline blocks.

Functional ops accept plain arrays or :class:`~bscnet.autodiff.Var` features
and weights; layers are :class:`~bscnet.module.Module` subclasses holding
their parameters.  A binary layer binarizes its own input with
:func:`~bscnet.autodiff.sign_act` and its weights with a mean-|W| scale.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Parameter, Var
from .errors import GroupDivisibility, MissingTargetCoords, ShapeMismatch
from .module import _COST_TRACE, Module, trace_cost
from .sparse import (
    KernelOffsets,
    SparseTensor,
    build_kernel_map,
    downsample_coords,
    parent_rows,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PRELU_INIT = 0.25


def gather_conv(x, w, table: np.ndarray):
    """``out[r] = sum_k x[table[r, k]] @ w[k]``, skipping entries equal to -1."""
    x, w = ad.constant(x), ad.constant(w)
    xv, wv = x.value, w.value
    n_in, cin = xv.shape
    k, wcin, cout = wv.shape
    if wcin != cin or table.shape[1] != k:
        raise ShapeMismatch(f"weights {wv.shape} do not fit input channels {cin} / {table.shape[1]} offsets")
    m = len(table)
    xpad = np.vstack([xv, np.zeros((1, cin))])
    cols = xpad[table].reshape(m, k * cin)
    out = cols @ wv.reshape(k * cin, cout)

    def vjp(g):
        dw = (cols.T @ g).reshape(k, cin, cout) if ad.needs_grad(w) else None
        dx = None
        if ad.needs_grad(x):
            dcols = g @ wv.reshape(k * cin, cout).T
            # scatter-add through a (n_in, m*k) selection matrix
            flat = table.reshape(-1)
            hit = np.nonzero(flat >= 0)[0]
            scatter = sp.csr_matrix((np.ones(len(hit)), (flat[hit], hit)), shape=(n_in, m * k))
            dx = np.asarray(scatter @ dcols.reshape(m * k, cin))
        return dx, dw

    return ad.op(out, (x, w), vjp)


def _result(template_inputs, var):
    """Plain arrays in, plain array out; Var in, Var out."""
    if any(isinstance(t, Var) for t in template_inputs):
        return var
    return var.value


def sparse_conv(input: SparseTensor, weights, kernel: KernelOffsets, out_coords=None, out_stride=None) -> SparseTensor:
    """Sparse convolution over ``kernel``; sites with no active input get zeros."""
    if out_coords is None:
        out_coords = input.coords
    if out_stride is None:
        out_stride = input.stride
    w = weights.value if isinstance(weights, Parameter) else weights
    if np.shape(ad.value(w))[0] != len(kernel):
        raise ShapeMismatch("weights have one slice per kernel offset")
    kmap = build_kernel_map(input, out_coords, kernel, out_stride)
    f = gather_conv(input.features, w, kmap.neighbor_table())
    return SparseTensor(kmap.out_coords, _result((input.features, w), f), out_stride, check=False)


def shifted_sparse_conv(input, weights, kernel_size: int, shift, out_coords=None, out_stride=None) -> SparseTensor:
    """Sparse convolution whose window is centred at ``u + shift``."""
    return sparse_conv(input, weights, KernelOffsets.cube(kernel_size, tuple(shift)), out_coords, out_stride)


def conv_transpose(input: SparseTensor, weights, target: SparseTensor, kernel: KernelOffsets) -> SparseTensor:
    """Adjoint of ``sparse_conv(target -> input.coords)`` onto ``target``'s sites.

    ``weights[k]`` maps ``input`` channels to output channels, i.e. it plays
    the role of the transpose of the forward kernel slice.
    """
    if target is None:
        raise MissingTargetCoords("transposed convolution needs target coordinates")
    kmap = build_kernel_map(target, input.coords, kernel, input.stride)
    f = gather_conv(input.features, weights, kmap.reverse_table())
    return SparseTensor(target.coords, _result((input.features, weights), f), target.stride, check=False)


def _pool_matrix(fine: SparseTensor, coarse_coords, coarse_stride):
    coarse = SparseTensor(coarse_coords, np.zeros((len(coarse_coords), 1)), coarse_stride, check=False)
    rows = parent_rows(fine, coarse)
    if (rows < 0).any():
        raise MissingTargetCoords("coarse coordinates do not cover every fine site")
    counts = np.bincount(rows, minlength=len(coarse_coords)).astype(np.float64)
    return sp.csr_matrix(
        (1.0 / counts[rows], (rows, np.arange(fine.num_sites))),
        shape=(len(coarse_coords), fine.num_sites),
    )


def avg_pool(input: SparseTensor, coarse_coords, coarse_stride: int) -> SparseTensor:
    """Mean of the active children of every coarse cell."""
    pm = _pool_matrix(input, coarse_coords, coarse_stride)
    x = ad.constant(input.features)
    f = ad.op(pm @ x.value, (x,), lambda g: (pm.T @ g,))
    return SparseTensor(coarse_coords, _result((input.features,), f), coarse_stride, check=False)


def unpool(input: SparseTensor, target: SparseTensor) -> SparseTensor:
    """Copy every coarse feature to the target sites it contains."""
    if target is None:
        raise MissingTargetCoords("unpooling needs target coordinates")
    rows = parent_rows(target, input)
    if (rows < 0).any():
        raise MissingTargetCoords("a target site has no parent in the coarse tensor")
    f = ad.take_rows(input.features, rows)
    return SparseTensor(target.coords, _result((input.features,), f), target.stride, check=False)


def sfsc_forward(input: SparseTensor, weights, directions, binary: bool, kernel_size: int = 3, out_coords=None):
    """Grouped shifted sparse convolution.

    ``weights`` has shape ``(K, C_in, C_out)``; output channels are split into
    ``len(directions)`` contiguous groups and group ``i`` uses the window
    centred at ``u + directions[i]``.  In binary mode each group carries its
    own mean-|W| scale.
    """
    w = ad.constant(weights.value if isinstance(weights, Parameter) else weights)
    groups = len(directions)
    k, cin, cout = w.shape
    if cout % groups:
        raise GroupDivisibility(f"{cout} output channels cannot be split into {groups} groups")
    cg = cout // groups
    x = input.features
    if binary:
        x = ad.sign_act(x)
        wq = ad.scaled_sign(ad.reshape(w, (k, cin, groups, cg)), scale_axes=(0, 1, 3))
        w = ad.reshape(wq, (k, cin, cout))
    src = input.replace_features(x)
    dirs = [tuple(int(v) for v in d) for d in directions]
    uniq = list(dict.fromkeys(dirs))
    if len(uniq) == 1:
        out = sparse_conv(src, w, KernelOffsets.cube(kernel_size, uniq[0]), out_coords).features
    else:
        per_dir = {}
        for d in uniq:
            members = [i for i, di in enumerate(dirs) if di == d]
            wd = ad.concat([ad.slice_cols(w, i * cg, (i + 1) * cg) for i in members], axis=-1)
            per_dir[d] = (members, sparse_conv(src, wd, KernelOffsets.cube(kernel_size, d), out_coords).features)
        parts = []
        for i, d in enumerate(dirs):
            members, f = per_dir[d]
            j = members.index(i)
            parts.append(ad.slice_cols(f, j * cg, (j + 1) * cg))
        out = ad.concat(parts, axis=-1)
    coords = input.coords if out_coords is None else out_coords
    return SparseTensor(coords, _result((input.features, weights), ad.constant(out)), input.stride, check=False)


def _init_weight(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _conv_ops(kmap, cin, cout_per_group, groups=1):
    return 2.0 * kmap.pair_counts().sum() * cin * cout_per_group * groups


# -- layers -------------------------------------------------------------------


class BatchNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def __call__(self, x):
        n, c = x.shape
        if c != self.gamma.shape[0]:
            raise ShapeMismatch(f"batch norm expects {self.gamma.shape[0]} channels, got {c}")
        trace_cost(self, "bn", 2.0 * n * c)
        gamma, beta = ad.param(self.gamma), ad.param(self.beta)
        if self.training:
            y, mu, var = ad.batch_norm_train(x, gamma, beta, BN_EPS)
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mu
            self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * unbiased
            return y
        inv = 1.0 / np.sqrt(self.running_var + BN_EPS)
        return ad.add(ad.mul(ad.mul(ad.sub(x, self.running_mean), inv), gamma), beta)


def batch_norm(features, bn: BatchNorm, training: bool):
    """Apply ``bn`` in the requested mode without changing its mode flag."""
    prev = bn.training
    bn.training = training
    try:
        return bn(features)
    finally:
        bn.training = prev


class PReLU(Module):
    def __init__(self, channels: int, init: float = PRELU_INIT):
        super().__init__()
        self.slope = Parameter(np.full(channels, init))

    def __call__(self, x):
        trace_cost(self, "prelu", float(np.prod(x.shape)))
        return ad.prelu(x, ad.param(self.slope))


def prelu(features, slopes):
    return ad.value(ad.prelu(features, slopes)) if not isinstance(features, Var) else ad.prelu(features, slopes)


class Conv1x1(Module):
    """Per-site linear map; binary when ``binarizable`` and in binary mode."""

    def __init__(self, cin: int, cout: int, *, binarizable: bool = False, bias: bool = False, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.binarizable = binarizable
        self.weight = Parameter(_init_weight(rng, (cin, cout), cin))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def __call__(self, x):
        binary = self.binary and self.binarizable
        cin, cout = self.weight.shape
        trace_cost(self, "conv1x1", 2.0 * x.shape[0] * cin * cout, binary)
        w = ad.param(self.weight)
        if binary:
            x = ad.sign_act(x)
            w = ad.scaled_sign(w)
        y = ad.matmul(x, w)
        if self.bias is not None:
            y = ad.add(y, ad.param(self.bias))
        return y


class SparseConv(Module):
    """Sparse convolution layer with a cubic kernel and optional stride."""

    def __init__(self, cin, cout, kernel_size=3, stride=1, *, binarizable=False, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.kernel = KernelOffsets.cube(kernel_size)
        self.stride = stride
        self.binarizable = binarizable
        self.weight = Parameter(_init_weight(rng, (len(self.kernel), cin, cout), len(self.kernel) * cin))
        self.capture = False
        self.last_input = None
        self.last_output = None

    def __call__(self, x: SparseTensor) -> SparseTensor:
        binary = self.binary and self.binarizable
        if self.stride == 1:
            out_coords, out_stride = x.coords, x.stride
        else:
            out_coords, out_stride = downsample_coords(x, self.stride), x.stride * self.stride
        kmap = build_kernel_map(x, out_coords, self.kernel, out_stride)
        k, cin, cout = self.weight.shape
        trace_cost(self, "conv", _conv_ops(kmap, cin, cout), binary)
        f = x.features
        w = ad.param(self.weight)
        if binary:
            f = ad.sign_act(f)
            w = ad.scaled_sign(w)
        out = gather_conv(f, w, kmap.neighbor_table())
        if self.capture:
            self.last_input = x
            self.last_output = np.array(out.value)
        return SparseTensor(kmap.out_coords, out, out_stride, check=False)


class SfscConv(Module):
    """Stride-1 shifted sparse convolution with one shift per channel group."""

    binarizable = True

    def __init__(self, cin, cout, directions=((0, 0, 0),), kernel_size=3, *, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if cout % len(directions):
            raise GroupDivisibility(f"{cout} output channels cannot be split into {len(directions)} groups")
        self.kernel_size = kernel_size
        self.directions = [tuple(int(v) for v in d) for d in directions]
        k = kernel_size**3
        self.weight = Parameter(_init_weight(rng, (k, cin, cout), k * cin))
        self.capture = False
        self.last_input = None
        self.last_output = None

    @property
    def groups(self) -> int:
        return len(self.directions)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        binary = self.binary and self.binarizable
        _, cin, cout = self.weight.shape
        if _COST_TRACE:
            for d in set(self.directions):
                kmap = build_kernel_map(x, x.coords, KernelOffsets.cube(self.kernel_size, d), x.stride)
                n = self.directions.count(d)
                trace_cost(self, "sfsc", _conv_ops(kmap, cin, cout // self.groups, n), binary)
        out = sfsc_forward(x, ad.param(self.weight), self.directions, binary, self.kernel_size)
        if self.capture:
            self.last_input = x
            self.last_output = np.array(ad.value(out.features))
        return out


class InputLayer(Module):
    """Real-valued 3x3x3 convolution, batch norm and PReLU."""

    def __init__(self, cin, cout, *, rng=None):
        super().__init__()
        self.conv = SparseConv(cin, cout, 3, rng=rng)
        self.bn = BatchNorm(cout)
        self.act = PReLU(cout)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        y = self.conv(x)
        return y.replace_features(self.act(self.bn(y.features)))


class SSCBlock(Module):
    """Residual unit: binarize, (shifted) sparse conv, batch norm, PReLU, plus skip.

    The skip is the identity when channel counts match, else a binary 1x1 map.
    """

    def __init__(self, cin, cout, conv: Module, *, rng=None):
        super().__init__()
        self.conv = conv
        self.bn = BatchNorm(cout)
        self.act = PReLU(cout)
        self.proj = None if cin == cout else Conv1x1(cin, cout, binarizable=True, rng=rng)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        y = self.conv(x)
        branch = self.act(self.bn(y.features))
        skip = x.features if self.proj is None else self.proj(x.features)
        return x.replace_features(ad.add(branch, skip))


def ssc_block_forward(input: SparseTensor, block: SSCBlock) -> SparseTensor:
    return block(input)


class DownBlock(Module):
    """Binary 2x2x2 stride-2 conv branch plus average-pool and real 1x1 skip."""

    def __init__(self, cin, cout, *, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.conv = SparseConv(cin, cout, 2, 2, binarizable=True, rng=rng)
        self.bn = BatchNorm(cout)
        self.act = PReLU(cout)
        self.skip = Conv1x1(cin, cout, rng=rng)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        y = self.conv(x)
        main = self.act(self.bn(y.features))
        pooled = avg_pool(x, y.coords, y.stride)
        trace_cost(self, "pool", float(np.prod(x.features.shape)))
        return y.replace_features(ad.add(main, self.skip(pooled.features)))


def downsample_block(input: SparseTensor, block: DownBlock) -> SparseTensor:
    return block(input)


class UpBlock(Module):
    """Upsampling onto cached encoder coordinates.

    ``deconv``: binary transposed 2x2x2 conv, batch norm, PReLU, plus an
    unpool and real 1x1 skip.  ``interpolate``: nearest-parent copy only.
    """

    def __init__(self, cin, cout, mode="deconv", *, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.mode = mode
        if mode == "deconv":
            self.kernel = KernelOffsets.cube(2)
            self.weight = Parameter(_init_weight(rng, (8, cin, cout), cin))
            self.bn = BatchNorm(cout)
            self.act = PReLU(cout)
            self.skip = Conv1x1(cin, cout, rng=rng)
            self.binarizable = True
        elif mode != "interpolate":
            raise ValueError(f"unknown upsample mode {mode!r}")

    def __call__(self, x: SparseTensor, target: SparseTensor) -> SparseTensor:
        if target is None:
            raise MissingTargetCoords("upsampling needs the encoder coordinates")
        if self.mode == "interpolate":
            return unpool(x, target)
        binary = self.binary and self.binarizable
        kmap = build_kernel_map(target, x.coords, self.kernel, x.stride)
        _, cin, cout = self.weight.shape
        trace_cost(self, "deconv", _conv_ops(kmap, cin, cout), binary)
        f = x.features
        w = ad.param(self.weight)
        if binary:
            f = ad.sign_act(f)
            w = ad.scaled_sign(w)
        main = gather_conv(f, w, kmap.reverse_table())
        main = self.act(self.bn(main))
        skip = self.skip(unpool(x, target).features)
        return target.replace_features(ad.add(main, skip))


def upsample_block(input: SparseTensor, block: UpBlock, target_coords: SparseTensor) -> SparseTensor:
    return block(input, target_coords)
