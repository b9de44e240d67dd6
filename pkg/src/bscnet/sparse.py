"""Sparse voxel tensors, kernel maps, voxelization and point-file I/O.

Coordinates are rows ``(batch, x, y, z)`` of an integer array.  A convolution
output at ``u`` gathers the input at ``u + (offset + shift) * in_stride``.
"""
from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (
    DuplicateCoordinate,
    EmptyInput,
    ParseError,
    ShapeMismatch,
    StrideViolation,
)

_I32 = np.iinfo(np.int32)


def as_coords(coords) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ShapeMismatch(f"coords must be (N, 4), got {arr.shape}")
    if arr.min() < _I32.min or arr.max() > _I32.max:
        raise ShapeMismatch("coordinate component does not fit in 32 bits")
    if (arr[:, 0] < 0).any():
        raise ShapeMismatch("batch index must be non-negative")
    return arr


class _CoordIndex:
    """Sorted-key lookup table over a fixed coordinate set."""

    def __init__(self, coords: np.ndarray):
        self.lo = coords.min(axis=0) if len(coords) else np.zeros(4, np.int64)
        hi = coords.max(axis=0) if len(coords) else np.zeros(4, np.int64)
        self.span = hi - self.lo + 1
        if float(np.prod(self.span.astype(np.float64))) >= 2.0**62:
            # bounding box too large to linearize: fall back to a dict
            self.table = {tuple(c): i for i, c in enumerate(coords.tolist())}
            self.keys = None
            return
        self.table = None
        keys = self._encode(coords)
        self.order = np.argsort(keys, kind="stable")
        self.keys = keys[self.order]

    def _encode(self, c: np.ndarray) -> np.ndarray:
        rel = c - self.lo
        s = self.span
        return ((rel[:, 0] * s[1] + rel[:, 1]) * s[2] + rel[:, 2]) * s[3] + rel[:, 3]

    def lookup(self, query: np.ndarray) -> np.ndarray:
        out = np.full(len(query), -1, dtype=np.int64)
        if len(query) == 0:
            return out
        if self.keys is None:
            for i, c in enumerate(query.tolist()):
                out[i] = self.table.get(tuple(c), -1)
            return out
        rel = query - self.lo
        inside = ((rel >= 0) & (rel < self.span)).all(axis=1)
        if not inside.any() or len(self.keys) == 0:
            return out
        k = self._encode(query[inside])
        pos = np.searchsorted(self.keys, k)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos_c] == k
        rows = np.where(hit, self.order[pos_c], -1)
        out[inside] = rows
        return out


class SparseTensor:
    """Active voxel sites with one feature row per site.

    ``features`` is normally an ``(N, C)`` array; during training it may be a
    :class:`bscnet.autodiff.Var` holding such an array.
    """

    def __init__(self, coords, features, stride: int = 1, *, check: bool = True):
        coords = as_coords(coords)
        stride = int(stride)
        if stride < 1:
            raise StrideViolation(f"stride must be positive, got {stride}")
        if not hasattr(features, "shape"):
            features = np.asarray(features, dtype=np.float64)
        if len(features.shape) != 2 or features.shape[0] != len(coords) or features.shape[1] < 1:
            raise ShapeMismatch(
                f"features shape {tuple(features.shape)} does not match {len(coords)} sites"
            )
        self.coords = coords
        self.features = features
        self.stride = stride
        self._index = None
        self._lookup = None
        self._key = None
        if check:
            self._validate()

    def _validate(self):
        if len(self.coords) and (self.coords[:, 1:] % self.stride).any():
            bad = self.coords[(self.coords[:, 1:] % self.stride).any(axis=1)][0]
            raise StrideViolation(f"coordinate {tuple(bad)} is not a multiple of stride {self.stride}")
        uniq, first, counts = np.unique(self.coords, axis=0, return_index=True, return_counts=True)
        if len(uniq) != len(self.coords):
            raise DuplicateCoordinate(uniq[np.argmax(counts > 1)])

    @property
    def num_sites(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    @property
    def index(self) -> dict:
        """Mapping from ``(b, x, y, z)`` tuples to row numbers."""
        if self._index is None:
            self._index = {tuple(c): i for i, c in enumerate(self.coords.tolist())}
        return self._index

    def lookup(self, query) -> np.ndarray:
        """Row of each query coordinate, or -1 where the site is inactive."""
        if self._lookup is None:
            self._lookup = _CoordIndex(self.coords)
        return self._lookup.lookup(np.asarray(query, dtype=np.int64).reshape(-1, 4))

    @property
    def coord_key(self) -> bytes:
        if self._key is None:
            h = hashlib.blake2b(digest_size=16)
            h.update(np.ascontiguousarray(self.coords).tobytes())
            h.update(struct.pack("<q", self.stride))
            self._key = h.digest()
        return self._key

    def replace_features(self, features) -> "SparseTensor":
        out = SparseTensor.__new__(SparseTensor)
        if features.shape[0] != len(self.coords):
            raise ShapeMismatch("feature rows must match site count")
        out.coords = self.coords
        out.features = features
        out.stride = self.stride
        out._index = self._index
        out._lookup = self._lookup
        out._key = self._key
        # lookup tables are built lazily; share them both ways
        if out._lookup is None:
            self._lookup = _CoordIndex(self.coords)
            out._lookup = self._lookup
        return out

    def __repr__(self):
        return f"SparseTensor(sites={self.num_sites}, channels={self.channels}, stride={self.stride})"


def build_sparse_tensor(coords, features, stride: int = 1) -> SparseTensor:
    return SparseTensor(coords, features, stride)


def cube_offsets(size: int) -> np.ndarray:
    """Offsets of a cubic window, ordered by (dz, dy, dx), most negative first.

    Odd sizes are centred on the origin; even sizes span ``0..size-1``.
    """
    if size < 1:
        raise ValueError("kernel size must be positive")
    r = range(-(size // 2), size // 2 + 1) if size % 2 else range(size)
    return np.array([(dx, dy, dz) for dz in r for dy in r for dx in r], dtype=np.int64)


@dataclass(frozen=True)
class KernelOffsets:
    offsets: np.ndarray
    shift: tuple = (0, 0, 0)

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.int64).reshape(-1, 3)
        if len(np.unique(off, axis=0)) != len(off):
            raise ValueError("kernel offsets must be distinct")
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "shift", tuple(int(s) for s in self.shift))

    @classmethod
    def cube(cls, size: int, shift=(0, 0, 0)) -> "KernelOffsets":
        return cls(cube_offsets(size), shift)

    def __len__(self):
        return len(self.offsets)

    def key(self) -> tuple:
        return (self.offsets.tobytes(), self.shift)


@dataclass
class KernelMap:
    """Per-offset ``(input_rows, output_rows)`` pairs of one sparse convolution."""

    pairs: list
    out_coords: np.ndarray
    in_stride: int
    out_stride: int
    offsets: np.ndarray
    num_in: int
    _nbr: np.ndarray = field(default=None, repr=False)
    _rev: np.ndarray = field(default=None, repr=False)

    @property
    def num_out(self) -> int:
        return len(self.out_coords)

    def pair_counts(self) -> np.ndarray:
        return np.array([len(i) for i, _ in self.pairs], dtype=np.int64)

    def neighbor_table(self) -> np.ndarray:
        """``(num_out, K)`` table of input rows, -1 where no input is active."""
        if self._nbr is None:
            nbr = np.full((self.num_out, len(self.pairs)), -1, dtype=np.int64)
            for k, (i, o) in enumerate(self.pairs):
                nbr[o, k] = i
            self._nbr = nbr
        return self._nbr

    def reverse_table(self) -> np.ndarray:
        """``(num_in, K)`` table of output rows, -1 where no output gathers the input."""
        if self._rev is None:
            rev = np.full((self.num_in, len(self.pairs)), -1, dtype=np.int64)
            for k, (i, o) in enumerate(self.pairs):
                rev[i, k] = o
            self._rev = rev
        return self._rev


_KMAP_CACHE: OrderedDict = OrderedDict()
_KMAP_CACHE_SIZE = 512
_KMAP_CACHE_BYTES = 256 * 2**20
_kmap_cache_used = 0


def _kmap_bytes(kmap: KernelMap) -> int:
    # pairs plus the two lazily built dense tables
    pairs = sum(i.nbytes + o.nbytes for i, o in kmap.pairs)
    return pairs + (kmap.num_out + kmap.num_in) * len(kmap.pairs) * 8


def _coords_key(coords: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(coords).tobytes(), digest_size=16).digest()


def build_kernel_map(
    input: SparseTensor,
    out_coords,
    kernel: KernelOffsets,
    out_stride: int,
    *,
    cache: bool = True,
) -> KernelMap:
    """Pair every output site with the active inputs under each kernel offset."""
    out_coords = as_coords(out_coords)
    if len(out_coords) and (out_coords[:, 1:] % out_stride).any():
        raise StrideViolation(f"output coordinates must be multiples of {out_stride}")
    key = None
    if cache:
        key = (input.coord_key, _coords_key(out_coords), kernel.key(), int(out_stride))
        hit = _KMAP_CACHE.get(key)
        if hit is not None:
            _KMAP_CACHE.move_to_end(key)
            return hit
    shift = np.asarray(kernel.shift, dtype=np.int64)
    pairs = []
    for off in kernel.offsets:
        q = out_coords.copy()
        q[:, 1:] += (off + shift) * input.stride
        rows = input.lookup(q)
        hit_rows = np.nonzero(rows >= 0)[0]
        pairs.append((rows[hit_rows], hit_rows))
    kmap = KernelMap(pairs, out_coords, input.stride, int(out_stride), kernel.offsets, input.num_sites)
    if cache:
        global _kmap_cache_used
        _KMAP_CACHE[key] = kmap
        _kmap_cache_used += _kmap_bytes(kmap)
        while len(_KMAP_CACHE) > 1 and (
            len(_KMAP_CACHE) > _KMAP_CACHE_SIZE or _kmap_cache_used > _KMAP_CACHE_BYTES
        ):
            _, old = _KMAP_CACHE.popitem(last=False)
            _kmap_cache_used -= _kmap_bytes(old)
    return kmap


def clear_kernel_map_cache():
    global _kmap_cache_used
    _KMAP_CACHE.clear()
    _kmap_cache_used = 0


def quantize_coords(coords: np.ndarray, stride: int) -> np.ndarray:
    out = np.array(coords, dtype=np.int64, copy=True)
    out[:, 1:] = np.floor_divide(out[:, 1:], stride) * stride
    return out


def downsample_coords(input: SparseTensor, factor: int) -> np.ndarray:
    """Coarse sites covering ``input`` at stride ``input.stride * factor``, sorted."""
    if factor < 1:
        raise ValueError("factor must be positive")
    q = quantize_coords(input.coords, input.stride * factor)
    return np.unique(q, axis=0)


def parent_rows(fine: SparseTensor, coarse: SparseTensor) -> np.ndarray:
    """Row in ``coarse`` of the cell containing each site of ``fine`` (-1 if absent)."""
    return coarse.lookup(quantize_coords(fine.coords, coarse.stride))


class Voxelization(NamedTuple):
    tensor: SparseTensor
    labels: np.ndarray
    point_site: np.ndarray


def voxelize(
    points,
    resolution: float,
    mode: str = "all-dims",
    labels=None,
    features=None,
    batch: int = 0,
) -> Voxelization:
    """Quantize points to voxels.

    ``points`` is ``(N, 3)``, or ``(N, 4)`` with the label in the last column.
    Site features are a constant occupancy channel followed by the mean of any
    extra per-point features.  Site labels are majority votes, ties going to
    the smallest label.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise EmptyInput("no points to voxelize")
    if labels is None and pts.shape[1] == 4:
        labels = pts[:, 3].astype(np.int64)
    xyz = pts[:, :3]
    if mode == "all-dims":
        vox = np.floor(xyz / resolution)
    elif mode == "depth-only":
        vox = np.column_stack([np.rint(xyz[:, 0]), np.rint(xyz[:, 1]), np.floor(xyz[:, 2] / resolution)])
    else:
        raise ValueError(f"unknown voxelization mode {mode!r}")
    coords = np.column_stack([np.full(len(vox), batch, dtype=np.int64), vox.astype(np.int64)])
    sites, inverse = np.unique(coords, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = len(sites)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    cols = [np.ones((m, 1))]
    if features is not None:
        f = np.asarray(features, dtype=np.float64).reshape(len(pts), -1)
        sums = np.zeros((m, f.shape[1]))
        np.add.at(sums, inverse, f)
        cols.append(sums / counts[:, None])
    tensor = SparseTensor(sites, np.hstack(cols), 1, check=False)
    site_labels = None
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        uniq, lab_id = np.unique(labels, return_inverse=True)
        votes = np.bincount(inverse * len(uniq) + lab_id.reshape(-1), minlength=m * len(uniq))
        site_labels = uniq[votes.reshape(m, len(uniq)).argmax(axis=1)]
    return Voxelization(tensor, site_labels, inverse)


def concat_batches(tensors) -> SparseTensor:
    """Stack single-scene tensors into one tensor, scene ``i`` at batch ``i``."""
    coords, feats = [], []
    stride = tensors[0].stride
    for b, t in enumerate(tensors):
        c = t.coords.copy()
        c[:, 0] = b
        coords.append(c)
        feats.append(np.asarray(t.features))
    return SparseTensor(np.vstack(coords), np.vstack(feats), stride, check=False)


# -- point files ---------------------------------------------------------

BINARY_MAGIC = b"BVPC"
BINARY_VERSION = 1
_RECORD = np.dtype([("xyz", "<f4", (3,)), ("label", "<u4")])


def _detect_format(path) -> str:
    return "binary" if str(path).endswith((".bin", ".bvpc")) else "text"


def save_points(path, points, labels, format: str | None = None):
    """Write points in the text (``x y z label``) or binary ``BVPC`` format."""
    fmt = format or _detect_format(path)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(pts):
        raise ShapeMismatch("one label per point required")
    if fmt == "text":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for (x, y, z), lab in zip(pts.tolist(), labels.tolist()):
                fh.write(f"{x!r} {y!r} {z!r} {lab}\n")
    elif fmt == "binary":
        rec = np.empty(len(pts), dtype=_RECORD)
        rec["xyz"] = pts
        rec["label"] = labels
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC + struct.pack("<IQ", BINARY_VERSION, len(pts)))
            fh.write(rec.tobytes())
    else:
        raise ValueError(f"unknown point format {fmt!r}")


def load_points(path, format: str | None = None):
    """Read a point file; returns ``(points (N, 3), labels (N,))``."""
    fmt = format or _detect_format(path)
    if fmt == "text":
        pts, labels = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise ParseError(lineno, f"expected 'x y z label', got {len(parts)} fields")
                try:
                    pts.append([float(p) for p in parts[:3]])
                    labels.append(int(parts[3]))
                except ValueError as exc:
                    raise ParseError(lineno, str(exc)) from None
        return np.array(pts, dtype=np.float64).reshape(-1, 3), np.array(labels, dtype=np.int64)
    if fmt == "binary":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < 16 or data[:4] != BINARY_MAGIC:
            raise ParseError(0, "bad magic, not a BVPC point file")
        version, count = struct.unpack_from("<IQ", data, 4)
        if version != BINARY_VERSION:
            raise ParseError(0, f"unsupported BVPC version {version}")
        if len(data) != 16 + count * _RECORD.itemsize:
            raise ParseError(0, "record payload size does not match header count")
        rec = np.frombuffer(data, dtype=_RECORD, count=count, offset=16)
        return rec["xyz"].astype(np.float64), rec["label"].astype(np.int64)
    raise ValueError(f"unknown point format {fmt!r}")
