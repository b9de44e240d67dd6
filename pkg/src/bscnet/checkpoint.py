"""Checkpoint container: ``BSC1`` header, JSON config, named tensors, CRC32 trailer.

Layout (little endian)::

    b"BSC1" | u32 version | u64 len | config JSON (UTF-8)
    repeated: u16 len | name (UTF-8) | u8 dtype | u8 rank | u64 dims[rank] | payload
    u32 CRC32 of everything before it

dtype 0 is float32, 1 is sign bits (1 for non-negative) packed little-endian
into bytes (row-major, padded to a whole byte), 2 is float64. Training checkpoints use float64 so a
reload reproduces forward outputs bit for bit.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .binarize import sign
from .conv import SfscConv
from .errors import ChecksumMismatch, IncompatibleSpec, MissingTensor, ParseError, UnknownVersion
from .nets import NetworkSpec, build_network
from .search import SupernetConv

MAGIC = b"BSC1"
VERSION = 1
F32, BITS, F64 = 0, 1, 2
SCALE_SUFFIX = "#scale"

# fields that change the parameter layout
_STRUCTURE = (
    "family",
    "levels",
    "base_filters",
    "filters_step",
    "blocks_per_level",
    "num_classes",
    "in_channels",
    "search_mode",
)


def _tensor_section(name: str, arr: np.ndarray, dtype: int) -> bytes:
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", dtype, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    if dtype == BITS:
        payload = np.packbits(np.asarray(arr).reshape(-1) >= 0, bitorder="little").tobytes()
    elif dtype == F32:
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    else:
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return head + payload


def _binary_weights(net) -> dict:
    """``{name: (signs, group_scales)}`` of weights a binary forward binarizes."""
    out = {}
    if not net.binary:
        return out
    for path, mod in net.named_modules():
        if not mod.binarizable or isinstance(mod, SupernetConv) or not hasattr(mod, "weight"):
            continue
        w = mod.weight.value
        groups = mod.groups if isinstance(mod, SfscConv) else 1
        cin, cout = w.shape[-2:]  # 1x1 layers have no kernel axis
        scales = np.abs(w).reshape(-1, cin, groups, cout // groups).mean(axis=(0, 1, 3))
        out[f"{path}.weight"] = (sign(w), scales)
    return out


def save_checkpoint(path, net, extra: dict | None = None, pack_binary: bool = False):
    """Write ``net`` (spec, parameters, buffers) and ``extra`` metadata.

    With ``pack_binary`` the binarized weights of a binary network are stored
    as sign bits plus per-group scales, which keeps the binary forward but
    drops the latent real values.
    """
    config = {"spec": net.spec.to_dict(), "binary": bool(net.binary), "extra": extra or {}}
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob]
    packed = _binary_weights(net) if pack_binary else {}
    for name, arr in net.state_dict().items():
        if name in packed:
            signs, scales = packed[name]
            parts.append(_tensor_section(name, signs, BITS))
            parts.append(_tensor_section(name + SCALE_SUFFIX, scales, F64))
        else:
            parts.append(_tensor_section(name, arr, F64))
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Raw ``(config, tensors)``; packed sign tensors come back as float +-1."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 + 12 + 4:
        raise ChecksumMismatch("file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("CRC32 does not match; file is corrupt or truncated")
    if body[:4] != MAGIC:
        raise UnknownVersion("not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<IQ", body, 4)
    if version != VERSION:
        raise UnknownVersion(f"checkpoint format version {version}, expected {VERSION}")
    pos = 16
    config = json.loads(body[pos : pos + n].decode("utf-8"))
    pos += n
    tensors = {}
    try:
        while pos < len(body):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + ln].decode("utf-8")
            pos += ln
            dtype, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if dtype == BITS:
                nbytes = (count + 7) // 8
                bits = np.frombuffer(body, np.uint8, nbytes, pos)
                pos_bits = np.unpackbits(bits, count=count, bitorder="little").astype(bool)
                arr = np.where(pos_bits, 1.0, -1.0).reshape(shape)
            elif dtype in (F32, F64):
                item = 4 if dtype == F32 else 8
                nbytes = count * item
                arr = np.frombuffer(body, "<f4" if dtype == F32 else "<f8", count, pos)
                arr = arr.astype(np.float64).reshape(shape)
            else:
                raise UnknownVersion(f"unknown tensor dtype {dtype}")
            pos += nbytes
            tensors[name] = arr
    except struct.error as exc:
        raise ParseError(pos, f"malformed tensor section: {exc}") from exc
    return config, tensors


def _check_compatible(saved: NetworkSpec, spec: NetworkSpec):
    for f in _STRUCTURE:
        if getattr(saved, f) != getattr(spec, f):
            raise IncompatibleSpec(f"{f}: checkpoint has {getattr(saved, f)!r}, requested {getattr(spec, f)!r}")


def _unpack_weights(tensors: dict) -> dict:
    out = {}
    for name, arr in tensors.items():
        if name.endswith(SCALE_SUFFIX):
            continue
        scales = tensors.get(name + SCALE_SUFFIX)
        if scales is not None:
            cin, cout = arr.shape[-2:]
            g = len(scales)
            arr = (arr.reshape(-1, cin, g, cout // g) * scales[None, None, :, None]).reshape(arr.shape)
        out[name] = arr
    return out


def load_checkpoint(path, spec: NetworkSpec | None = None):
    """Rebuild the saved network; returns ``(net, extra)``.

    ``spec``, when given, must describe the same architecture as the saved one.
    """
    config, tensors = read_checkpoint(path)
    saved = NetworkSpec.from_dict(config["spec"])
    if spec is not None:
        _check_compatible(saved, spec)
    net = build_network(saved)
    state = _unpack_weights(tensors)
    missing = [n for n in net.state_dict() if n not in state]
    if missing:
        raise MissingTensor(missing[0])
    net.load_state_dict(state)
    net.set_binary(config.get("binary", saved.binary))
    net.eval()
    return net, config.get("extra", {})

