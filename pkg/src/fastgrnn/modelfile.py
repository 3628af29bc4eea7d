"""The FGRN binary model format.

One container for two kinds of payload: float32 training checkpoints
(kind 0) and quantized integer models (kind 1). Little-endian throughout.

    magic "FGRN" | version u16 | kind u8 | arch u8
    D u16 | Dh u16 | L u16 | T u16 | r_w u16 | r_u u16
    gate_nonlin u8 | update_nonlin u8
    total_size u32 (declared length of the whole file, patched after write)
    n_blocks u16
    stats: mean then std, f32 per feature for checkpoints, f16 for quantized
    blocks ...
    crc32 u32 over everything before it

Each block: name_len u8, name ascii, dtype u8, ndim u8, shape u16 per dim,
then the payload. int8 blocks carry their f32 scale first. Sparse int8
payloads use byte indexing: per row a count, then ascending column indices,
then the int8 values; counts are 1 byte when cols <= 255 and indices 1 byte
when cols <= 256, else 2 bytes (u16).

Sizes reported by the accounting helpers are computed by encoding with the
same functions the writer uses, so they match the file byte-for-byte.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .bptt import SoftmaxHead
from .cells import (
    CellParams,
    FastGrnnParams,
    FastRnnParams,
    RnnParams,
    VectorFastRnnParams,
    raw_scalar,
)
from .data import NormStats
from .quantize import QuantizedModel, QuantizedTensor


class ModelFileError(ValueError):
    """Raised for malformed, truncated, or corrupted model files."""


MAGIC = b"FGRN"
VERSION = 1

KIND_CHECKPOINT = 0
KIND_QUANTIZED = 1

ARCH_TAGS = {"rnn": 0, "fastrnn": 1, "fastrnn-vec": 2, "fastgrnn": 3}
ARCH_NAMES = {v: k for k, v in ARCH_TAGS.items()}

NONLIN_TAGS = {"tanh": 0, "sigmoid": 1, "relu": 2, "hard_tanh": 3, "hard_sigmoid": 4}
NONLIN_NAMES = {v: k for k, v in NONLIN_TAGS.items()}

DT_F32 = 0
DT_INT8_SPARSE = 1
DT_INT8_DENSE = 2
DT_INT16 = 3
DT_INT32 = 4
DT_BITMASK = 5

_HEADER = struct.Struct("<4sHBBHHHHHHBBIH")  # up to n_blocks; stats follow
_TOTAL_SIZE_OFF = struct.calcsize("<4sHBBHHHHHHBB")  # where the u32 size field sits


# ---------------------------------------------------------------------------
# Block encoders / decoders. Encoders return bytes; the writer concatenates.


def _encode_sparse_int8(q: np.ndarray, mask: np.ndarray) -> bytes:
    rows, cols = q.shape
    count_fmt = "<B" if cols <= 255 else "<H"
    idx_wide = cols > 256
    out = bytearray()
    for r in range(rows):
        (idx,) = np.nonzero(mask[r])
        out += struct.pack(count_fmt, len(idx))
        out += idx.astype("<u2" if idx_wide else "u1").tobytes()
        out += q[r, idx].tobytes()
    return bytes(out)


def _decode_sparse_int8(buf: memoryview, off: int, shape: tuple[int, int]):
    rows, cols = shape
    count_fmt = struct.Struct("<B" if cols <= 255 else "<H")
    idx_dt = np.dtype("<u2") if cols > 256 else np.dtype("u1")
    q = np.zeros(shape, dtype=np.int8)
    mask = np.zeros(shape, dtype=bool)
    for r in range(rows):
        if off + count_fmt.size > len(buf):
            raise ModelFileError("sparse block truncated")
        (n,) = count_fmt.unpack_from(buf, off)
        off += count_fmt.size
        need = n * idx_dt.itemsize + n
        if off + need > len(buf):
            raise ModelFileError("sparse block truncated")
        idx = np.frombuffer(buf, dtype=idx_dt, count=n, offset=off).astype(np.int64)
        off += n * idx_dt.itemsize
        vals = np.frombuffer(buf, dtype=np.int8, count=n, offset=off)
        off += n
        if n and (np.any(idx >= cols) or np.any(np.diff(idx) <= 0)):
            raise ModelFileError(f"sparse row {r} has unsorted or out-of-range indices")
        q[r, idx] = vals
        mask[r, idx] = True
    return q, mask, off


def sparse_block_bytes(shape: tuple[int, int], nnz_per_row: np.ndarray) -> int:
    """Payload size of a sparse int8 block, matching _encode_sparse_int8."""
    rows, cols = shape
    count_b = 1 if cols <= 255 else 2
    idx_b = 1 if cols <= 256 else 2
    return rows * count_b + int(np.sum(nnz_per_row)) * (idx_b + 1)


def _encode_block(name: str, dtype: int, arr: np.ndarray, scale: float | None = None, mask=None) -> bytes:
    nm = name.encode("ascii")
    if len(nm) > 255:
        raise ModelFileError(f"block name too long: {name}")
    head = struct.pack("<B", len(nm)) + nm + struct.pack("<BB", dtype, arr.ndim)
    head += struct.pack(f"<{arr.ndim}H", *arr.shape)
    if dtype == DT_F32:
        payload = arr.astype("<f4").tobytes()
    elif dtype == DT_INT8_SPARSE:
        payload = struct.pack("<f", scale) + _encode_sparse_int8(arr, mask)
    elif dtype == DT_INT8_DENSE:
        payload = struct.pack("<f", scale) + arr.astype(np.int8).tobytes()
    elif dtype == DT_INT16:
        payload = arr.astype("<i2").tobytes()
    elif dtype == DT_INT32:
        payload = arr.astype("<i4").tobytes()
    elif dtype == DT_BITMASK:
        payload = np.packbits(arr.astype(bool).ravel(), bitorder="little").tobytes()
    else:
        raise ModelFileError(f"unknown block dtype {dtype}")
    return head + payload


def _decode_block(buf: memoryview, off: int):
    if off + 1 > len(buf):
        raise ModelFileError("block header truncated")
    name_len = buf[off]
    off += 1
    if off + name_len + 2 > len(buf):
        raise ModelFileError("block header truncated")
    name = bytes(buf[off : off + name_len]).decode("ascii")
    off += name_len
    dtype, ndim = buf[off], buf[off + 1]
    off += 2
    if off + 2 * ndim > len(buf):
        raise ModelFileError("block header truncated")
    shape = struct.unpack_from(f"<{ndim}H", buf, off)
    off += 2 * ndim
    numel = int(np.prod(shape)) if ndim else 1
    scale = None
    mask = None
    if dtype == DT_F32:
        end = off + 4 * numel
        _check_len(buf, end, name)
        arr = np.frombuffer(buf, dtype="<f4", count=numel, offset=off).reshape(shape).astype(np.float64)
        off = end
    elif dtype == DT_INT8_SPARSE:
        _check_len(buf, off + 4, name)
        (scale,) = struct.unpack_from("<f", buf, off)
        arr, mask, off = _decode_sparse_int8(buf, off + 4, shape)
    elif dtype == DT_INT8_DENSE:
        end = off + 4 + numel
        _check_len(buf, end, name)
        (scale,) = struct.unpack_from("<f", buf, off)
        arr = np.frombuffer(buf, dtype=np.int8, count=numel, offset=off + 4).reshape(shape).copy()
        off = end
    elif dtype == DT_INT16:
        end = off + 2 * numel
        _check_len(buf, end, name)
        arr = np.frombuffer(buf, dtype="<i2", count=numel, offset=off).reshape(shape).copy()
        off = end
    elif dtype == DT_INT32:
        end = off + 4 * numel
        _check_len(buf, end, name)
        arr = np.frombuffer(buf, dtype="<i4", count=numel, offset=off).reshape(shape).copy()
        off = end
    elif dtype == DT_BITMASK:
        nbytes = (numel + 7) // 8
        end = off + nbytes
        _check_len(buf, end, name)
        bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=off), bitorder="little")
        arr = bits[:numel].reshape(shape).astype(bool)
        off = end
    else:
        raise ModelFileError(f"block {name!r} has unknown dtype {dtype}")
    return name, arr, scale, mask, off


def _check_len(buf, end, name):
    if end > len(buf):
        raise ModelFileError(f"block {name!r} truncated")


# ---------------------------------------------------------------------------
# Container assembly.


def _assemble(kind: int, arch: str, dims, ranks, nonlins, stats: NormStats, blocks: list[bytes]) -> bytes:
    d_in, d_hidden, n_classes, horizon = dims
    for v in (*dims, *ranks):
        if not 0 <= v < 65536:
            raise ModelFileError(f"dimension {v} out of u16 range")
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        kind,
        ARCH_TAGS[arch],
        d_in,
        d_hidden,
        n_classes,
        horizon,
        ranks[0],
        ranks[1],
        NONLIN_TAGS[nonlins[0]],
        NONLIN_TAGS[nonlins[1]],
        0,  # total_size, patched below
        len(blocks),
    )
    stats_dt = "<f4" if kind == KIND_CHECKPOINT else "<f2"
    stats_bytes = stats.mean.astype(stats_dt).tobytes() + stats.std.astype(stats_dt).tobytes()
    body = header + stats_bytes + b"".join(blocks)
    total = len(body) + 4  # trailing crc32
    body = body[:_TOTAL_SIZE_OFF] + struct.pack("<I", total) + body[_TOTAL_SIZE_OFF + 4 :]
    return body + struct.pack("<I", zlib.crc32(body))


def _parse_container(blob: bytes):
    if len(blob) < _HEADER.size + 4:
        raise ModelFileError("file too short to be a model file")
    (
        magic,
        version,
        kind,
        arch_tag,
        d_in,
        d_hidden,
        n_classes,
        horizon,
        r_w,
        r_u,
        gate_tag,
        update_tag,
        total,
        n_blocks,
    ) = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ModelFileError(f"bad magic {magic!r}, not a model file")
    if version != VERSION:
        raise ModelFileError(f"unsupported format version {version}")
    if total != len(blob):
        raise ModelFileError(f"declared size {total} does not match file length {len(blob)}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if crc != zlib.crc32(blob[:-4]):
        raise ModelFileError("checksum mismatch, file is corrupted")
    if arch_tag not in ARCH_NAMES:
        raise ModelFileError(f"unknown architecture tag {arch_tag}")
    stats_dt = np.dtype("<f4") if kind == KIND_CHECKPOINT else np.dtype("<f2")
    off = _HEADER.size
    end = off + 2 * d_in * stats_dt.itemsize
    if end > len(blob) - 4:
        raise ModelFileError("stats truncated")
    mv = memoryview(blob)
    mean = np.frombuffer(mv, dtype=stats_dt, count=d_in, offset=off).astype(np.float64)
    std = np.frombuffer(mv, dtype=stats_dt, count=d_in, offset=off + d_in * stats_dt.itemsize).astype(np.float64)
    blocks = {}
    order = []
    off = end
    for _ in range(n_blocks):
        name, arr, scale, mask, off = _decode_block(mv, off)
        blocks[name] = (arr, scale, mask)
        order.append(name)
    if off != len(blob) - 4:
        raise ModelFileError("trailing bytes after declared blocks")
    meta = dict(
        kind=kind,
        arch=ARCH_NAMES[arch_tag],
        d_in=d_in,
        d_hidden=d_hidden,
        n_classes=n_classes,
        horizon=horizon,
        ranks=(r_w, r_u),
        gate_nonlin=NONLIN_NAMES[gate_tag],
        update_nonlin=NONLIN_NAMES[update_tag],
        stats=NormStats(mean=mean, std=std),
    )
    return meta, blocks, order


def peek_kind(path) -> int:
    """Container kind without a full parse (still validates magic/version)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if len(head) < 8 or head[:4] != MAGIC:
        raise ModelFileError(f"{path}: not a model file")
    version, kind = struct.unpack_from("<HB", head, 4)
    if version != VERSION:
        raise ModelFileError(f"{path}: unsupported format version {version}")
    return kind


# ---------------------------------------------------------------------------
# Checkpoints (kind 0).


@dataclass
class Checkpoint:
    cell: CellParams
    head: SoftmaxHead
    stats: NormStats
    horizon: int
    masks: dict[str, np.ndarray] | None


def save_checkpoint(path, cell: CellParams, head: SoftmaxHead, stats: NormStats, horizon: int, masks=None) -> int:
    """Write a float32 checkpoint; returns the byte size."""
    blocks = []
    for name, t in cell.tensors().items():
        blocks.append(_encode_block(name, DT_F32, t))
    blocks.append(_encode_block("W_out", DT_F32, head.W_out))
    blocks.append(_encode_block("b_out", DT_F32, head.b_out))
    for name, mask in (masks or {}).items():
        blocks.append(_encode_block("mask:" + name, DT_BITMASK, mask))
    ranks = (0, 0)
    gate, update = "hard_sigmoid", "tanh"
    if isinstance(cell, FastGrnnParams):
        gate, update = cell.gate_nonlin, cell.update_nonlin
        ranks = (
            0 if cell.W2 is None else cell.W1.shape[1],
            0 if cell.U2 is None else cell.U1.shape[1],
        )
    else:
        update = cell.nonlin
    n_classes = head.W_out.shape[0]
    blob = _assemble(
        KIND_CHECKPOINT,
        cell.arch,
        (cell.d_in, cell.d_hidden, n_classes, horizon),
        ranks,
        (gate, update),
        stats,
        blocks,
    )
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def _block(blocks, name, context):
    if name not in blocks:
        raise ModelFileError(f"{context}: missing block {name!r}")
    return blocks[name][0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    meta, blocks, _ = _parse_container(blob)
    if meta["kind"] != KIND_CHECKPOINT:
        raise ModelFileError(f"{path}: expected a checkpoint, found a quantized model")
    arch = meta["arch"]
    ctx = str(path)
    if arch == "rnn":
        cell = RnnParams(
            W=_block(blocks, "W", ctx),
            U=_block(blocks, "U", ctx),
            b=_block(blocks, "b", ctx),
            nonlin=meta["update_nonlin"],
        )
    elif arch == "fastrnn":
        cell = FastRnnParams(
            W=_block(blocks, "W", ctx),
            U=_block(blocks, "U", ctx),
            b=_block(blocks, "b", ctx),
            alpha_raw=raw_scalar(float(_block(blocks, "alpha_raw", ctx))),
            beta_raw=raw_scalar(float(_block(blocks, "beta_raw", ctx))),
            nonlin=meta["update_nonlin"],
        )
    elif arch == "fastrnn-vec":
        cell = VectorFastRnnParams(
            W=_block(blocks, "W", ctx),
            U=_block(blocks, "U", ctx),
            b=_block(blocks, "b", ctx),
            alpha_raw=_block(blocks, "alpha_raw", ctx),
            zeta_raw=raw_scalar(float(_block(blocks, "zeta_raw", ctx))),
            nu_raw=raw_scalar(float(_block(blocks, "nu_raw", ctx))),
            nonlin=meta["update_nonlin"],
        )
    else:
        r_w, r_u = meta["ranks"]
        cell = FastGrnnParams(
            W1=_block(blocks, "W1" if r_w else "W", ctx),
            W2=_block(blocks, "W2", ctx) if r_w else None,
            U1=_block(blocks, "U1" if r_u else "U", ctx),
            U2=_block(blocks, "U2", ctx) if r_u else None,
            b_z=_block(blocks, "b_z", ctx),
            b_h=_block(blocks, "b_h", ctx),
            zeta_raw=raw_scalar(float(_block(blocks, "zeta_raw", ctx))),
            nu_raw=raw_scalar(float(_block(blocks, "nu_raw", ctx))),
            gate_nonlin=meta["gate_nonlin"],
            update_nonlin=meta["update_nonlin"],
        )
    head = SoftmaxHead(W_out=_block(blocks, "W_out", ctx), b_out=_block(blocks, "b_out", ctx))
    masks = {n[len("mask:") :]: blocks[n][0] for n in blocks if n.startswith("mask:")}
    return Checkpoint(
        cell=cell,
        head=head,
        stats=meta["stats"],
        horizon=meta["horizon"],
        masks=masks or None,
    )


# ---------------------------------------------------------------------------
# Quantized models (kind 1).

_SPARSE_NAMES = ("W", "U", "W1", "W2", "U1", "U2")


def _quantized_blocks(qm: QuantizedModel) -> list[tuple[str, bytes]]:
    out = []
    for name in _SPARSE_NAMES:
        if name not in qm.weights:
            continue
        t = qm.weights[name]
        if t.mask is not None:
            out.append((name, _encode_block(name, DT_INT8_SPARSE, t.q, scale=t.scale, mask=t.mask)))
        else:
            out.append((name, _encode_block(name, DT_INT8_DENSE, t.q, scale=t.scale)))
    wout = qm.weights["W_out"]
    out.append(("W_out", _encode_block("W_out", DT_INT8_DENSE, wout.q, scale=wout.scale)))
    for name, arr in sorted(qm.biases_q14.items()):
        out.append((name, _encode_block(name, DT_INT16, arr)))
    out.append(("b_out", _encode_block("b_out", DT_INT32, qm.bias_out)))
    for name, arr in sorted(qm.consts_q14.items()):
        out.append((name, _encode_block(name, DT_INT16, arr)))
    return out


def save_quantized(path, qm: QuantizedModel) -> int:
    blob = _quantized_blob(qm)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def _quantized_blob(qm: QuantizedModel) -> bytes:
    blocks = [b for _, b in _quantized_blocks(qm)]
    return _assemble(
        KIND_QUANTIZED,
        qm.arch,
        (qm.d_in, qm.d_hidden, qm.n_classes, qm.horizon),
        qm.ranks,
        (qm.gate_nonlin, qm.update_nonlin),
        qm.stats,
        blocks,
    )


def size_breakdown(qm: QuantizedModel) -> dict[str, int]:
    """Per-section byte counts; their sum equals the file size exactly."""
    named = _quantized_blocks(qm)
    out = {"header+stats": _HEADER.size + 2 * 2 * qm.d_in}
    for name, block in named:
        out[name] = len(block)
    out["crc32"] = 4
    return out


def load_quantized(path) -> QuantizedModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    meta, blocks, _ = _parse_container(blob)
    if meta["kind"] != KIND_QUANTIZED:
        raise ModelFileError(f"{path}: expected a quantized model, found a checkpoint")
    weights = {}
    biases = {}
    consts = {}
    bias_out = None
    for name, (arr, scale, mask) in blocks.items():
        if name in _SPARSE_NAMES or name == "W_out":
            weights[name] = QuantizedTensor(q=arr, scale=float(scale), mask=mask)
        elif name == "b_out":
            bias_out = arr
        elif name in ("b", "b_z", "b_h"):
            biases[name] = arr
        else:
            consts[name] = arr
    if bias_out is None or "W_out" not in weights:
        raise ModelFileError(f"{path}: classifier blocks missing")
    return QuantizedModel(
        arch=meta["arch"],
        d_in=meta["d_in"],
        d_hidden=meta["d_hidden"],
        n_classes=meta["n_classes"],
        horizon=meta["horizon"],
        gate_nonlin=meta["gate_nonlin"],
        update_nonlin=meta["update_nonlin"],
        weights=weights,
        biases_q14=biases,
        bias_out=bias_out,
        consts_q14=consts,
        stats=meta["stats"],
        ranks=meta["ranks"],
    )
