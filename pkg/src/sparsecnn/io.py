"""Little-endian binary files for dense tensors (``SCKT``) and CSR kernels (``SCSR``).

SCKT::

    b"SCKT" | u32 version=1 | u8 mode (3 or 4) | u32 dims[mode] | f32 payload

SCSR::

    b"SCSR" | u32 version=1 | u32 N,C,R,S,H_in,W_in,stride,pad | u64 nnz
    | u64 rowptr[N+1] | u32 colidx[nnz] | u32 origin[nnz][3] | f32 value[nnz]
"""
from __future__ import annotations

import struct
from os import PathLike
from typing import BinaryIO, Union

import numpy as np

from .tensor import LayerSpec, SparseKernelMatrix, Tensor3, Tensor4

TENSOR_MAGIC = b"SCKT"
CSR_MAGIC = b"SCSR"
VERSION = 1

PathOrFile = Union[str, PathLike, BinaryIO]


class FormatError(ValueError):
    pass


def _open(target: PathOrFile, mode: str):
    if hasattr(target, "read") or hasattr(target, "write"):
        return _NoClose(target)
    return open(target, mode)


class _NoClose:
    def __init__(self, f):
        self.f = f

    def __enter__(self):
        return self.f

    def __exit__(self, *exc):
        return False


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_array(f: BinaryIO, dtype: str, count: int) -> np.ndarray:
    dt = np.dtype(dtype)
    return np.frombuffer(_read_exact(f, dt.itemsize * count), dtype=dt).copy()


def save_tensor(tensor: Union[Tensor3, Tensor4], target: PathOrFile) -> None:
    data = tensor.data
    with _open(target, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<IB", VERSION, data.ndim))
        f.write(struct.pack(f"<{data.ndim}I", *data.shape))
        f.write(data.astype("<f4", copy=False).tobytes(order="C"))


def load_tensor(source: PathOrFile) -> Union[Tensor3, Tensor4]:
    with _open(source, "rb") as f:
        if _read_exact(f, 4) != TENSOR_MAGIC:
            raise FormatError("not a SCKT tensor file")
        version, mode = struct.unpack("<IB", _read_exact(f, 5))
        if version != VERSION:
            raise FormatError(f"unsupported SCKT version {version}")
        if mode not in (3, 4):
            raise FormatError(f"SCKT mode must be 3 or 4, got {mode}")
        dims = struct.unpack(f"<{mode}I", _read_exact(f, 4 * mode))
        data = _read_array(f, "<f4", int(np.prod(dims))).reshape(dims)
        if f.read(1):
            raise FormatError("trailing bytes after SCKT payload")
    return Tensor3(data) if mode == 3 else Tensor4(data)


def save_csr(m: SparseKernelMatrix, target: PathOrFile) -> None:
    with _open(target, "wb") as f:
        f.write(CSR_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<8I", *m.spec.fields()))
        f.write(struct.pack("<Q", m.nnz))
        f.write(m.rowptr.astype("<u8").tobytes())
        f.write(m.colidx.astype("<u4").tobytes())
        f.write(m.origin.astype("<u4").tobytes())
        f.write(m.value.astype("<f4").tobytes())


def load_csr(source: PathOrFile) -> SparseKernelMatrix:
    with _open(source, "rb") as f:
        if _read_exact(f, 4) != CSR_MAGIC:
            raise FormatError("not a SCSR file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise FormatError(f"unsupported SCSR version {version}")
        spec = LayerSpec(*struct.unpack("<8I", _read_exact(f, 32)))
        (nnz,) = struct.unpack("<Q", _read_exact(f, 8))
        rowptr = _read_array(f, "<u8", spec.N + 1).astype(np.int64)
        colidx = _read_array(f, "<u4", nnz).astype(np.int32)
        origin = _read_array(f, "<u4", 3 * nnz).astype(np.int32).reshape(nnz, 3)
        value = _read_array(f, "<f4", nnz)
        if f.read(1):
            raise FormatError("trailing bytes after SCSR payload")
    try:
        return SparseKernelMatrix(spec, rowptr, colidx, value, origin)
    except ValueError as exc:
        raise FormatError(f"invalid CSR contents: {exc}") from exc
