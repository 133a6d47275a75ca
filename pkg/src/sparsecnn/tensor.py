"""Dense tensors, layer geometry and the CSR sparse-kernel representation.

Weights are ``N x C x R x S`` and activations ``C x H x W``, both float32 in
row-major (NCRS / CHW) order.  A pruned weight tensor is stored as its
mode-1 matricization in CSR form, where each column index is the offset of the
``(c, r, s)`` tap inside the zero-padded input.  Because the layout function is
additive, ``f(c, y + r, x + s) = f(c, y, x) + f(0, r, s)``, the input element
that multiplies a non-zero at output position ``(y, x)`` is just
``colidx[j] + f(0, y * stride, x * stride)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

__all__ = [
    "LayerSpec",
    "Tensor3",
    "Tensor4",
    "SparseKernelMatrix",
    "layout_offset",
    "sparsify",
    "densify",
    "pad_input",
]


def _as_f32(data, ndim: int, what: str) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim != ndim:
        raise ValueError(f"{what} must be {ndim}-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains NaN or Inf")
    if arr is data:
        arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of one convolution (or fully connected) layer."""

    N: int
    C: int
    R: int
    S: int
    H_in: int
    W_in: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        for name in ("N", "C", "R", "S", "H_in", "W_in", "stride"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"LayerSpec.{name} must be an integer >= 1, got {v!r}")
        if int(self.pad) != self.pad or self.pad < 0:
            raise ValueError(f"LayerSpec.pad must be an integer >= 0, got {self.pad!r}")
        for extent, k, name in ((self.H_pad, self.R, "H"), (self.W_pad, self.S, "W")):
            if extent < k or (extent - k) % self.stride:
                raise ValueError(
                    f"{name}_in + 2*pad - kernel must be a non-negative multiple of stride "
                    f"({extent} - {k}, stride {self.stride})"
                )

    @classmethod
    def fully_connected(cls, out_features: int, in_features: int) -> "LayerSpec":
        return cls(N=out_features, C=in_features, R=1, S=1, H_in=1, W_in=1)

    @property
    def H_pad(self) -> int:
        return self.H_in + 2 * self.pad

    @property
    def W_pad(self) -> int:
        return self.W_in + 2 * self.pad

    @property
    def H_out(self) -> int:
        return (self.H_pad - self.R) // self.stride + 1

    @property
    def W_out(self) -> int:
        return (self.W_pad - self.S) // self.stride + 1

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.N, self.C, self.R, self.S)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.C, self.H_in, self.W_in)

    @property
    def output_shape(self) -> Tuple[int, int, int]:
        return (self.N, self.H_out, self.W_out)

    @property
    def is_fully_connected(self) -> bool:
        return self.R == self.S == self.H_in == self.W_in == 1 and self.pad == 0

    def fields(self) -> Tuple[int, ...]:
        return (self.N, self.C, self.R, self.S, self.H_in, self.W_in, self.stride, self.pad)


@dataclass(frozen=True)
class Tensor3:
    """A ``C x H x W`` float32 activation tensor."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_f32(self.data, 3, "Tensor3"))

    @property
    def C(self) -> int:
        return self.data.shape[0]

    @property
    def H(self) -> int:
        return self.data.shape[1]

    @property
    def W(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class Tensor4:
    """An ``N x C x R x S`` float32 weight tensor."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_f32(self.data, 4, "Tensor4"))

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def C(self) -> int:
        return self.data.shape[1]

    @property
    def R(self) -> int:
        return self.data.shape[2]

    @property
    def S(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class SparseKernelMatrix:
    """CSR form of a pruned weight tensor with padded-input column offsets.

    ``origin[j]`` keeps the ``(c, r, s)`` coordinate of non-zero ``j``; it is
    only used for densification, lowering and serialization, never by the
    direct kernel.
    """

    spec: LayerSpec
    rowptr: np.ndarray
    colidx: np.ndarray
    value: np.ndarray
    origin: np.ndarray
    _cache: Dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for name, dtype in (("rowptr", np.int64), ("colidx", np.int32),
                            ("value", np.float32), ("origin", np.int32)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            if arr is getattr(self, name):
                arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.origin.size == 0:
            object.__setattr__(self, "origin", np.zeros((0, 3), np.int32))
        self.check()

    @property
    def N(self) -> int:
        return self.spec.N

    @property
    def nnz(self) -> int:
        return int(self.rowptr[-1])

    @property
    def density(self) -> float:
        s = self.spec
        return self.nnz / (s.N * s.C * s.R * s.S)

    def check(self) -> None:
        """Raise ``ValueError`` if any CSR invariant is violated."""
        s = self.spec
        rp, ci, v, o = self.rowptr, self.colidx, self.value, self.origin
        if rp.shape != (s.N + 1,) or rp[0] != 0:
            raise ValueError("rowptr must have N+1 entries starting at 0")
        if np.any(np.diff(rp) < 0):
            raise ValueError("rowptr must be nondecreasing")
        nnz = int(rp[-1])
        if ci.shape != (nnz,) or v.shape != (nnz,) or o.shape != (nnz, 3):
            raise ValueError("colidx, value and origin must all hold rowptr[N] entries")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite value in sparse matrix")
        if nnz == 0:
            return
        c, r, ss = o[:, 0], o[:, 1], o[:, 2]
        if (c.min() < 0 or c.max() >= s.C or r.min() < 0 or r.max() >= s.R
                or ss.min() < 0 or ss.max() >= s.S):
            raise ValueError("origin triple out of range for the layer geometry")
        expected = (c.astype(np.int64) * s.H_pad + r) * s.W_pad + ss
        if not np.array_equal(expected, ci):
            raise ValueError("colidx does not match layout_offset(origin)")
        step = np.diff(ci.astype(np.int64))
        row_start = np.zeros(nnz, bool)
        row_start[rp[:-1][rp[:-1] < nnz]] = True
        if np.any(step[~row_start[1:]] <= 0):
            raise ValueError("colidx must be strictly increasing within each row")

    def lowered_columns(self) -> np.ndarray:
        """Column indices into the ``C*R*S`` rows of the im2col matrix."""
        s = self.spec
        o = self.origin.astype(np.int64)
        return (o[:, 0] * s.R + o[:, 1]) * s.S + o[:, 2]

    def band_pointers(self, channels_per_band: int) -> np.ndarray:
        """``(N, n_bands + 1)`` offsets splitting each row into input-channel bands."""
        key = ("bands", channels_per_band)
        if key not in self._cache:
            s = self.spec
            n_bands = -(-s.C // channels_per_band)
            edges = np.arange(n_bands + 1, dtype=np.int64) * channels_per_band
            ptr = np.empty((s.N, n_bands + 1), np.int64)
            c = self.origin[:, 0]
            for n in range(s.N):
                lo, hi = self.rowptr[n], self.rowptr[n + 1]
                ptr[n] = lo + np.searchsorted(c[lo:hi], edges, side="left")
            ptr[:, -1] = self.rowptr[1:]
            ptr.setflags(write=False)
            self._cache[key] = ptr
        return self._cache[key]


def layout_offset(spec: LayerSpec, c: int, y: int, x: int) -> int:
    """Flat CHW offset of ``(c, y, x)`` in the zero-padded input."""
    if not (0 <= c < spec.C and 0 <= y < spec.H_pad and 0 <= x < spec.W_pad):
        raise IndexError(
            f"({c}, {y}, {x}) outside padded input {spec.C}x{spec.H_pad}x{spec.W_pad}"
        )
    return (c * spec.H_pad + y) * spec.W_pad + x


def sparsify(weights: Tensor4, spec: LayerSpec, threshold: float = 0.0) -> SparseKernelMatrix:
    """Keep the entries with ``|w| > threshold`` as a :class:`SparseKernelMatrix`."""
    if threshold < 0 or not np.isfinite(threshold):
        raise ValueError("threshold must be finite and >= 0")
    w = weights.data if isinstance(weights, Tensor4) else Tensor4(weights).data
    if w.shape != spec.weight_shape:
        raise ValueError(f"weights shape {w.shape} does not match spec {spec.weight_shape}")
    keep = np.abs(w) > threshold
    # nonzero() walks in (n, c, r, s) order, which is ascending layout offset per row
    n, c, r, s = np.nonzero(keep)
    rowptr = np.zeros(spec.N + 1, np.int64)
    np.cumsum(np.bincount(n, minlength=spec.N), out=rowptr[1:])
    colidx = (c * spec.H_pad + r) * spec.W_pad + s
    origin = np.stack([c, r, s], axis=1) if n.size else np.zeros((0, 3))
    return SparseKernelMatrix(spec, rowptr, colidx, w[keep], origin)


def densify(m: SparseKernelMatrix) -> Tensor4:
    out = np.zeros(m.spec.weight_shape, np.float32)
    rows = np.repeat(np.arange(m.N), np.diff(m.rowptr))
    o = m.origin
    out[rows, o[:, 0], o[:, 1], o[:, 2]] = m.value
    return Tensor4(out)


def pad_input(inp: Tensor3, spec: LayerSpec) -> Tensor3:
    """Materialize the zero border so the kernels never bounds-check."""
    if inp.shape != spec.input_shape:
        raise ValueError(f"input shape {inp.shape} does not match spec {spec.input_shape}")
    if spec.pad == 0:
        return Tensor3(inp.data.copy())
    p = spec.pad
    return Tensor3(np.pad(inp.data, ((0, 0), (p, p), (p, p))))
