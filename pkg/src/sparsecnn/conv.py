"""Convolution kernels: dense reference, direct sparse, lowered sparse, sparse FC."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .tensor import LayerSpec, SparseKernelMatrix, Tensor3, Tensor4, pad_input

__all__ = [
    "TilingConfig",
    "conv_dense_direct",
    "conv_dense_lowered",
    "conv_sparse_direct",
    "conv_sparse_lowered",
    "im2col",
    "fc_spmdm",
    "set_threads",
    "get_threads",
]

set_threads = _kernels.set_threads
get_threads = _kernels.get_threads


@dataclass(frozen=True)
class TilingConfig:
    """Blocking parameters for the sparse kernels.

    ``block_h`` x ``block_w`` is the spatial register block, ``oc_tile`` the
    number of output channels processed together (and the unit of parallel
    work), ``col_block`` the number of input channels per column band.  Sizes
    need not divide the layer dimensions.  ``None`` block sizes select whole
    output rows, grouped so one block covers about ``block_elems`` outputs.
    """

    oc_tile: int = 16
    block_h: Optional[int] = None
    block_w: Optional[int] = None
    col_block: int = 128
    block_elems: int = 256

    def __post_init__(self):
        for name in ("oc_tile", "block_h", "block_w", "col_block", "block_elems"):
            v = getattr(self, name)
            if v is not None and (int(v) != v or v < 1):
                raise ValueError(f"TilingConfig.{name} must be >= 1, got {v!r}")

    def spatial_block(self, spec: LayerSpec) -> Tuple[int, int]:
        bw = self.block_w if self.block_w is not None else spec.W_out
        if self.block_h is not None:
            bh = self.block_h
        else:
            bh = max(1, self.block_elems // (spec.W_pad if bw >= spec.W_out else bw))
        return min(bh, spec.H_out), min(bw, spec.W_out)


DEFAULT_TILING = TilingConfig()


def _check_input(inp: Tensor3, spec: LayerSpec) -> None:
    if inp.shape != spec.input_shape:
        raise ValueError(f"input shape {inp.shape} does not match spec {spec.input_shape}")


def _add_bias(out: np.ndarray, bias, n: int) -> np.ndarray:
    if bias is None:
        return out
    b = np.asarray(bias, dtype=np.float32)
    if b.shape != (n,):
        raise ValueError(f"bias must have shape ({n},), got {b.shape}")
    out += b.reshape((n,) + (1,) * (out.ndim - 1))
    return out


def _tap_view(xp: np.ndarray, spec: LayerSpec, r: int, s: int) -> np.ndarray:
    st = spec.stride
    return xp[:, r:r + st * (spec.H_out - 1) + 1:st, s:s + st * (spec.W_out - 1) + 1:st]


def conv_dense_direct(inp: Tensor3, weights: Tensor4, spec: LayerSpec, bias=None) -> Tensor3:
    """Reference convolution: one ``N x C`` GEMM per kernel tap ``(r, s)``.

    ``O(n, y, x) = sum_{c,r,s} W(n, c, r, s) * I_pad(c, y*stride + r, x*stride + s)``
    """
    _check_input(inp, spec)
    if weights.shape != spec.weight_shape:
        raise ValueError(f"weights shape {weights.shape} does not match spec {spec.weight_shape}")
    xp = pad_input(inp, spec).data
    w = weights.data
    out = np.zeros(spec.output_shape, np.float32)
    for r in range(spec.R):
        for s in range(spec.S):
            out += np.tensordot(w[:, :, r, s], _tap_view(xp, spec, r, s), axes=1)
    return Tensor3(_add_bias(out, bias, spec.N))


def im2col(inp: Tensor3, spec: LayerSpec) -> np.ndarray:
    """Lower the input to a ``(C*R*S) x (H_out*W_out)`` matrix.

    Row ``(c*R + r)*S + s`` matches the CSR column order of :func:`sparsify`;
    column ``y*W_out + x`` is the receptive field of output ``(y, x)``.
    """
    _check_input(inp, spec)
    xp = pad_input(inp, spec).data
    st = spec.stride
    win = sliding_window_view(xp, (spec.R, spec.S), axis=(1, 2))[:, ::st, ::st]
    # (C, H_out, W_out, R, S) -> (C, R, S, H_out, W_out)
    cols = win.transpose(0, 3, 4, 1, 2)
    return np.ascontiguousarray(cols).reshape(spec.C * spec.R * spec.S, spec.H_out * spec.W_out)


def conv_dense_lowered(inp: Tensor3, weights: Tensor4, spec: LayerSpec, bias=None) -> Tensor3:
    """im2col followed by a single dense GEMM."""
    if weights.shape != spec.weight_shape:
        raise ValueError(f"weights shape {weights.shape} does not match spec {spec.weight_shape}")
    out = weights.data.reshape(spec.N, -1) @ im2col(inp, spec)
    out = out.reshape(spec.output_shape)
    return Tensor3(_add_bias(out, bias, spec.N))


def _check_kernel(kernel: SparseKernelMatrix, spec: LayerSpec) -> None:
    if kernel.spec != spec:
        raise ValueError(f"kernel was built for {kernel.spec}, not {spec}")


def conv_sparse_direct(inp: Tensor3, kernel: SparseKernelMatrix, spec: LayerSpec, bias=None,
                       tiling: TilingConfig = DEFAULT_TILING) -> Tensor3:
    """Direct sparse convolution over the virtual dense matrix.

    Each non-zero ``(coeff, off)`` of output channel ``n`` is applied to the
    input window starting at ``off``; nothing is lowered.
    """
    _check_input(inp, spec)
    _check_kernel(kernel, spec)
    flat = pad_input(inp, spec).data.reshape(-1)
    bands = kernel.band_pointers(tiling.col_block)
    bh, bw = tiling.spatial_block(spec)
    Ho, Wo, Wp = spec.H_out, spec.W_out, spec.W_pad
    if spec.stride == 1 and bw >= Wo:
        wide = np.zeros((spec.N, Ho * Wp), np.float32)
        _kernels.sconv_stride1_rows(bands, kernel.colidx, kernel.value, flat,
                                    Ho, Wo, Wp, tiling.oc_tile, bh, wide)
        out = np.ascontiguousarray(wide.reshape(spec.N, Ho, Wp)[:, :, :Wo])
    else:
        out = np.zeros((spec.N, Ho * Wo), np.float32)
        _kernels.sconv_blocked(bands, kernel.colidx, kernel.value, flat, Ho, Wo, Wp,
                               spec.stride, tiling.oc_tile, bh, bw, out)
        out = out.reshape(spec.output_shape)
    return Tensor3(_add_bias(out, bias, spec.N))


def _spmdm(kernel: SparseKernelMatrix, dense: np.ndarray, tiling: TilingConfig) -> np.ndarray:
    out = np.zeros((kernel.N, dense.shape[1]), np.float32)
    cols = kernel._cache.get("lowered")
    if cols is None:
        cols = kernel._cache.setdefault("lowered", kernel.lowered_columns())
    _kernels.spmdm(kernel.rowptr, cols, kernel.value, dense, tiling.oc_tile,
                   tiling.block_elems, out)
    return out


def conv_sparse_lowered(inp: Tensor3, kernel: SparseKernelMatrix, spec: LayerSpec, bias=None,
                        tiling: TilingConfig = DEFAULT_TILING) -> Tensor3:
    """CSR weights times the explicit im2col matrix."""
    _check_kernel(kernel, spec)
    out = _spmdm(kernel, im2col(inp, spec), tiling).reshape(spec.output_shape)
    return Tensor3(_add_bias(out, bias, spec.N))


def fc_spmdm(weights: SparseKernelMatrix, activations, bias=None,
             tiling: TilingConfig = DEFAULT_TILING) -> np.ndarray:
    """Sparse ``M x K`` weights times dense ``K x B`` activations."""
    spec = weights.spec
    act = np.ascontiguousarray(activations, dtype=np.float32)
    k = spec.C * spec.R * spec.S
    if act.ndim != 2 or act.shape[0] != k:
        raise ValueError(f"activations must be {k} x B, got {act.shape}")
    if not np.all(np.isfinite(act)):
        raise ValueError("activations contain NaN or Inf")
    return _add_bias(_spmdm(weights, act, tiling), bias, spec.N)
