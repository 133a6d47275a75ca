"""Compiled inner loops.  Callers validate shapes; nothing here bounds-checks.

Indexing goes through slices (``src = inp[a:a + n]``) instead of ``inp[a + k]``
so numba can prove the index non-negative, skip wraparound handling and emit
SIMD code.
"""
import numba
from numba import njit, prange

# the bundled TBB is too old; picking a layer up front skips the noisy probe
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"


@njit(parallel=True, fastmath=True, cache=True)
def sconv_stride1_rows(band_ptr, colidx, value, inp, H_out, W_out, W_pad,
                       oc_tile, rows_per_block, out_wide):
    # out_wide is N x (H_out * W_pad): columns x >= W_out are scratch, so a block
    # of whole output rows maps to one contiguous run of the padded input.
    N = band_ptr.shape[0]
    n_bands = band_ptr.shape[1] - 1
    n_tiles = (N + oc_tile - 1) // oc_tile
    for t in prange(n_tiles):
        n0 = t * oc_tile
        n1 = min(N, n0 + oc_tile)
        for b in range(n_bands):
            for n in range(n0, n1):
                j0 = band_ptr[n, b]
                j1 = band_ptr[n, b + 1]
                if j0 == j1:
                    continue
                for y0 in range(0, H_out, rows_per_block):
                    y1 = min(H_out, y0 + rows_per_block)
                    k0 = y0 * W_pad
                    klen = (y1 - 1 - y0) * W_pad + W_out
                    acc = out_wide[n, k0:k0 + klen]
                    for j in range(j0, j1):
                        base = colidx[j] + k0
                        src = inp[base:base + klen]
                        coeff = value[j]
                        for k in range(klen):
                            acc[k] += coeff * src[k]


@njit(parallel=True, fastmath=True, cache=True)
def sconv_blocked(band_ptr, colidx, value, inp, H_out, W_out, W_pad, stride,
                  oc_tile, block_h, block_w, out):
    # out is N x (H_out * W_out); handles any stride and partial-row blocks.
    N = band_ptr.shape[0]
    n_bands = band_ptr.shape[1] - 1
    n_tiles = (N + oc_tile - 1) // oc_tile
    row_step = stride * W_pad
    for t in prange(n_tiles):
        n0 = t * oc_tile
        n1 = min(N, n0 + oc_tile)
        for b in range(n_bands):
            for n in range(n0, n1):
                j0 = band_ptr[n, b]
                j1 = band_ptr[n, b + 1]
                if j0 == j1:
                    continue
                for y0 in range(0, H_out, block_h):
                    y1 = min(H_out, y0 + block_h)
                    for x0 in range(0, W_out, block_w):
                        x1 = min(W_out, x0 + block_w)
                        w = x1 - x0
                        span = (w - 1) * stride + 1
                        for j in range(j0, j1):
                            coeff = value[j]
                            base = colidx[j] + x0 * stride
                            for y in range(y0, y1):
                                src = inp[base + y * row_step:base + y * row_step + span]
                                dst = out[n, y * W_out + x0:y * W_out + x1]
                                if stride == 1:
                                    for x in range(w):
                                        dst[x] += coeff * src[x]
                                else:
                                    for x in range(w):
                                        dst[x] += coeff * src[x * stride]


@njit(parallel=True, fastmath=True, cache=True)
def spmdm(rowptr, cols, value, dense, row_tile, col_block, out):
    # out[m, :] += sum_j value[j] * dense[cols[j], :] over row m's non-zeros
    M = rowptr.shape[0] - 1
    n_cols = dense.shape[1]
    n_tiles = (M + row_tile - 1) // row_tile
    for t in prange(n_tiles):
        m0 = t * row_tile
        m1 = min(M, m0 + row_tile)
        for c0 in range(0, n_cols, col_block):
            c1 = min(n_cols, c0 + col_block)
            for m in range(m0, m1):
                acc = out[m, c0:c1]
                for j in range(rowptr[m], rowptr[m + 1]):
                    src = dense[cols[j], c0:c1]
                    v = value[j]
                    for k in range(c1 - c0):
                        acc[k] += v * src[k]


@njit(parallel=True, cache=True)
def triad(a, b, c, scalar):
    for i in prange(a.shape[0]):
        a[i] = b[i] + scalar * c[i]


def set_threads(n):
    """Clamp and apply the kernel thread count; returns the count in effect."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def get_threads():
    return numba.get_num_threads()


__all__ = ["sconv_stride1_rows", "sconv_blocked", "spmdm", "triad", "set_threads", "get_threads"]
