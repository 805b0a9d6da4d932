"""Doubly-block Toeplitz expansion of convolution kernels."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .graph import StructuralError


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def toeplitz_expand(kernel, input_hw, stride=1, padding=0, layer=None) -> sp.csr_matrix:
    """Sparse matrix K such that ``K @ x.ravel()`` equals ``conv2d(x, kernel)``.

    ``kernel`` has shape ``[out_ch, in_ch, kh, kw]``; ``x`` has shape
    ``[in_ch, H, W]``.  Rows are ordered (output channel, output row, output
    column) and columns (input channel, input row, input column).  Taps that
    fall into the zero padding are dropped.
    """
    kernel = np.asarray(kernel.detach().cpu() if hasattr(kernel, "detach") else kernel,
                        dtype=np.float64)
    where = f"layer {layer}" if layer is not None else "kernel"
    if kernel.ndim != 4:
        raise StructuralError(f"{where}: expected a 4-D kernel, got shape {kernel.shape}")
    if stride < 1 or padding < 0:
        raise StructuralError(f"{where}: stride must be >= 1 and padding >= 0")
    out_ch, in_ch, kh, kw = kernel.shape
    h, w = input_hw
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise StructuralError(f"{where}: kernel {kh}x{kw} does not fit input {h}x{w}")

    # all (o, p, q, c, u, v) taps, vectorised
    o, p, q, c, u, v = np.meshgrid(
        np.arange(out_ch), np.arange(oh), np.arange(ow),
        np.arange(in_ch), np.arange(kh), np.arange(kw), indexing="ij",
    )
    r = p * stride - padding + u
    s = q * stride - padding + v
    keep = (r >= 0) & (r < h) & (s >= 0) & (s < w)
    rows = ((o * oh + p) * ow + q)[keep]
    cols = ((c * h + r) * w + s)[keep]
    vals = kernel[o, c, u, v][keep]
    return sp.csr_matrix((vals, (rows, cols)), shape=(out_ch * oh * ow, in_ch * h * w))
