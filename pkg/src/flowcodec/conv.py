"""2D convolution (cross-correlation) for the tensor engine.

Stride-1, zero-padded 'same' convolution with odd kernel extents, which
is all the residual conditioning networks here need.  Forward and both
backward passes reduce to one batched matmul over an im2col view, so the
heavy lifting stays inside BLAS.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Array, Tensor, _make, as_tensor


def _corr2d(x: Array, kernel: Array) -> Array:
    """Same-padded cross-correlation of (N,Cin,H,W) with (Cout,Cin,kh,kw)."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (N,Cin,H,W,kh,kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, cin * kh * kw)
    out = cols @ kernel.reshape(cout, cin * kh * kw).T
    return np.ascontiguousarray(out.reshape(n, h, w, cout).transpose(0, 3, 1, 2))


def conv2d(x, kernel, bias=None) -> Tensor:
    """Same-padded stride-1 convolution of (N,Cin,H,W) with (Cout,Cin,kh,kw).

    Differentiable w.r.t. input, kernel and the per-output-channel bias.
    Kernel spatial extents must be odd so that output extents match input.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(
            f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(
            f"conv2d: input has {cin} channels but kernel expects {kcin}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(
                f"conv2d: bias shape {bias.shape} does not match {cout} output channels"
            )

    data = _corr2d(x.data, kernel.data)
    if bias is not None:
        data = data + bias.data[None, :, None, None]

    def backward(g: Array):
        # d/dx: correlate g with the spatially flipped, channel-transposed kernel
        kflip = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _corr2d(g, kflip)
        # d/dkernel: correlate input windows with g
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, cin * kh * kw)
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
        gk = (gmat.T @ cols).reshape(cout, cin, kh, kw)
        grads = [(x, gx), (kernel, gk)]
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(data, parents, backward)
