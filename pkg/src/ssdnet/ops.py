"""Differentiable operations over (channels, height, width) float64 tensors.

Every function executes eagerly on numpy arrays. Passing a :class:`~ssdnet.tensor.Tape`
records a backward rule; passing ``tape=None`` runs forward-only (inference).
Convolution is im2col + BLAS matmul with scratch buffers from the arena; the
gradient w.r.t. the convolution input is computed as a stride-1 correlation of
the (dilated) output gradient with the flipped kernel, which is much cheaper
than a scatter-add col2im.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, arena


def _fill_cols(src: np.ndarray, k: int, stride: int, Ho: int, Wo: int, cols: np.ndarray) -> None:
    # cols shape (C, k, k, Ho, Wo); every element is written, so arena garbage is fine
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = src[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride]


def _pad_into(src: np.ndarray, pad: int) -> np.ndarray:
    C, H, W = src.shape
    buf = arena.take_zeroed((C, H + 2 * pad, W + 2 * pad))
    buf[:, pad : pad + H, pad : pad + W] = src
    return buf


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    tape: Tape | None = None,
) -> Tensor:
    """2-D cross-correlation of a (C_in,H,W) input with a (C_out,C_in,k,k) kernel.

    Output spatial size is floor((H + 2*padding - k)/stride) + 1. The backward
    rule produces gradients for the input, the kernel, and the bias. Requires
    padding <= k - 1 (true for the 'same'-style paddings used here).
    """
    C, H, W = x.shape
    Cout, Cin, k, k2 = kernel.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {k}x{k2}")
    if Cin != C:
        raise ValueError(f"kernel expects {Cin} input channels, input has {C}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0 or padding > k - 1:
        raise ValueError(f"padding must be in [0, k-1], got {padding} for k={k}")
    if k > H + 2 * padding or k > W + 2 * padding:
        raise ValueError(f"kernel {k} larger than padded input {H + 2 * padding}x{W + 2 * padding}")

    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1

    simple = k == 1 and stride == 1 and padding == 0
    if simple:
        cols = x.data.reshape(C, H * W)
    else:
        src = _pad_into(x.data, padding) if padding else x.data
        cols = arena.take((C, k, k, Ho, Wo))
        _fill_cols(src, k, stride, Ho, Wo, cols)
        if padding:
            arena.release(src)

    w_mat = kernel.data.reshape(Cout, Cin * k * k)
    out_data = w_mat @ cols.reshape(Cin * k * k, Ho * Wo)
    if bias is not None:
        out_data += bias.data[:, None]
    out = Tensor(out_data.reshape(Cout, Ho, Wo))

    if tape is None:
        if not simple:
            arena.release(cols)
        return out

    def bwd(g: np.ndarray) -> None:
        go = g.reshape(Cout, Ho * Wo)
        if kernel.requires_grad:
            gw = go @ cols.reshape(Cin * k * k, Ho * Wo).T
            kernel.ensure_grad()
            kernel.grad += gw.reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            bias.ensure_grad()
            bias.grad += go.sum(axis=1)
        if x.requires_grad:
            x.ensure_grad()
            x.grad += _conv_input_grad(g, kernel.data, H, W, stride, padding)
        if not simple:
            arena.release(cols)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    tape.record(inputs, out, bwd)
    return out


def _conv_input_grad(
    gout: np.ndarray, kernel: np.ndarray, H: int, W: int, stride: int, padding: int
) -> np.ndarray:
    """d(out)/d(x) as a stride-1 correlation of the dilated gradient."""
    Cout, Cin, k, _ = kernel.shape
    _, Ho, Wo = gout.shape
    if k == 1 and stride == 1 and padding == 0:
        return (kernel.reshape(Cout, Cin).T @ gout.reshape(Cout, Ho * Wo)).reshape(Cin, H, W)

    rem_h = (H + 2 * padding - k) % stride
    rem_w = (W + 2 * padding - k) % stride
    lead = k - 1
    Hd = (Ho - 1) * stride + 1
    Wd = (Wo - 1) * stride + 1
    Hp = Hd + lead + (k - 1 + rem_h)
    Wp = Wd + lead + (k - 1 + rem_w)
    gd = arena.take_zeroed((Cout, Hp, Wp))
    gd[:, lead : lead + Hd : stride, lead : lead + Wd : stride] = gout

    cols = arena.take((Cout, k, k, H + 2 * padding, W + 2 * padding))
    _fill_cols(gd, k, 1, H + 2 * padding, W + 2 * padding, cols)
    arena.release(gd)

    # swap in/out channel roles and flip spatially
    wt = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx_p = wt.reshape(Cin, Cout * k * k) @ cols.reshape(Cout * k * k, (H + 2 * padding) * (W + 2 * padding))
    arena.release(cols)
    gx_p = gx_p.reshape(Cin, H + 2 * padding, W + 2 * padding)
    if padding:
        return np.ascontiguousarray(gx_p[:, padding : padding + H, padding : padding + W])
    return gx_p


def upsample_nearest(x: Tensor, factor: int, tape: Tape | None = None) -> Tensor:
    """Replicate each pixel into a factor x factor block."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    C, H, W = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2))
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if x.requires_grad:
                x.ensure_grad()
                x.grad += g.reshape(C, H, factor, W, factor).sum(axis=(2, 4))

        tape.record((x,), out, bwd)
    return out


def leaky_relu(x: Tensor, slope: float = 0.1, tape: Tape | None = None) -> Tensor:
    """max(x, slope*x) elementwise; slope in [0, 1)."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must be in [0, 1), got {slope}")
    mask = x.data >= 0
    out = Tensor(np.where(mask, x.data, slope * x.data))
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if x.requires_grad:
                x.ensure_grad()
                x.grad += np.where(mask, g, slope * g)

        tape.record((x,), out, bwd)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if x.requires_grad:
                x.ensure_grad()
                x.grad += g * s * (1.0 - s)

        tape.record((x,), out, bwd)
    return out


_resize_matrices: dict[tuple[int, int], np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bilinear interpolation matrix.

    Sampling uses half-pixel centers: source coordinate (i + 0.5) * n_in/n_out - 0.5,
    clamped to [0, n_in - 1].
    """
    key = (n_in, n_out)
    m = _resize_matrices.get(key)
    if m is None:
        m = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for i in range(n_out):
            s = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
            lo = int(np.floor(s))
            hi = min(lo + 1, n_in - 1)
            w = s - lo
            m[i, lo] += 1.0 - w
            m[i, hi] += w
        _resize_matrices[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int, tape: Tape | None = None) -> Tensor:
    """Bilinear interpolation to (C, out_h, out_w); exact for constant images."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    C, H, W = x.shape
    R = _resize_matrix(H, out_h)
    Cm = _resize_matrix(W, out_w)
    t = np.tensordot(R, x.data, axes=(1, 1)).transpose(1, 0, 2)  # (C, out_h, W)
    out = Tensor(np.ascontiguousarray(np.tensordot(t, Cm, axes=(2, 1))))
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if x.requires_grad:
                gt = np.tensordot(g, Cm, axes=(2, 0))  # (C, out_h, W)
                x.ensure_grad()
                x.grad += np.tensordot(R, gt, axes=(0, 1)).transpose(1, 0, 2)

        tape.record((x,), out, bwd)
    return out


def maxpool2d(x: Tensor, size: int = 2, tape: Tape | None = None) -> Tensor:
    """Non-overlapping size x size max pooling; spatial dims must divide evenly."""
    C, H, W = x.shape
    if H % size or W % size:
        raise ValueError(f"spatial size {H}x{W} not divisible by pool size {size}")
    Ho, Wo = H // size, W // size
    windows = x.data.reshape(C, Ho, size, Wo, size).transpose(0, 1, 3, 2, 4).reshape(C, Ho, Wo, size * size)
    idx = windows.argmax(axis=3)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=3)[..., 0])
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if x.requires_grad:
                gw = np.zeros_like(windows)
                np.put_along_axis(gw, idx[..., None], g[..., None], axis=3)
                x.ensure_grad()
                x.grad += gw.reshape(C, Ho, Wo, size, size).transpose(0, 1, 3, 2, 4).reshape(C, H, W)

        tape.record((x,), out, bwd)
    return out


def instance_norm(
    x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5, tape: Tape | None = None
) -> Tensor:
    """Per-channel normalization over spatial dims, then affine gain/shift."""
    C, H, W = x.shape
    n = H * W
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = Tensor(xhat * gain.data[:, None, None] + shift.data[:, None, None])
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if gain.requires_grad:
                gain.ensure_grad()
                gain.grad += (g * xhat).sum(axis=(1, 2))
            if shift.requires_grad:
                shift.ensure_grad()
                shift.grad += g.sum(axis=(1, 2))
            if x.requires_grad:
                dxhat = g * gain.data[:, None, None]
                t1 = dxhat.sum(axis=(1, 2), keepdims=True)
                t2 = (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
                x.ensure_grad()
                x.grad += ivar * (dxhat - (t1 + xhat * t2) / n)

        tape.record((x, gain, shift), out, bwd)
    return out


def concat_channels(tensors: list[Tensor], tape: Tape | None = None) -> Tensor:
    if not tensors:
        raise ValueError("concat of empty tensor list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    if tape is not None:
        splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

        def bwd(g: np.ndarray) -> None:
            for t, gpart in zip(tensors, np.split(g, splits, axis=0)):
                if t.requires_grad:
                    t.ensure_grad()
                    t.grad += gpart

        tape.record(tuple(tensors), out, bwd)
    return out


def repeat_channels(x: Tensor, times: int, tape: Tape | None = None) -> Tensor:
    C = x.shape[0]
    out = Tensor(np.repeat(x.data, times, axis=0))
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if x.requires_grad:
                x.ensure_grad()
                x.grad += g.reshape(C, times, *x.shape[1:]).sum(axis=1)

        tape.record((x,), out, bwd)
    return out


def crop(x: Tensor, top: int, left: int, height: int, width: int, tape: Tape | None = None) -> Tensor:
    C, H, W = x.shape
    if top < 0 or left < 0 or top + height > H or left + width > W:
        raise ValueError(f"crop window {top},{left} {height}x{width} out of bounds for {H}x{W}")
    out = Tensor(x.data[:, top : top + height, left : left + width].copy())
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if x.requires_grad:
                x.ensure_grad()
                x.grad[:, top : top + height, left : left + width] += g

        tape.record((x,), out, bwd)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            for t in (a, b):
                if t.requires_grad:
                    t.ensure_grad()
                    t.grad += g

        tape.record((a, b), out, bwd)
    return out


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if a.requires_grad:
                a.ensure_grad()
                a.grad += g
            if b.requires_grad:
                b.ensure_grad()
                b.grad -= g

        tape.record((a, b), out, bwd)
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if a.requires_grad:
                a.ensure_grad()
                a.grad += g * b.data
            if b.requires_grad:
                b.ensure_grad()
                b.grad += g * a.data

        tape.record((a, b), out, bwd)
    return out


def scale(x: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data * c)
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if x.requires_grad:
                x.ensure_grad()
                x.grad += g * c

        tape.record((x,), out, bwd)
    return out


def mul_const(x: Tensor, m: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Elementwise product with a fixed (non-differentiated) array, e.g. a mask."""
    out = Tensor(x.data * m)
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if x.requires_grad:
                x.ensure_grad()
                x.grad += g * m

        tape.record((x,), out, bwd)
    return out


def channel_affine(x: Tensor, gain: np.ndarray, shift: np.ndarray, tape: Tape | None = None) -> Tensor:
    """x * gain[c] + shift[c] with fixed per-channel constants (input normalization)."""
    out = Tensor(x.data * gain[:, None, None] + shift[:, None, None])
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if x.requires_grad:
                x.ensure_grad()
                x.grad += g * gain[:, None, None]

        tape.record((x,), out, bwd)
    return out


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.array(x.data.sum()))
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            if x.requires_grad:
                x.ensure_grad()
                x.grad += g

        tape.record((x,), out, bwd)
    return out


def dot(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum of elementwise products over all entries (flattened inner product)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(np.array(np.dot(a.data.reshape(-1), b.data.reshape(-1))))
    if tape is not None:

        def bwd(g: np.ndarray) -> None:
            s = g.item()
            if a.requires_grad:
                a.ensure_grad()
                a.grad += s * b.data
            if b.requires_grad:
                b.ensure_grad()
                b.grad += s * a.data

        tape.record((a, b), out, bwd)
    return out
