"""Differentiable layers over NHWC tensors."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, UsageError
from .tensor import Tensor, as_tensor, note_kink

GN_EPS = 1e-5


def _same_pads(extent: int, k: int, stride: int):
    out = math.ceil(extent / stride)
    total = max((out - 1) * stride + k - extent, 0)
    # extra pixel goes to the bottom/right
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation of ``x`` [B,H,W,Cin] with ``kernel`` [kh,kw,Cin,Cout]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects a 4-d input and a 4-d kernel")
    if stride < 1:
        raise UsageError("stride must be >= 1")
    B, H, W, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if cin != kcin:
        raise DimensionError(f"input has {cin} channels, kernel expects {kcin}")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pads(H, kh, stride), _same_pads(W, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise UsageError(f"unknown padding {padding!r}")
    Hp, Wp = H + pt + pb, W + pl + pr
    if kh > Hp or kw > Wp:
        raise DimensionError("kernel larger than padded input")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1

    xd, wd = x.data, kernel.data
    wmat = wd.reshape(kh * kw * cin, cout)

    pointwise = kh == 1 and kw == 1 and stride == 1 and pt == pb == pl == pr == 0
    if pointwise:
        cols = xd.reshape(B * H * W, cin)
    else:
        xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xd
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        # (B,Ho,Wo,Cin,kh,kw) -> (B,Ho,Wo,kh,kw,Cin) to match the kernel layout
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * cin)
    out = cols @ wmat
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, cout)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gk = (cols.T @ g2).reshape(kh, kw, cin, cout) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat.T
            if pointwise:
                gx = gcols.reshape(B, H, W, cin)
            else:
                gcols = gcols.reshape(B, Ho, Wo, kh, kw, cin)
                gxp = np.zeros((B, Hp, Wp, cin), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + stride * (Ho - 1) + 1:stride,
                            j:j + stride * (Wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
                gx = gxp[:, pt:pt + H, pl:pl + W, :]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return Tensor.make(out, parents, back, "conv2d")


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties send the gradient to the first maximum."""
    x = as_tensor(x)
    if window != 2 or stride != 2:
        raise UsageError("only 2x2 windows with stride 2 are supported")
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"max_pool2d needs even extents, got {H}x{W}")
    blocks = x.data.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(B, H // 2, W // 2, C, 4)
    arg = np.argmax(blocks, axis=-1)
    note_kink(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((B, H // 2, W // 2, C, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(B, H, W, C),)

    return Tensor.make(out, (x,), back, "max_pool2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = GN_EPS) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    B, H, W, C = x.shape
    if groups < 1 or C % groups:
        raise DimensionError(f"{groups} groups do not divide {C} channels")
    cg = C // groups
    n = H * W * cg
    # per-sample contiguous rows so results do not depend on batch size
    xg = np.ascontiguousarray(x.data.reshape(B, H * W, groups, cg).transpose(0, 2, 1, 3)).reshape(B, groups, n)
    mean = xg.mean(axis=-1, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat_g = centered * inv_std
    xhat = xhat_g.reshape(B, groups, H * W, cg).transpose(0, 2, 1, 3).reshape(B, H, W, C)
    out = xhat * gamma.data + beta.data

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 1, 2))
        gbeta = g.sum(axis=(0, 1, 2))
        dxhat = g * gamma.data
        d = np.ascontiguousarray(dxhat.reshape(B, H * W, groups, cg).transpose(0, 2, 1, 3)).reshape(B, groups, n)
        dx = inv_std * (d - d.mean(axis=-1, keepdims=True)
                        - xhat_g * (d * xhat_g).mean(axis=-1, keepdims=True))
        dx = dx.reshape(B, groups, H * W, cg).transpose(0, 2, 1, 3).reshape(B, H, W, C)
        return dx, ggamma, gbeta

    return Tensor.make(out, (x, gamma, beta), back, "group_norm")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    note_kink(mask)
    return Tensor.make(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,),
                       lambda g: (g * mask,), "relu")


def linear(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """``x @ weight + bias`` with weight laid out [in, out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} vs weight rows {weight.shape[0]}")
    out = x @ weight
    return out if bias is None else out + bias


def flatten(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return x.reshape(x.shape[0], -1)


def l1_norm(x: Tensor, axis=None) -> Tensor:
    """Sum of absolute values; the subgradient at 0 is 0."""
    return as_tensor(x).abs().sum(axis=axis)


def area_resize(x: Tensor, target) -> Tensor:
    """Downscale [B,H,W,C] to ``target`` (H',W') by averaging equal blocks."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    th, tw = target
    if th > H or tw > W:
        raise DimensionError(f"resize target {th}x{tw} exceeds input {H}x{W}")
    if H % th or W % tw:
        raise DimensionError(f"area resize needs integer factors, got {H}x{W} -> {th}x{tw}")
    fh, fw = H // th, W // tw
    if fh == 1 and fw == 1:
        return x
    out = x.data.reshape(B, th, fh, tw, fw, C).mean(axis=(2, 4))
    scale = 1.0 / (fh * fw)

    def back(g):
        gb = np.broadcast_to((g * scale)[:, :, None, :, None, :], (B, th, fh, tw, fw, C))
        return (gb.reshape(B, H, W, C),)

    return Tensor.make(out, (x,), back, "area_resize")


def gather(x: Tensor, index) -> Tensor:
    """Select rows along the first axis."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor.make(x.data[index], (x,), back, "gather")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean 2-class cross entropy; ``labels`` must be 0 (live) or 1 (spoof)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
        labels = labels.reshape(1)
    if logits.shape[-1] != 2:
        raise DimensionError(f"expected 2-class logits, got width {logits.shape[-1]}")
    if labels.shape != (logits.shape[0],):
        raise DimensionError("one label per row of logits is required")
    if not np.all((labels == 0) | (labels == 1)):
        raise DomainError("labels must be 0 or 1")
    labels = labels.astype(np.intp)
    n = logits.shape[0]
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(n), labels].mean()

    def back(g):
        probs = np.exp(lsm)
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return Tensor.make(np.asarray(loss, dtype=logits.dtype), (logits,), back, "softmax_ce")
