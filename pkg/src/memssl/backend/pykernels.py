"""Pure-numpy implementations of the hot kernels.

These are the reference semantics; the Cython backend in ``_ckernels`` must
agree with them to float tolerance (exactly for the fused AdamW update, which
uses the same operation order). Row reductions are carried out in float64
regardless of input dtype so that float32 training does not lose precision in
the normalization statistics.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

INV_SQRT2 = 0.7071067811865476
INV_SQRT2PI = 0.3989422804014327


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    return (0.5 * x * (1.0 + erf(x * INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_bwd(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * INV_SQRT2PI
    return (gy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def softmax_fwd(x: np.ndarray, inv_temp: float) -> np.ndarray:
    z = x.astype(np.float64) * inv_temp
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    e /= e.sum(axis=1, keepdims=True)
    return e.astype(x.dtype)


def softmax_bwd(p: np.ndarray, gy: np.ndarray, inv_temp: float) -> np.ndarray:
    p64 = p.astype(np.float64)
    g64 = gy.astype(np.float64)
    dot = (p64 * g64).sum(axis=1, keepdims=True)
    return (inv_temp * p64 * (g64 - dot)).astype(p.dtype)


def log_softmax_fwd(x: np.ndarray, inv_temp: float) -> np.ndarray:
    z = x.astype(np.float64) * inv_temp
    z -= z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    return (z - lse).astype(x.dtype)


def log_softmax_bwd(logp: np.ndarray, gy: np.ndarray, inv_temp: float) -> np.ndarray:
    g64 = gy.astype(np.float64)
    p64 = np.exp(logp.astype(np.float64))
    gsum = g64.sum(axis=1, keepdims=True)
    return (inv_temp * (g64 - p64 * gsum)).astype(logp.dtype)


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * rstd
    y = (xhat * gamma.astype(np.float64) + beta.astype(np.float64)).astype(x.dtype)
    return y, mu[:, 0].astype(x.dtype), rstd[:, 0].astype(x.dtype)


def layer_norm_bwd(
    x: np.ndarray,
    gamma: np.ndarray,
    mu: np.ndarray,
    rstd: np.ndarray,
    gy: np.ndarray,
):
    x64 = x.astype(np.float64)
    g64 = gy.astype(np.float64)
    mu64 = mu.astype(np.float64)[:, None]
    rstd64 = rstd.astype(np.float64)[:, None]
    xhat = (x64 - mu64) * rstd64
    dxhat = g64 * gamma.astype(np.float64)
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    gx = (rstd64 * (dxhat - m1 - xhat * m2)).astype(x.dtype)
    ggamma = (g64 * xhat).sum(axis=0).astype(gamma.dtype)
    gbeta = g64.sum(axis=0).astype(gamma.dtype)
    return gx, ggamma, gbeta


def adamw_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    wd: float,
) -> None:
    """One fused, in-place AdamW update; t is the already-incremented step."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * wd * p + lr * mhat / (np.sqrt(vhat) + eps)


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-convention bilinear resize of an H x W x C image."""
    h, w, c = src.shape
    sy = h / out_h
    sx = w / out_w
    fy = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0.0, h - 1.0)
    fx = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0.0, w - 1.0)
    y0 = np.floor(fy).astype(np.intp)
    x0 = np.floor(fx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (fy - y0)[:, None, None]
    wx = (fx - x0)[None, :, None]
    top = src[y0][:, x0] * (1.0 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1.0 - wx) + src[y1][:, x1] * wx
    return (top * (1.0 - wy) + bot * wy).astype(src.dtype)
