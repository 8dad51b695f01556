# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: elementwise/rowwise forward-backward pairs, the fused
AdamW update, and bilinear image resize. Semantics mirror pykernels.py;
internal accumulation is double precision for both float32 and float64 inputs.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, log, sqrt

cnp.import_array()

ctypedef fused floating:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


def gelu_fwd(object x):
    xr = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(xr)
    _gelu_fwd(xr, out)
    return out.reshape(x.shape)


def _gelu_fwd(floating[::1] x, floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    for i in range(n):
        v = <double> x[i]
        out[i] = <floating> (0.5 * v * (1.0 + erf(v * INV_SQRT2)))


def gelu_bwd(object x, object gy):
    xr = np.ascontiguousarray(x).reshape(-1)
    gr = np.ascontiguousarray(gy).reshape(-1)
    out = np.empty_like(xr)
    _gelu_bwd(xr, gr, out)
    return out.reshape(x.shape)


def _gelu_bwd(floating[::1] x, floating[::1] gy, floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, cdf, pdf
    for i in range(n):
        v = <double> x[i]
        cdf = 0.5 * (1.0 + erf(v * INV_SQRT2))
        pdf = exp(-0.5 * v * v) * INV_SQRT2PI
        out[i] = <floating> (<double> gy[i] * (cdf + v * pdf))


def softmax_fwd(object x, double inv_temp):
    xc = np.ascontiguousarray(x)
    out = np.empty_like(xc)
    _softmax_fwd(xc, inv_temp, out)
    return out


def _softmax_fwd(floating[:, ::1] x, double inv_temp, floating[:, ::1] out):
    cdef Py_ssize_t i, j, r = x.shape[0], c = x.shape[1]
    cdef double zmax, s, z
    for i in range(r):
        zmax = <double> x[i, 0] * inv_temp
        for j in range(1, c):
            z = <double> x[i, j] * inv_temp
            if z > zmax:
                zmax = z
        s = 0.0
        for j in range(c):
            z = exp(<double> x[i, j] * inv_temp - zmax)
            out[i, j] = <floating> z
            s += z
        for j in range(c):
            out[i, j] = <floating> (<double> out[i, j] / s)


def softmax_bwd(object p, object gy, double inv_temp):
    pc = np.ascontiguousarray(p)
    gc = np.ascontiguousarray(gy)
    out = np.empty_like(pc)
    _softmax_bwd(pc, gc, inv_temp, out)
    return out


def _softmax_bwd(floating[:, ::1] p, floating[:, ::1] gy, double inv_temp,
                 floating[:, ::1] out):
    cdef Py_ssize_t i, j, r = p.shape[0], c = p.shape[1]
    cdef double dot
    for i in range(r):
        dot = 0.0
        for j in range(c):
            dot += <double> p[i, j] * <double> gy[i, j]
        for j in range(c):
            out[i, j] = <floating> (inv_temp * <double> p[i, j]
                                    * (<double> gy[i, j] - dot))


def log_softmax_fwd(object x, double inv_temp):
    xc = np.ascontiguousarray(x)
    out = np.empty_like(xc)
    _log_softmax_fwd(xc, inv_temp, out)
    return out


def _log_softmax_fwd(floating[:, ::1] x, double inv_temp, floating[:, ::1] out):
    cdef Py_ssize_t i, j, r = x.shape[0], c = x.shape[1]
    cdef double zmax, s, z
    for i in range(r):
        zmax = <double> x[i, 0] * inv_temp
        for j in range(1, c):
            z = <double> x[i, j] * inv_temp
            if z > zmax:
                zmax = z
        s = 0.0
        for j in range(c):
            s += exp(<double> x[i, j] * inv_temp - zmax)
        s = log(s)
        for j in range(c):
            out[i, j] = <floating> (<double> x[i, j] * inv_temp - zmax - s)


def log_softmax_bwd(object logp, object gy, double inv_temp):
    lc = np.ascontiguousarray(logp)
    gc = np.ascontiguousarray(gy)
    out = np.empty_like(lc)
    _log_softmax_bwd(lc, gc, inv_temp, out)
    return out


def _log_softmax_bwd(floating[:, ::1] logp, floating[:, ::1] gy,
                     double inv_temp, floating[:, ::1] out):
    cdef Py_ssize_t i, j, r = logp.shape[0], c = logp.shape[1]
    cdef double gsum
    for i in range(r):
        gsum = 0.0
        for j in range(c):
            gsum += <double> gy[i, j]
        for j in range(c):
            out[i, j] = <floating> (inv_temp * (<double> gy[i, j]
                                    - exp(<double> logp[i, j]) * gsum))


def layer_norm_fwd(object x, object gamma, object beta, double eps):
    xc = np.ascontiguousarray(x)
    y = np.empty_like(xc)
    mu = np.empty(xc.shape[0], dtype=xc.dtype)
    rstd = np.empty(xc.shape[0], dtype=xc.dtype)
    _layer_norm_fwd(xc, np.ascontiguousarray(gamma), np.ascontiguousarray(beta),
                    eps, y, mu, rstd)
    return y, mu, rstd


def _layer_norm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta,
                    double eps, floating[:, ::1] y, floating[::1] mu,
                    floating[::1] rstd):
    cdef Py_ssize_t i, j, r = x.shape[0], c = x.shape[1]
    cdef double m, var, rs, d
    for i in range(r):
        m = 0.0
        for j in range(c):
            m += <double> x[i, j]
        m /= c
        var = 0.0
        for j in range(c):
            d = <double> x[i, j] - m
            var += d * d
        var /= c
        rs = 1.0 / sqrt(var + eps)
        mu[i] = <floating> m
        rstd[i] = <floating> rs
        for j in range(c):
            y[i, j] = <floating> ((<double> x[i, j] - m) * rs
                                  * <double> gamma[j] + <double> beta[j])


def layer_norm_bwd(object x, object gamma, object mu, object rstd, object gy):
    xc = np.ascontiguousarray(x)
    gx = np.empty_like(xc)
    ggamma = np.zeros(xc.shape[1], dtype=xc.dtype)
    gbeta = np.zeros(xc.shape[1], dtype=xc.dtype)
    _layer_norm_bwd(xc, np.ascontiguousarray(gamma), np.ascontiguousarray(mu),
                    np.ascontiguousarray(rstd), np.ascontiguousarray(gy),
                    gx, ggamma, gbeta)
    return gx, ggamma, gbeta


def _layer_norm_bwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] mu,
                    floating[::1] rstd, floating[:, ::1] gy,
                    floating[:, ::1] gx, floating[::1] ggamma,
                    floating[::1] gbeta):
    cdef Py_ssize_t i, j, r = x.shape[0], c = x.shape[1]
    cdef double m1, m2, xhat, dxhat, rs, m
    for i in range(r):
        m = <double> mu[i]
        rs = <double> rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            xhat = (<double> x[i, j] - m) * rs
            dxhat = <double> gy[i, j] * <double> gamma[j]
            m1 += dxhat
            m2 += dxhat * xhat
        m1 /= c
        m2 /= c
        for j in range(c):
            xhat = (<double> x[i, j] - m) * rs
            dxhat = <double> gy[i, j] * <double> gamma[j]
            gx[i, j] = <floating> (rs * (dxhat - m1 - xhat * m2))
            ggamma[j] = <floating> (<double> ggamma[j]
                                    + <double> gy[i, j] * xhat)
            gbeta[j] = <floating> (<double> gbeta[j] + <double> gy[i, j])


def adamw_update(object p, object g, object m, object v, long t, double lr,
                 double beta1, double beta2, double eps, double wd):
    pr = p.reshape(-1)
    _adamw_update(pr, np.ascontiguousarray(g).reshape(-1), m.reshape(-1),
                  v.reshape(-1), t, lr, beta1, beta2, eps, wd)


def _adamw_update(floating[::1] p, floating[::1] g, floating[::1] m,
                  floating[::1] v, long t, double lr, double beta1,
                  double beta2, double eps, double wd):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double mi, vi, gi
    for i in range(n):
        gi = <double> g[i]
        mi = beta1 * <double> m[i] + (1.0 - beta1) * gi
        vi = beta2 * <double> v[i] + (1.0 - beta2) * gi * gi
        m[i] = <floating> mi
        v[i] = <floating> vi
        p[i] = <floating> (<double> p[i] - lr * wd * <double> p[i]
                           - lr * (mi / bc1) / (sqrt(vi / bc2) + eps))


def bilinear_resize(object src, Py_ssize_t out_h, Py_ssize_t out_w):
    sc = np.ascontiguousarray(src)
    out = np.empty((out_h, out_w, sc.shape[2]), dtype=sc.dtype)
    _bilinear_resize(sc, out)
    return out


def _bilinear_resize(floating[:, :, ::1] src, floating[:, :, ::1] out):
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], c = src.shape[2]
    cdef Py_ssize_t oh = out.shape[0], ow = out.shape[1]
    cdef Py_ssize_t i, j, k, y0, x0, y1, x1
    cdef double sy = (<double> h) / oh, sx = (<double> w) / ow
    cdef double fy, fx, wy, wx, top, bot
    for i in range(oh):
        fy = (i + 0.5) * sy - 0.5
        if fy < 0.0:
            fy = 0.0
        if fy > h - 1.0:
            fy = h - 1.0
        y0 = <Py_ssize_t> fy
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        wy = fy - y0
        for j in range(ow):
            fx = (j + 0.5) * sx - 0.5
            if fx < 0.0:
                fx = 0.0
            if fx > w - 1.0:
                fx = w - 1.0
            x0 = <Py_ssize_t> fx
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            wx = fx - x0
            for k in range(c):
                top = (<double> src[y0, x0, k] * (1.0 - wx)
                       + <double> src[y0, x1, k] * wx)
                bot = (<double> src[y1, x0, k] * (1.0 - wx)
                       + <double> src[y1, x1, k] * wx)
                out[i, j, k] = <floating> (top * (1.0 - wy) + bot * wy)
