"""Convolution inner loops: numba-jitted kernels with a pure-numpy fallback.

The backend is picked at import time from the TERNTRAIN_NUMBA environment
variable (unset/1 = numba when importable, 0 = numpy) and can be flipped at
runtime with set_backend(), which the benchmark and the cross-backend tests
rely on. Both paths take and return contiguous float64 arrays and compute
the same cross-correlation (no kernel flip) with zero padding.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


def _env_wants_numba() -> bool:
    v = os.environ.get("TERNTRAIN_NUMBA", "1").strip().lower()
    return v not in ("0", "false", "off", "no")


_USE_NUMBA = _HAVE_NUMBA and _env_wants_numba()


def backend() -> str:
    """Name of the active kernel backend, "numba" or "numpy"."""
    return "numba" if _USE_NUMBA else "numpy"


def available_backends() -> tuple[str, ...]:
    return ("numba", "numpy") if _HAVE_NUMBA else ("numpy",)


def set_backend(name: str) -> None:
    global _USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    _USE_NUMBA = name == "numba"


def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    """Output spatial extents; rejects configurations with fractional extents."""
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding: stride={stride}, padding={padding}")
    num_h = h + 2 * padding - kh
    num_w = w + 2 * padding - kw
    if num_h < 0 or num_w < 0:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (padding={padding})")
    if num_h % stride or num_w % stride:
        raise ValueError(
            f"non-integral conv output extent: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride={stride}, padding={padding}"
        )
    return num_h // stride + 1, num_w // stride + 1


# --- numba kernels ----------------------------------------------------------


@njit(cache=True)
def _conv2d_forward_njit(x, w, stride, padding, out):
    n_, c_, h_, w_in = x.shape
    f_, _, kh, kw = w.shape
    ho, wo = out.shape[2], out.shape[3]
    for n in range(n_):
        for f in range(f_):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(c_):
                        for p in range(kh):
                            yy = i * stride - padding + p
                            if yy < 0 or yy >= h_:
                                continue
                            for q in range(kw):
                                xx = j * stride - padding + q
                                if 0 <= xx < w_in:
                                    acc += x[n, c, yy, xx] * w[f, c, p, q]
                    out[n, f, i, j] = acc


@njit(cache=True)
def _conv2d_backward_x_njit(g, w, stride, padding, gx):
    n_, c_, h_, w_in = gx.shape
    f_, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    for n in range(n_):
        for f in range(f_):
            for i in range(ho):
                for j in range(wo):
                    go = g[n, f, i, j]
                    for c in range(c_):
                        for p in range(kh):
                            yy = i * stride - padding + p
                            if yy < 0 or yy >= h_:
                                continue
                            for q in range(kw):
                                xx = j * stride - padding + q
                                if 0 <= xx < w_in:
                                    gx[n, c, yy, xx] += go * w[f, c, p, q]


@njit(cache=True)
def _conv2d_backward_w_njit(g, x, stride, padding, gw):
    n_, c_, h_, w_in = x.shape
    f_, _, kh, kw = gw.shape
    ho, wo = g.shape[2], g.shape[3]
    for n in range(n_):
        for f in range(f_):
            for i in range(ho):
                for j in range(wo):
                    go = g[n, f, i, j]
                    for c in range(c_):
                        for p in range(kh):
                            yy = i * stride - padding + p
                            if yy < 0 or yy >= h_:
                                continue
                            for q in range(kw):
                                xx = j * stride - padding + q
                                if 0 <= xx < w_in:
                                    gw[f, c, p, q] += go * x[n, c, yy, xx]


# --- numpy fallback ---------------------------------------------------------


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv2d_forward_numpy(x, w, stride, padding):
    ho, wo = conv_out_hw(x.shape[2], x.shape[3], w.shape[2], w.shape[3], stride, padding)
    xp = _pad(x, padding)
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    for p in range(w.shape[2]):
        for q in range(w.shape[3]):
            xs = xp[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride]
            out += np.einsum("nchw,fc->nfhw", xs, w[:, :, p, q], optimize=True)
    return out


def _conv2d_backward_x_numpy(g, x_shape, w, stride, padding):
    ho, wo = g.shape[2], g.shape[3]
    h_p = x_shape[2] + 2 * padding
    w_p = x_shape[3] + 2 * padding
    gxp = np.zeros((x_shape[0], x_shape[1], h_p, w_p))
    for p in range(w.shape[2]):
        for q in range(w.shape[3]):
            gxp[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride] += np.einsum(
                "nfhw,fc->nchw", g, w[:, :, p, q], optimize=True
            )
    if padding == 0:
        return gxp
    return gxp[:, :, padding:-padding, padding:-padding]


def _conv2d_backward_w_numpy(g, x, w_shape, stride, padding):
    ho, wo = g.shape[2], g.shape[3]
    xp = _pad(x, padding)
    gw = np.zeros(w_shape)
    for p in range(w_shape[2]):
        for q in range(w_shape[3]):
            xs = xp[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride]
            gw[:, :, p, q] = np.einsum("nfhw,nchw->fc", g, xs, optimize=True)
    return gw


# --- dispatch ---------------------------------------------------------------


def _as_f64(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlate x[N,C,H,W] with w[F,C,kh,kw]; zero padding."""
    x = _as_f64(x)
    w = _as_f64(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: x{x.shape} w{w.shape}")
    ho, wo = conv_out_hw(x.shape[2], x.shape[3], w.shape[2], w.shape[3], stride, padding)
    if _USE_NUMBA:
        out = np.zeros((x.shape[0], w.shape[0], ho, wo))
        _conv2d_forward_njit(x, w, stride, padding, out)
        return out
    return _conv2d_forward_numpy(x, w, stride, padding)


def conv2d_backward_x(g: np.ndarray, x_shape: tuple, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Gradient of the conv output w.r.t. its input."""
    g = _as_f64(g)
    w = _as_f64(w)
    if _USE_NUMBA:
        gx = np.zeros(x_shape)
        _conv2d_backward_x_njit(g, w, stride, padding, gx)
        return gx
    return _conv2d_backward_x_numpy(g, x_shape, w, stride, padding)


def conv2d_backward_w(g: np.ndarray, x: np.ndarray, w_shape: tuple, stride: int, padding: int) -> np.ndarray:
    """Gradient of the conv output w.r.t. the kernel."""
    g = _as_f64(g)
    x = _as_f64(x)
    if _USE_NUMBA:
        gw = np.zeros(w_shape)
        _conv2d_backward_w_njit(g, x, stride, padding, gw)
        return gw
    return _conv2d_backward_w_numpy(g, x, w_shape, stride, padding)
