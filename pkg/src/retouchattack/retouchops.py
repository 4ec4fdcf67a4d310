"""Differentiable retouching operators.

Each operator maps a linear-sRGB ``(H, W, 3)`` array and a parameter vector to
a new array, and records an :class:`OpTape` so that :func:`op_backward` can
return exact vector-Jacobian products for both the pixels and the parameters.
Clamped outputs get a zero subgradient.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from retouchattack.imagecore import (
    ColorState,
    ImageTensor,
    hsv_to_rgb,
    hsv_to_rgb_vjp,
    rgb_to_hsv,
    rgb_to_hsv_vjp,
)

CURVE_SEGMENTS = 64
LUMA_WEIGHTS = np.array([0.27, 0.67, 0.06])
CONTRAST_EPS = 1e-6
BLUR_MIN_SIGMA = 0.05
_LN2 = math.log(2.0)


class OpKind(enum.IntEnum):
    EXPOSURE = 0
    WHITE_BALANCE = 1
    COLOR_CURVE = 2
    CONTRAST = 3
    HUE = 4
    SATURATION = 5
    GAUSSIAN_BLUR = 6

    @property
    def dim(self) -> int:
        return _SPECS[self][0]

    @property
    def low(self) -> np.ndarray:
        return np.full(self.dim, _SPECS[self][1])

    @property
    def high(self) -> np.ndarray:
        return np.full(self.dim, _SPECS[self][2])

    @property
    def neutral(self) -> np.ndarray:
        return np.full(self.dim, _SPECS[self][3])

    @property
    def label(self) -> str:
        return self.name.lower()


# kind -> (dimension, low, high, neutral)
_SPECS = {
    OpKind.EXPOSURE: (1, -3.5, 3.5, 0.0),
    OpKind.WHITE_BALANCE: (3, 0.6, 1.67, 1.0),
    OpKind.COLOR_CURVE: (3 * CURVE_SEGMENTS, 0.1, 3.0, 1.0),
    OpKind.CONTRAST: (1, -1.0, 1.0, 0.0),
    OpKind.HUE: (1, -math.pi / 3, math.pi / 3, 0.0),
    OpKind.SATURATION: (1, 0.0, 2.0, 1.0),
    OpKind.GAUSSIAN_BLUR: (1, 0.0, 2.0, 0.0),
}

NUM_OPS = len(OpKind)


@dataclass
class OpTape:
    """Intermediates cached by one forward application."""

    kind: OpKind
    shape: tuple
    params: np.ndarray
    cache: dict = field(default_factory=dict)


def project(kind: OpKind, params) -> np.ndarray:
    """Clamp ``params`` into the operator's box."""
    kind = OpKind(kind)
    return np.clip(np.asarray(params, dtype=np.float64), kind.low, kind.high)


def _check_params(kind: OpKind, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    if kind is OpKind.COLOR_CURVE and params.size and params.size % 3 == 0:
        return params
    if params.shape != (kind.dim,):
        raise ValueError(f"{kind.label} expects {kind.dim} parameters, got {params.size}")
    return params


def _unclamped(y: np.ndarray) -> np.ndarray:
    return (y >= 0.0) & (y <= 1.0)


# ------------------------------------------------------------------ forwards


def _exposure(x, p, tape):
    scale = 2.0 ** p[0]
    y = x * scale
    tape.cache.update(x=x, y=y, scale=scale)
    return np.clip(y, 0.0, 1.0)


def _white_balance(x, p, tape):
    y = x * p
    tape.cache.update(x=x, y=y)
    return np.clip(y, 0.0, 1.0)


def _curve_tables(p):
    h = p.reshape(3, -1)
    cum = np.concatenate([np.zeros((3, 1)), np.cumsum(h, axis=1)], axis=1)
    return h, cum[:, :-1], cum[:, -1]


def _color_curve(x, p, tape):
    h, tbefore, total = _curve_tables(p)
    segments = h.shape[1]
    u = np.clip(x, 0.0, 1.0) * segments
    j = np.minimum(np.floor(u), segments - 1).astype(np.intp)
    frac = u - j
    lanes = np.arange(3)
    out = (tbefore[lanes, j] + frac * h[lanes, j]) / total
    tape.cache.update(j=j, frac=frac, out=out)
    return out


def _contrast(x, p, tape):
    a = p[0]
    lum = x @ LUMA_WEIGHTS
    enlum = 0.5 * (1.0 - np.cos(np.pi * lum))
    denom = np.maximum(lum, CONTRAST_EPS)
    ratio = enlum / denom
    enc = x * ratio[..., None]
    y = a * enc + (1.0 - a) * x
    tape.cache.update(x=x, lum=lum, enlum=enlum, denom=denom, ratio=ratio, enc=enc, y=y)
    return np.clip(y, 0.0, 1.0)


def _hue(x, p, tape):
    h, s, v = rgb_to_hsv(x)
    h2 = np.mod(h + p[0], 2.0 * np.pi)
    tape.cache.update(x=x, h2=h2, s=s, v=v)
    if p[0] == 0.0:
        return x.copy()
    return hsv_to_rgb(h2, s, v)


def _saturation(x, p, tape):
    h, s, v = rgb_to_hsv(x)
    s_raw = p[0] * s
    s2 = np.clip(s_raw, 0.0, 1.0)
    tape.cache.update(x=x, h=h, s=s, v=v, s2=s2, s_raw=s_raw)
    if p[0] == 1.0:
        return x.copy()
    return hsv_to_rgb(h, s2, v)


def gaussian_kernel(sigma: float):
    """Normalized 1-D taps and their derivative w.r.t. ``sigma``."""
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(offsets**2) / (2.0 * sigma**2))
    dw = w * offsets**2 / sigma**3
    total = w.sum()
    weights = w / total
    dweights = (dw - weights * dw.sum()) / total
    return offsets.astype(np.intp), weights, dweights


def _blur_matrix(n: int, offsets, weights) -> np.ndarray:
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for off, w in zip(offsets, weights):
        np.add.at(mat, (rows, np.clip(rows + off, 0, n - 1)), w)
    return mat


def _separable(bh, x, bw):
    tmp = np.tensordot(bh, x, axes=(1, 0))
    return np.tensordot(tmp, bw, axes=(1, 1)).transpose(0, 2, 1)


def _gaussian_blur(x, p, tape):
    sigma = p[0]
    if sigma < BLUR_MIN_SIGMA:
        tape.cache.update(identity=True)
        return x.copy()
    offsets, w, dw = gaussian_kernel(sigma)
    hgt, wid, _ = x.shape
    bh, bw = _blur_matrix(hgt, offsets, w), _blur_matrix(wid, offsets, w)
    dbh, dbw = _blur_matrix(hgt, offsets, dw), _blur_matrix(wid, offsets, dw)
    tape.cache.update(identity=False, x=x, bh=bh, bw=bw, dbh=dbh, dbw=dbw)
    return _separable(bh, x, bw)


_FORWARD = {
    OpKind.EXPOSURE: _exposure,
    OpKind.WHITE_BALANCE: _white_balance,
    OpKind.COLOR_CURVE: _color_curve,
    OpKind.CONTRAST: _contrast,
    OpKind.HUE: _hue,
    OpKind.SATURATION: _saturation,
    OpKind.GAUSSIAN_BLUR: _gaussian_blur,
}


def op_forward(kind, x: np.ndarray, params):
    """Apply operator ``kind`` to a raw linear array. Returns ``(out, tape)``."""
    kind = OpKind(kind)
    params = _check_params(kind, params)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 array, got shape {x.shape}")
    tape = OpTape(kind, x.shape, params)
    return _FORWARD[kind](x, params, tape), tape


# ----------------------------------------------------------------- backwards


def _exposure_vjp(t, g):
    c = t.cache
    gy = g * _unclamped(c["y"])
    return gy * c["scale"], np.array([np.sum(gy * c["y"]) * _LN2])


def _white_balance_vjp(t, g):
    c = t.cache
    gy = g * _unclamped(c["y"])
    return gy * t.params, np.sum(gy * c["x"], axis=(0, 1))


def _color_curve_vjp(t, g):
    c = t.cache
    h, _, total = _curve_tables(t.params)
    j, frac, out = c["j"], c["frac"], c["out"]
    segments = h.shape[1]
    lanes = np.arange(3)
    dx = g * segments * h[lanes, j] / total
    dh = np.empty((3, segments))
    for ch in range(3):
        jc, gc = j[..., ch].ravel(), g[..., ch].ravel()
        at = np.bincount(jc, weights=gc, minlength=segments)
        partial = np.bincount(jc, weights=gc * frac[..., ch].ravel(), minlength=segments)
        above = np.cumsum(at[::-1])[::-1] - at
        dh[ch] = (above + partial - np.sum(gc * out[..., ch].ravel())) / total[ch]
    return dx, dh.ravel()


def _contrast_vjp(t, g):
    c = t.cache
    a = t.params[0]
    gy = g * _unclamped(c["y"])
    da = np.sum(gy * (c["enc"] - c["x"]))
    lum = c["lum"]
    denlum = 0.5 * np.pi * np.sin(np.pi * lum)
    live = lum > CONTRAST_EPS
    dratio = np.where(live, (denlum * c["denom"] - c["enlum"]) / c["denom"] ** 2, denlum / c["denom"])
    g_ratio = np.sum(gy * c["x"], axis=-1) * a
    dx = gy * ((1.0 - a) + a * c["ratio"][..., None]) + (g_ratio * dratio)[..., None] * LUMA_WEIGHTS
    return dx, np.array([da])


def _hue_vjp(t, g):
    c = t.cache
    gh, gs, gv = hsv_to_rgb_vjp(c["h2"], c["s"], c["v"], g)
    return rgb_to_hsv_vjp(c["x"], gh, gs, gv), np.array([np.sum(gh)])


def _saturation_vjp(t, g):
    c = t.cache
    r = t.params[0]
    gh, gs2, gv = hsv_to_rgb_vjp(c["h"], c["s2"], c["v"], g)
    live = (c["s_raw"] >= 0.0) & (c["s_raw"] <= 1.0)
    gs2 = gs2 * live
    dr = np.sum(gs2 * c["s"])
    return rgb_to_hsv_vjp(c["x"], gh, gs2 * r, gv), np.array([dr])


def _gaussian_blur_vjp(t, g):
    c = t.cache
    if c["identity"]:
        return g.copy(), np.zeros(1)
    bh, bw = c["bh"], c["bw"]
    dx = _separable(bh.T, g, bw.T)
    dsig = _separable(c["dbh"], c["x"], bw) + _separable(bh, c["x"], c["dbw"])
    return dx, np.array([np.sum(g * dsig)])


_BACKWARD = {
    OpKind.EXPOSURE: _exposure_vjp,
    OpKind.WHITE_BALANCE: _white_balance_vjp,
    OpKind.COLOR_CURVE: _color_curve_vjp,
    OpKind.CONTRAST: _contrast_vjp,
    OpKind.HUE: _hue_vjp,
    OpKind.SATURATION: _saturation_vjp,
    OpKind.GAUSSIAN_BLUR: _gaussian_blur_vjp,
}


def op_backward(kind, tape: OpTape, upstream: np.ndarray):
    """VJP of one forward call: returns ``(d_input, d_params)``."""
    kind = OpKind(kind)
    if tape.kind is not kind:
        raise ValueError(f"tape was recorded for {tape.kind.label}, not {kind.label}")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tape.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match forward shape {tape.shape}")
    return _BACKWARD[kind](tape, upstream)


# ------------------------------------------------------- ImageTensor surface


def _apply(kind, img: ImageTensor, params):
    img.require(ColorState.LINEAR_SRGB)
    out, tape = op_forward(kind, img.data, params)
    return ImageTensor(out, ColorState.LINEAR_SRGB), tape


def apply_exposure(img, e):
    return _apply(OpKind.EXPOSURE, img, [e])


def apply_white_balance(img, gains):
    return _apply(OpKind.WHITE_BALANCE, img, gains)


def apply_color_curve(img, curve):
    """``curve`` is a ``(3, L)`` array of positive segment slopes."""
    return _apply(OpKind.COLOR_CURVE, img, np.asarray(curve).ravel())


def apply_contrast(img, a):
    return _apply(OpKind.CONTRAST, img, [a])


def apply_hue(img, u):
    return _apply(OpKind.HUE, img, [u])


def apply_saturation(img, r):
    return _apply(OpKind.SATURATION, img, [r])


def apply_gaussian_blur(img, sigma):
    return _apply(OpKind.GAUSSIAN_BLUR, img, [sigma])
