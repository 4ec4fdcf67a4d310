"""Image tensors, PNG I/O and the color-space conversions used by the pipeline.

All math is done in float64 on ``(H, W, 3)`` arrays. Functions named ``*_vjp``
return vector-Jacobian products for the matching forward conversion.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# sRGB transfer constants (IEC 61966-2-1).
_A = 0.055
_PHI = 12.92
_GAMMA = 2.4
_K0 = 0.04045
_K1 = 0.0031308

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ColorState(enum.Enum):
    NONLINEAR_SRGB = "NonlinearSRGB"
    LINEAR_SRGB = "LinearSRGB"


class ImageError(ValueError):
    """Raised for malformed images or images in the wrong color state."""


@dataclass(frozen=True)
class ImageTensor:
    """An ``H x W x 3`` image with values in [0, 1] tagged with its color state."""

    data: np.ndarray
    state: ColorState = ColorState.NONLINEAR_SRGB

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ImageError(f"expected an H x W x 3 array, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ImageError("image must have at least one pixel")
        if not np.all(np.isfinite(data)):
            raise ImageError("image contains non-finite values")
        data = np.clip(data, 0.0, 1.0)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def require(self, state: ColorState) -> None:
        if self.state is not state:
            raise ImageError(f"expected image in state {state.value}, got {self.state.value}")


# --------------------------------------------------------------------------- PNG


def _png_chunks(raw: bytes, path):
    if raw[:8] != _PNG_SIGNATURE:
        raise ImageError(f"{path}: not a PNG file")
    pos = 8
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise ImageError(f"{path}: truncated chunk header")
        (length,) = struct.unpack(">I", raw[pos : pos + 4])
        ctype = raw[pos + 4 : pos + 8]
        body = raw[pos + 8 : pos + 8 + length]
        crc_bytes = raw[pos + 8 + length : pos + 12 + length]
        if len(body) != length or len(crc_bytes) != 4:
            raise ImageError(f"{path}: truncated {ctype!r} chunk")
        if zlib.crc32(ctype + body) != struct.unpack(">I", crc_bytes)[0]:
            raise ImageError(f"{path}: CRC mismatch in {ctype!r} chunk")
        yield ctype, body
        pos += 12 + length
        if ctype == b"IEND":
            return
    raise ImageError(f"{path}: missing IEND chunk (file truncated)")


def _unfilter(data: bytes, height: int, stride: int, bpp: int, path) -> np.ndarray:
    expected = height * (stride + 1)
    if len(data) != expected:
        raise ImageError(f"{path}: image data has {len(data)} bytes, expected {expected}")
    rows = np.frombuffer(data, dtype=np.uint8).reshape(height, stride + 1)
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(height):
        ftype = rows[y, 0]
        line = rows[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            cur = np.zeros(stride, dtype=np.int32)
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                if ftype == 1:
                    pred = left
                elif ftype == 3:
                    pred = (left + prev[i]) >> 1
                else:
                    up = prev[i]
                    ul = prev[i - bpp] if i >= bpp else 0
                    p = left + up - ul
                    pa, pb, pc = abs(p - left), abs(p - up), abs(p - ul)
                    pred = left if (pa <= pb and pa <= pc) else (up if pb <= pc else ul)
                cur[i] = (line[i] + pred) & 0xFF
        else:
            raise ImageError(f"{path}: unknown PNG filter type {ftype}")
        out[y] = cur
        prev = cur
    return out


def load_png(path) -> ImageTensor:
    """Read an 8- or 16-bit RGB/RGBA PNG as a nonlinear sRGB tensor (alpha dropped)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageError(f"{path}: cannot read file ({exc.strerror})") from exc

    header = None
    idat = []
    for ctype, body in _png_chunks(raw, path):
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif ctype == b"IDAT":
            idat.append(body)
    if header is None:
        raise ImageError(f"{path}: missing IHDR chunk")
    width, height, depth, ctype_code, _, _, interlace = header
    channels = {2: 3, 6: 4}.get(ctype_code)
    if channels is None:
        raise ImageError(f"{path}: unsupported PNG color type {ctype_code} (need RGB or RGBA)")
    if depth not in (8, 16):
        raise ImageError(f"{path}: unsupported bit depth {depth} (need 8 or 16)")
    if interlace:
        raise ImageError(f"{path}: interlaced PNGs are not supported")
    try:
        data = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageError(f"{path}: corrupt image data ({exc})") from exc

    bpp = channels * depth // 8
    pixels = _unfilter(data, height, width * bpp, bpp, path)
    if depth == 16:
        values = pixels.view(">u2").astype(np.float64) / 65535.0
    else:
        values = pixels.astype(np.float64) / 255.0
    values = values.reshape(height, width, channels)[..., :3]
    return ImageTensor(values, ColorState.NONLINEAR_SRGB)


def _chunk(ctype: bytes, body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + ctype + body + struct.pack(">I", zlib.crc32(ctype + body))


def encode_png(img: ImageTensor) -> bytes:
    img.require(ColorState.NONLINEAR_SRGB)
    pixels = np.round(img.data * 255.0).astype(np.uint8)
    h, w, _ = pixels.shape
    rows = np.concatenate([np.zeros((h, 1), dtype=np.uint8), pixels.reshape(h, w * 3)], axis=1)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (
        _PNG_SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(rows.tobytes(), 9))
        + _chunk(b"IEND", b"")
    )


def save_png(img: ImageTensor, path) -> None:
    """Write an 8-bit RGB PNG. The image must already be nonlinear sRGB."""
    payload = encode_png(img)
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    try:
        tmp.write_bytes(payload)
        tmp.replace(path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise ImageError(f"{path}: cannot write file ({exc.strerror})") from exc


# ------------------------------------------------------------------ sRGB gamma


def srgb_to_linear_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    hi = np.power((np.maximum(x, _K0) + _A) / (1.0 + _A), _GAMMA)
    return np.where(x <= _K0, x / _PHI, hi)


def srgb_to_linear_vjp(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    base = (np.maximum(x, _K0) + _A) / (1.0 + _A)
    d = np.where(x <= _K0, 1.0 / _PHI, _GAMMA / (1.0 + _A) * np.power(base, _GAMMA - 1.0))
    return upstream * d


def linear_to_srgb_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    hi = (1.0 + _A) * np.power(np.maximum(x, _K1), 1.0 / _GAMMA) - _A
    return np.where(x <= _K1, x * _PHI, hi)


def linear_to_srgb_vjp(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = np.where(
        x <= _K1,
        _PHI,
        (1.0 + _A) / _GAMMA * np.power(np.maximum(x, _K1), 1.0 / _GAMMA - 1.0),
    )
    return upstream * d


def srgb_to_linear(img: ImageTensor) -> ImageTensor:
    img.require(ColorState.NONLINEAR_SRGB)
    return ImageTensor(srgb_to_linear_array(img.data), ColorState.LINEAR_SRGB)


def linear_to_srgb(img: ImageTensor) -> ImageTensor:
    img.require(ColorState.LINEAR_SRGB)
    return ImageTensor(linear_to_srgb_array(img.data), ColorState.NONLINEAR_SRGB)


# ------------------------------------------------------------------------- HSV

_SECTOR = np.pi / 3.0
_TWO_PI = 2.0 * np.pi


def _extrema(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    imax = np.where((r >= g) & (r >= b), 0, np.where(g >= b, 1, 2))
    imin = np.where((r <= g) & (r <= b), 0, np.where(g <= b, 1, 2))
    # hue numerator for max channel r, g, b: g - b, b - r, r - g
    diff = np.where(imax == 0, g - b, np.where(imax == 1, b - r, r - g))
    return v, mn, imax, imin, diff


def rgb_to_hsv(rgb: np.ndarray):
    """Hexcone HSV of ``(..., 3)`` RGB values; hue in radians ``[0, 2pi)``.

    Gray pixels get hue 0. Ties for the max channel resolve to the lowest index.
    """
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    v, mn, imax, _, diff = _extrema(rgb)
    c = v - mn
    safe_c = np.where(c > 0, c, 1.0)
    hp = diff / safe_c + 2.0 * imax
    hp = np.where(hp < 0, hp + 6.0, hp)
    h = np.where(c > 0, hp * _SECTOR, 0.0)
    h = np.where(h >= _TWO_PI, h - _TWO_PI, h)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    return h, s, v


def rgb_to_hsv_vjp(rgb: np.ndarray, gh: np.ndarray, gs: np.ndarray, gv: np.ndarray) -> np.ndarray:
    """Pull gradients on (h, s, v) back to RGB."""
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    v, mn, imax, imin, diff = _extrema(rgb)
    c = v - mn
    safe_c = np.where(c > 0, c, 1.0)
    safe_v = np.where(v > 0, v, 1.0)
    ghp = np.where(c > 0, gh * _SECTOR, 0.0) / safe_c
    gs_v = np.where(v > 0, gs / safe_v, 0.0)
    hue_edge = ghp * diff / safe_c
    g_max = gv + gs_v * mn / safe_v - hue_edge
    g_min = hue_edge - gs_v
    p_idx = (imax + 1) % 3
    q_idx = (imax + 2) % 3
    out = np.empty(rgb.shape)
    for ch in range(3):
        out[..., ch] = (
            np.where(p_idx == ch, ghp, 0.0)
            - np.where(q_idx == ch, ghp, 0.0)
            + np.where(imax == ch, g_max, 0.0)
            + np.where(imin == ch, g_min, 0.0)
        )
    return out


def _hsv_k(h: np.ndarray):
    hp = np.asarray(h, dtype=np.float64) / _SECTOR
    return [np.mod(n + hp, 6.0) for n in (5.0, 3.0, 1.0)]


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    s = np.clip(s, 0.0, 1.0)
    v = np.clip(v, 0.0, 1.0)
    chans = []
    for k in _hsv_k(h):
        a = np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
        chans.append(v - v * s * a)
    return np.stack(chans, axis=-1)


def hsv_to_rgb_vjp(h, s, v, upstream: np.ndarray):
    """Return gradients ``(gh, gs, gv)`` for an upstream RGB gradient."""
    s = np.clip(s, 0.0, 1.0)
    v = np.clip(v, 0.0, 1.0)
    gh = np.zeros_like(v)
    gs = np.zeros_like(v)
    gv = np.zeros_like(v)
    for ch, k in enumerate(_hsv_k(h)):
        up = upstream[..., ch]
        t = np.minimum(k, 4.0 - k)
        a = np.clip(t, 0.0, 1.0)
        slope = np.where((t > 0) & (t < 1), np.where(k < 4.0 - k, 1.0, -1.0), 0.0)
        gv += up * (1.0 - s * a)
        gs += up * (-v * a)
        gh += up * (-v * s * slope) / _SECTOR
    return gh, gs, gv


# ------------------------------------------------------------------------- Lab

_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE = _RGB_TO_XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0


def _lab_f(t):
    return np.where(t > _DELTA**3, np.cbrt(np.maximum(t, _DELTA**3)), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _lab_df(t):
    return np.where(
        t > _DELTA**3,
        1.0 / (3.0 * np.cbrt(np.maximum(t, _DELTA**3)) ** 2),
        1.0 / (3 * _DELTA**2),
    )


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """CIE Lab (D65) of ``(..., 3)`` linear sRGB values."""
    rgb = np.asarray(rgb, dtype=np.float64)
    xyz = (rgb @ _RGB_TO_XYZ.T) / _WHITE
    f = _lab_f(xyz)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def rgb_to_lab_vjp(rgb: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    xyz = (rgb @ _RGB_TO_XYZ.T) / _WHITE
    gL, ga, gb = upstream[..., 0], upstream[..., 1], upstream[..., 2]
    gf = np.stack([500.0 * ga, 116.0 * gL - 500.0 * ga + 200.0 * gb, -200.0 * gb], axis=-1)
    gxyz = gf * _lab_df(xyz) / _WHITE
    return gxyz @ _RGB_TO_XYZ
