"""Palette extraction and palette-driven soft masks for local retouching."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from retouchattack.imagecore import ColorState, ImageTensor, rgb_to_lab


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(len(points))]]
    closest = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers.append(centers[-1])
            continue
        pick = rng.choice(len(points), p=closest / total)
        centers.append(points[pick])
        closest = np.minimum(closest, np.sum((points - points[pick]) ** 2, axis=1))
    return np.array(centers)


def extract_palette(img: ImageTensor, k: int = 5, seed: int = 0, max_iter: int = 50, tol: float = 1e-4):
    """Seeded k-means++ over per-pixel Lab colors; centroids sorted by ascending L*.

    Returns a ``(k, 3)`` array of Lab colors.
    """
    img.require(ColorState.LINEAR_SRGB)
    if not 1 <= k <= 16:
        raise ValueError(f"palette size must be in [1, 16], got {k}")
    points = rgb_to_lab(img.data).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(points, k, rng)
    for _ in range(max_iter):
        dist = np.sum((points[:, None, :] - centers[None]) ** 2, axis=2)
        assign = np.argmin(dist, axis=1)
        moved = centers.copy()
        for c in range(k):
            members = points[assign == c]
            if len(members):
                moved[c] = members.mean(axis=0)
        shift = np.max(np.linalg.norm(moved - centers, axis=1))
        centers = moved
        if shift < tol:
            break
    order = np.lexsort((centers[:, 2], centers[:, 1], centers[:, 0]))
    return centers[order]


def compute_masks(img: ImageTensor, palette: np.ndarray) -> np.ndarray:
    """Soft masks ``(K, H, W)``: one minus the min-max normalized Lab distance to each entry."""
    img.require(ColorState.LINEAR_SRGB)
    lab = rgb_to_lab(img.data)
    palette = np.asarray(palette, dtype=np.float64).reshape(-1, 3)
    masks = np.empty((len(palette), img.height, img.width))
    for k, color in enumerate(palette):
        d = np.linalg.norm(lab - color, axis=-1)
        lo, hi = d.min(), d.max()
        masks[k] = 1.0 - (d - lo) / (hi - lo) if hi > lo else 1.0
    return masks


def composite(base: np.ndarray, retouched: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if base.shape != retouched.shape or base.shape[:2] != mask.shape:
        raise ValueError(
            f"composite shapes disagree: base {base.shape}, retouched {retouched.shape}, mask {mask.shape}"
        )
    w = mask[..., None]
    return retouched * w + base * (1.0 - w)


def composite_backward(mask: np.ndarray, upstream: np.ndarray):
    """Returns ``(d_base, d_retouched)``; the mask is a constant."""
    w = mask[..., None]
    return upstream * (1.0 - w), upstream * w


class PaletteMasker(TransformerMixin, BaseEstimator):
    """Fit a color palette to a linear image, then emit one soft mask per entry.

    Parameters
    ----------
    n_colors : int
        Palette size ``K``.
    random_state : int
        Seed for the k-means++ initialization.
    """

    def __init__(self, n_colors=5, random_state=0, max_iter=50, tol=1e-4):
        self.n_colors = n_colors
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        self.palette_ = extract_palette(
            _as_linear(X), self.n_colors, self.random_state, self.max_iter, self.tol
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "palette_")
        return compute_masks(_as_linear(X), self.palette_)


def _as_linear(X) -> ImageTensor:
    if isinstance(X, ImageTensor):
        return X
    return ImageTensor(np.asarray(X), ColorState.LINEAR_SRGB)
