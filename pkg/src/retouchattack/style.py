"""Style guidance: differentiable penalties pulling an image toward a reference style.

Two interchangeable losses share the ``loss_and_grad(image)`` interface, where
``image`` is a nonlinear sRGB ``(H, W, 3)`` array:

* :class:`StatisticStyle` matches Lab moments and soft Lab histograms of a corpus.
* :class:`PredictorStyle` is a U-Net that regresses the per-pixel deviation of a
  retouched image from its unretouched original.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from retouchattack import diffnet
from retouchattack.imagecore import (
    linear_to_srgb_array,
    load_png,
    rgb_to_lab,
    rgb_to_lab_vjp,
    srgb_to_linear_array,
    srgb_to_linear_vjp,
)
from retouchattack.retouchops import OpKind, op_forward

logger = logging.getLogger(__name__)

HIST_BINS = 32
HIST_WEIGHT = 10.0
# per Lab channel: (low, high) of the histogram support
_HIST_RANGES = ((0.0, 100.0), (-100.0, 100.0), (-100.0, 100.0))


def _bin_centers():
    out = []
    for lo, hi in _HIST_RANGES:
        width = (hi - lo) / HIST_BINS
        out.append((lo + width * (np.arange(HIST_BINS) + 0.5), width))
    return out


_CENTERS = _bin_centers()


def _soft_hist(values: np.ndarray, centers: np.ndarray, width: float):
    """Gaussian-kernel histogram; each pixel's kernel weights are normalized to 1."""
    z = (values[:, None] - centers[None, :]) / width
    logk = -0.5 * z * z
    logk -= logk.max(axis=1, keepdims=True)
    k = np.exp(logk)
    q = k / k.sum(axis=1, keepdims=True)
    return q.mean(axis=0), q, z


def _soft_hist_vjp(q, z, width, upstream):
    kappa = -z / width
    inner = np.sum(q * kappa, axis=1, keepdims=True)
    dq_dv = q * (kappa - inner)
    return (dq_dv @ upstream) / q.shape[0]


def image_statistics(image: np.ndarray):
    """Lab means, standard deviations and soft histograms of a nonlinear image."""
    lab = rgb_to_lab(srgb_to_linear_array(image)).reshape(-1, 3)
    hist = np.stack([_soft_hist(lab[:, c], *_CENTERS[c])[0] for c in range(3)])
    return lab.mean(axis=0), lab.std(axis=0), hist


@dataclass
class StyleReference:
    mean: np.ndarray
    std: np.ndarray
    hist: np.ndarray

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "hist": self.hist.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> StyleReference:
        hist = np.array(d["hist"], dtype=np.float64)
        if hist.shape != (3, HIST_BINS):
            raise ValueError(f"style reference histogram must be (3, {HIST_BINS}), got {hist.shape}")
        return cls(np.array(d["mean"], float), np.array(d["std"], float), hist)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> StyleReference:
        return cls.from_json(json.loads(Path(path).read_text()))


def build_reference(images) -> StyleReference:
    """Average per-image statistics over a corpus of nonlinear images."""
    stats = [image_statistics(np.asarray(img)) for img in images]
    if not stats:
        raise ValueError("style corpus is empty")
    means, stds, hists = (np.mean([s[i] for s in stats], axis=0) for i in range(3))
    return StyleReference(means, stds, hists)


def corpus_images(corpus_dir) -> list:
    """All PNGs directly under ``corpus_dir`` (recursing into subfolders), sorted by path."""
    corpus_dir = Path(corpus_dir)
    files = sorted(corpus_dir.rglob("*.png"))
    if not files:
        raise ValueError(f"no PNG images found under {corpus_dir}")
    return [load_png(f).data for f in files]


def statistic_style_loss(image: np.ndarray, ref: StyleReference):
    """Moment + histogram mismatch to ``ref``; returns ``(loss, d_image)``."""
    image = np.asarray(image, dtype=np.float64)
    lin = srgb_to_linear_array(image)
    lab = rgb_to_lab(lin)
    flat = lab.reshape(-1, 3)
    n = flat.shape[0]
    mu = flat.mean(axis=0)
    centered = flat - mu
    sigma = np.sqrt(np.mean(centered**2, axis=0))

    loss = float(np.sum((mu - ref.mean) ** 2) + np.sum((sigma - ref.std) ** 2))
    g_mu = 2.0 * (mu - ref.mean)
    g_sigma = 2.0 * (sigma - ref.std)
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    g_flat = g_mu / n + np.where(sigma > 0, g_sigma / (n * safe_sigma), 0.0) * centered

    for c in range(3):
        h, q, z = _soft_hist(flat[:, c], *_CENTERS[c])
        diff = h - ref.hist[c]
        loss += HIST_WEIGHT * float(np.sum(diff**2))
        g_flat[:, c] += _soft_hist_vjp(q, z, _CENTERS[c][1], 2.0 * HIST_WEIGHT * diff)

    g_lin = rgb_to_lab_vjp(lin, g_flat.reshape(lab.shape))
    return loss, srgb_to_linear_vjp(image, g_lin)


class StatisticStyle(BaseEstimator):
    """Style loss from corpus statistics. ``fit`` takes a list/array of nonlinear images."""

    def fit(self, X, y=None):
        self.reference_ = build_reference(X)
        return self

    @classmethod
    def from_reference(cls, ref: StyleReference) -> StatisticStyle:
        model = cls()
        model.reference_ = ref
        return model

    def loss_and_grad(self, image):
        check_is_fitted(self, "reference_")
        return statistic_style_loss(image, self.reference_)

    def score_samples(self, X):
        return np.array([self.loss_and_grad(x)[0] for x in X])


# ------------------------------------------------------------ predictor path


def random_retouch(image: np.ndarray, rng: np.random.Generator, n_ops: int = 2, neutral: bool = False):
    """Apply ``n_ops`` randomly chosen global operators with uniform parameters."""
    x = srgb_to_linear_array(image)
    for _ in range(n_ops):
        kind = OpKind(int(rng.integers(len(OpKind))))
        params = kind.neutral if neutral else rng.uniform(kind.low, kind.high)
        x, _ = op_forward(kind, x, params)
    return linear_to_srgb_array(x)


def deviation_map(retouched: np.ndarray, original: np.ndarray) -> np.ndarray:
    return np.linalg.norm(retouched - original, axis=-1)


def make_training_pairs(images, pairs_per_image: int, seed: int, neutral: bool = False):
    rng = np.random.default_rng(seed)
    inputs, targets = [], []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        for _ in range(pairs_per_image):
            n_ops = int(rng.integers(1, 4))
            out = random_retouch(img, rng, n_ops, neutral)
            inputs.append(out)
            targets.append(deviation_map(out, img)[..., None])
    return np.stack(inputs).astype(np.float32), np.stack(targets).astype(np.float32)


def _map_mse(out, target):
    diff = out - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def train_style_predictor(images, epochs=500, lr=0.001, seed=0, widths=(8, 16, 32),
                          pairs_per_image=4, batch_size=8, neutral=False):
    """Fit a U-Net mapping a retouched image to its per-pixel deviation map.

    Returns ``(network, weights, per-epoch losses)``.
    """
    images = [np.asarray(img) for img in images]
    if not images:
        raise ValueError("style corpus is empty")
    inputs, targets = make_training_pairs(images, pairs_per_image, seed, neutral)
    net = diffnet.unet_network(widths, inputs.shape[1:])
    weights = net.init_weights(seed)
    final = [n for n in weights if n.endswith(".b")][-1]
    weights[final] = np.full_like(weights[final], 0.01)

    def log(epoch, loss):
        if epoch % 50 == 0 or epoch == epochs - 1:
            logger.info("style predictor epoch %d loss %.5f", epoch + 1, loss)

    weights, history = diffnet.train(net, weights, inputs, targets, _map_mse, epochs, lr, batch_size, seed, log)
    return net, weights, history


class PredictorStyle(BaseEstimator):
    """Style loss as the mean of a learned nonnegative deviation map."""

    def __init__(self, epochs=500, lr=0.001, widths=(8, 16, 32), pairs_per_image=4, random_state=0):
        self.epochs = epochs
        self.lr = lr
        self.widths = widths
        self.pairs_per_image = pairs_per_image
        self.random_state = random_state

    def fit(self, X, y=None):
        self.net_, self.weights_, self.history_ = train_style_predictor(
            X, self.epochs, self.lr, self.random_state, tuple(self.widths), self.pairs_per_image
        )
        return self

    @classmethod
    def from_weights(cls, weights, input_shape=(64, 64, 3)):
        if not isinstance(weights, dict):
            weights = diffnet.load_weights(weights)
        convs = sorted({n.split(".")[0] for n in weights if n.endswith(".w")}, key=lambda s: int(s[5:]))
        widths_seen = [weights[f"{n}.w"].shape[0] for n in convs]
        depth = (len(convs) - 1 + 2) // 4
        widths = tuple(widths_seen[2 * i] for i in range(depth))
        batchnorm = any(n.endswith(".gamma") for n in weights)
        model = cls(widths=widths)
        model.net_ = diffnet.unet_network(widths, input_shape, batchnorm)
        model.net_.check_weights(weights)
        model.weights_ = weights
        return model

    def save(self, path):
        check_is_fitted(self, "weights_")
        diffnet.save_weights(self.weights_, path)

    def predict_map(self, image):
        check_is_fitted(self, "weights_")
        return self.net_.predict_logits(self.weights_, np.asarray(image)[None])[0, ..., 0]

    def loss_and_grad(self, image):
        check_is_fitted(self, "weights_")
        image = np.asarray(image)
        if image.shape != tuple(self.net_.input_shape):
            raise ValueError(f"image shape {image.shape} does not match predictor input {self.net_.input_shape}")
        out, cache = self.net_.forward(self.weights_, image[None])
        loss = float(np.mean(out, dtype=np.float64))
        d_img = self.net_.input_gradient(cache, np.full(out.shape, 1.0 / out.size))
        return loss, d_img[0].astype(np.float64)

    def score_samples(self, X):
        return np.array([self.loss_and_grad(x)[0] for x in X])


def load_style(ref_path=None, predictor_path=None, input_shape=(64, 64, 3)):
    """Build the style loss used by an attack from CLI-style file arguments."""
    if predictor_path is not None:
        return PredictorStyle.from_weights(predictor_path, input_shape)
    if ref_path is not None:
        return StatisticStyle.from_reference(StyleReference.load(ref_path))
    return None
