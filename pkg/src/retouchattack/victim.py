"""Synthetic shape dataset and the toy victim classifier attacked by the pipeline."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from retouchattack import diffnet
from retouchattack.imagecore import ImageTensor, hsv_to_rgb, load_png, save_png

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring")
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    size: int = 64
    rho: float = 0.8
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def validate(self):
        n_classes = len(SHAPES)
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if self.n_train < n_classes or self.n_test < n_classes:
            raise ValueError(f"each split needs at least {n_classes} images")
        if self.size < 8:
            raise ValueError(f"image size must be at least 8, got {self.size}")


def signature_hue(label: int) -> float:
    return 2.0 * np.pi * label / len(SHAPES)


def _shape_alpha(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    radius = rng.uniform(0.22, 0.34) * size
    cy, cx = rng.uniform(0.38, 0.62, size=2) * size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    if shape == "circle":
        sd = radius - dist
    elif shape == "square":
        sd = 0.85 * radius - np.maximum(np.abs(dx), np.abs(dy))
    elif shape == "triangle":
        # equilateral, apex up: three half-planes at the incircle radius
        r_in = 0.6 * radius
        normals = [(0.0, 1.0), (np.sqrt(3) / 2, -0.5), (-np.sqrt(3) / 2, -0.5)]
        sd = np.min([r_in - (nx * dx + ny * dy) for ny, nx in normals], axis=0)
    elif shape == "cross":
        arm = 0.3 * radius
        bar_h = np.minimum(radius - np.abs(dx), arm - np.abs(dy))
        bar_v = np.minimum(arm - np.abs(dx), radius - np.abs(dy))
        sd = np.maximum(bar_h, bar_v)
    elif shape == "ring":
        sd = np.minimum(radius - dist, dist - 0.55 * radius)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return np.clip(sd + 0.5, 0.0, 1.0)


def render_image(label: int, spec: SyntheticDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """One nonlinear sRGB image of class ``label``."""
    size = spec.size
    if rng.random() < spec.rho:
        fg_hue = signature_hue(label) + rng.uniform(-0.15, 0.15)
    else:
        fg_hue = rng.uniform(0.0, 2.0 * np.pi)
    bg_hue = fg_hue + np.pi + rng.uniform(-0.3, 0.3)
    fg = hsv_to_rgb(np.mod(fg_hue, 2 * np.pi), rng.uniform(0.55, 0.9), rng.uniform(0.65, 0.95))
    bg = hsv_to_rgb(np.mod(bg_hue, 2 * np.pi), rng.uniform(0.2, 0.5), rng.uniform(0.25, 0.55))
    ramp = np.linspace(-0.06, 0.06, size)[:, None, None] * rng.choice([-1.0, 1.0])
    alpha = _shape_alpha(SHAPES[label], size, rng)[..., None]
    img = alpha * fg + (1.0 - alpha) * (bg + ramp)
    img = img + rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % len(SHAPES))


def generate_dataset(spec: SyntheticDatasetSpec, out_dir) -> list:
    """Write PNGs under ``out_dir/{train,test}`` plus a JSON manifest; returns the manifest."""
    spec.validate()
    out_dir = Path(out_dir)
    manifest = []
    try:
        for split_id, (split, count) in enumerate((("train", spec.n_train), ("test", spec.n_test))):
            (out_dir / split).mkdir(parents=True, exist_ok=True)
            labels = _balanced_labels(count, np.random.default_rng((spec.seed, split_id)))
            for i, label in enumerate(labels):
                rng = np.random.default_rng((spec.seed, split_id, i))
                rel = f"{split}/{i:05d}.png"
                save_png(ImageTensor(render_image(int(label), spec, rng)), out_dir / rel)
                manifest.append({"file": rel, "label": int(label), "split": split})
        (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset under {out_dir}: {exc.strerror}") from exc
    return manifest


def load_split(data_dir, split: str):
    """Returns ``(images, labels, files)`` with images stacked as ``(n, H, W, 3)``."""
    data_dir = Path(data_dir)
    path = data_dir / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    entries = [e for e in json.loads(path.read_text()) if e["split"] == split]
    if not entries:
        raise ValueError(f"{path}: split {split!r} is empty")
    images = np.stack([load_png(data_dir / e["file"]).data for e in entries])
    labels = np.array([e["label"] for e in entries], dtype=np.intp)
    return images, labels, [e["file"] for e in entries]


class ToyVictim(ClassifierMixin, BaseEstimator):
    """Conv-ReLU-Pool x2 + Dense classifier trained with Adam on nonlinear sRGB inputs."""

    def __init__(self, num_classes=5, epochs=10, lr=0.001, batch_size=32, random_state=0):
        self.num_classes = num_classes
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y, dtype=np.intp)
        if X.ndim != 4 or X.shape[-1] != 3:
            raise ValueError(f"expected (n, H, W, 3) images, got {X.shape}")
        self.net_ = diffnet.victim_network(self.num_classes, X.shape[1:])
        weights = self.net_.init_weights(self.random_state)

        def log(epoch, loss):
            logger.info("victim epoch %d loss %.4f", epoch + 1, loss)

        self.weights_, self.history_ = diffnet.train(
            self.net_, weights, X, y, diffnet.softmax_cross_entropy,
            self.epochs, self.lr, self.batch_size, self.random_state, log,
        )  # fmt: skip
        self.classes_ = np.arange(self.num_classes)
        return self

    @classmethod
    def from_weights(cls, weights, input_shape=None):
        """Wrap a weight store (or an RTWF path) without training.

        ``input_shape`` defaults to the square image size implied by the dense layer.
        """
        if not isinstance(weights, dict):
            weights = diffnet.load_weights(weights)
        if "layer6.w" not in weights:
            raise diffnet.ShapeError("weights do not describe the victim architecture (no layer6.w)")
        num_classes, features = weights["layer6.w"].shape
        if input_shape is None:
            side = 4 * int(round(np.sqrt(features / 32)))
            input_shape = (side, side, 3)
        model = cls(num_classes=num_classes)
        model.net_ = diffnet.victim_network(num_classes, input_shape)
        model.net_.check_weights(weights)
        model.weights_ = weights
        model.classes_ = np.arange(num_classes)
        return model

    def save(self, path):
        check_is_fitted(self, "weights_")
        diffnet.save_weights(self.weights_, path)

    def decision_function(self, X, batch_size=256):
        check_is_fitted(self, "weights_")
        X = np.asarray(X)
        if X.ndim == 3:
            X = X[None]
        return np.concatenate(
            [self.net_.predict_logits(self.weights_, X[i : i + batch_size]) for i in range(0, len(X), batch_size)]
        )

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def logits(self, image: np.ndarray) -> np.ndarray:
        return self.decision_function(image[None])[0].astype(np.float64)

    def loss_and_input_grad(self, image: np.ndarray, label: int):
        """Cross-entropy of one ``(H, W, 3)`` image and its gradient w.r.t. the pixels."""
        check_is_fitted(self, "weights_")
        out, cache = self.net_.forward(self.weights_, image[None])
        loss, d_out = diffnet.softmax_cross_entropy(out.astype(np.float64), [label])
        d_img = self.net_.input_gradient(cache, d_out)[0]
        return loss, d_img.astype(np.float64), out[0].astype(np.float64)


def train_victim(data_dir, epochs=10, lr=0.001, seed=0, batch_size=32):
    """Train on the ``train`` split and report accuracy on both splits."""
    x_train, y_train, _ = load_split(data_dir, "train")
    model = ToyVictim(epochs=epochs, lr=lr, batch_size=batch_size, random_state=seed).fit(x_train, y_train)
    x_test, y_test, _ = load_split(data_dir, "test")
    model.train_accuracy_ = float(model.score(x_train, y_train))
    model.test_accuracy_ = float(model.score(x_test, y_test))
    return model


def evaluate(model, images, labels):
    """Accuracy and ``(C, C)`` confusion counts (rows = true class)."""
    labels = np.asarray(labels, dtype=np.intp)
    pred = model.predict(images)
    n = model.classes_.size
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return float(np.mean(pred == labels)), confusion
