"""A small NHWC network kernel with hand-written forward and backward passes.

Enough to express the toy victim classifier and a U-Net style predictor:
convolutions with same-padding, inference-mode batch norm, ReLU, 2x2 max pool,
2x2 nearest upsampling, channel concatenation with an earlier layer, dense
layers, plus softmax cross-entropy, Adam and a binary weight file format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# --------------------------------------------------------------------- layers


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    name: str = ""


@dataclass(frozen=True)
class BatchNormInference:
    name: str = ""
    eps: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class UpSample:
    pass


@dataclass(frozen=True)
class Concat:
    source: int


@dataclass(frozen=True)
class Dense:
    out_dim: int
    name: str = ""


class ShapeError(ValueError):
    pass


@dataclass
class Network:
    """An ordered layer list applied to ``(B, H, W, C)`` inputs.

    ``Concat(source=i)`` appends the output of layer ``i`` along channels.
    """

    layers: list
    input_shape: tuple
    dtype: type = np.float32
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        named = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Conv, Dense, BatchNormInference)) and not layer.name:
                layer = type(layer)(**{**layer.__dict__, "name": f"layer{i}"})
            named.append(layer)
        self.layers = named
        names = [l.name for l in named if hasattr(l, "name")]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate layer names: {names}")
        self.shapes = self._propagate()

    def _propagate(self):
        shape = tuple(self.input_shape)
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                h, w, _ = shape
                shape = (-(-h // layer.stride), -(-w // layer.stride), layer.out_channels)
            elif isinstance(layer, MaxPool):
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif isinstance(layer, UpSample):
                shape = (shape[0] * 2, shape[1] * 2, shape[2])
            elif isinstance(layer, Concat):
                if not 0 <= layer.source < i:
                    raise ShapeError(f"layer {i}: concat source {layer.source} is not an earlier layer")
                other = shapes[layer.source]
                if other[:2] != shape[:2]:
                    raise ShapeError(f"layer {i}: cannot concat {shape} with {other}")
                shape = (shape[0], shape[1], shape[2] + other[2])
            elif isinstance(layer, Dense):
                shape = (layer.out_dim,)
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self):
        return self.shapes[-1]

    def weight_shapes(self) -> dict:
        out = {}
        shape = tuple(self.input_shape)
        for layer, nxt in zip(self.layers, self.shapes):
            if isinstance(layer, Conv):
                out[f"{layer.name}.w"] = (layer.out_channels, shape[-1], layer.kernel, layer.kernel)
                out[f"{layer.name}.b"] = (layer.out_channels,)
            elif isinstance(layer, Dense):
                out[f"{layer.name}.w"] = (layer.out_dim, int(np.prod(shape)))
                out[f"{layer.name}.b"] = (layer.out_dim,)
            elif isinstance(layer, BatchNormInference):
                for part in ("gamma", "beta", "mean", "var"):
                    out[f"{layer.name}.{part}"] = (shape[-1],)
            shape = nxt
        return out

    def init_weights(self, seed=0) -> dict:
        """He-normal weights, zero biases, identity batch-norm statistics."""
        rng = np.random.default_rng(seed)
        store = {}
        for name, shape in self.weight_shapes().items():
            part = name.rsplit(".", 1)[1]
            if part == "w":
                fan_in = int(np.prod(shape[1:]))
                store[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
            elif part in ("gamma", "var"):
                store[name] = np.ones(shape, dtype=np.float32)
            else:
                store[name] = np.zeros(shape, dtype=np.float32)
        return store

    def check_weights(self, weights: dict) -> None:
        for name, shape in self.weight_shapes().items():
            if name not in weights:
                raise ShapeError(f"missing weight {name!r}")
            if tuple(weights[name].shape) != tuple(shape):
                raise ShapeError(f"weight {name!r} has shape {weights[name].shape}, expected {shape}")

    # ------------------------------------------------------------ forward

    def forward(self, weights: dict, x: np.ndarray):
        """Returns ``(output, cache)``; ``cache`` feeds :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
        w = {k: np.asarray(v, dtype=self.dtype) for k, v in weights.items()}
        outputs, aux = [], []
        cur = x
        for layer in self.layers:
            inp = cur
            cur, extra = _FORWARD[type(layer)](layer, w, cur, outputs)
            aux.append((inp, extra))
            outputs.append(cur)
        return cur, {"aux": aux, "outputs": outputs, "weights": w, "batch": x.shape[0]}

    def predict_logits(self, weights: dict, x: np.ndarray) -> np.ndarray:
        return self.forward(weights, x)[0]

    # ----------------------------------------------------------- backward

    def backward(self, cache: dict, upstream: np.ndarray, weight_grads: bool = True):
        """Returns ``(d_input, d_weights)`` for an upstream gradient on the output."""
        upstream = np.asarray(upstream, dtype=self.dtype)
        outputs = cache["outputs"]
        if upstream.shape != outputs[-1].shape:
            raise ShapeError(f"upstream shape {upstream.shape} does not match output {outputs[-1].shape}")
        w = cache["weights"]
        grads = {}
        pending = [None] * len(self.layers)
        pending[-1] = upstream
        d_in = None
        for i in range(len(self.layers) - 1, -1, -1):
            g = pending[i]
            if g is None:
                g = np.zeros_like(outputs[i])
            layer = self.layers[i]
            inp, extra = cache["aux"][i]
            d_in, extra_grads = _BACKWARD[type(layer)](layer, w, inp, extra, g, weight_grads)
            for name, value in extra_grads.items():
                if name.startswith("@"):
                    src = int(name[1:])
                    pending[src] = value if pending[src] is None else pending[src] + value
                else:
                    grads[name] = value
            if i > 0:
                pending[i - 1] = d_in if pending[i - 1] is None else pending[i - 1] + d_in
        return d_in, grads

    def input_gradient(self, cache: dict, upstream: np.ndarray) -> np.ndarray:
        return self.backward(cache, upstream, weight_grads=False)[0]

    def weight_gradient(self, cache: dict, upstream: np.ndarray) -> dict:
        return self.backward(cache, upstream, weight_grads=True)[1]


def _pad_same(x, k):
    p = k // 2
    return np.pad(x, ((0, 0), (p, k - 1 - p), (p, k - 1 - p), (0, 0))), p


def _conv_forward(layer, w, x, outputs):
    k, s = layer.kernel, layer.stride
    xp, _ = _pad_same(x, k)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    b, ho, wo = win.shape[:3]
    cols = win.reshape(b * ho * wo, -1)
    weight = w[f"{layer.name}.w"].reshape(layer.out_channels, -1)
    out = cols @ weight.T + w[f"{layer.name}.b"]
    return out.reshape(b, ho, wo, layer.out_channels), (cols, xp.shape)


def _conv_backward(layer, w, x, extra, g, weight_grads):
    cols, padded_shape = extra
    k, s = layer.kernel, layer.stride
    b, ho, wo, co = g.shape
    g2 = g.reshape(-1, co)
    weight = w[f"{layer.name}.w"]
    grads = {}
    if weight_grads:
        grads[f"{layer.name}.w"] = (g2.T @ cols).reshape(weight.shape)
        grads[f"{layer.name}.b"] = g2.sum(axis=0)
    dcols = (g2 @ weight.reshape(co, -1)).reshape(b, ho, wo, x.shape[-1], k, k)
    dxp = np.zeros(padded_shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[..., i, j]
    p = k // 2
    return dxp[:, p : p + x.shape[1], p : p + x.shape[2], :], grads


def _bn_forward(layer, w, x, outputs):
    n = layer.name
    inv = 1.0 / np.sqrt(w[f"{n}.var"] + layer.eps)
    xhat = (x - w[f"{n}.mean"]) * inv
    return xhat * w[f"{n}.gamma"] + w[f"{n}.beta"], (xhat, inv)


def _bn_backward(layer, w, x, extra, g, weight_grads):
    xhat, inv = extra
    n = layer.name
    grads = {}
    if weight_grads:
        axes = tuple(range(g.ndim - 1))
        grads[f"{n}.gamma"] = np.sum(g * xhat, axis=axes)
        grads[f"{n}.beta"] = np.sum(g, axis=axes)
    return g * w[f"{n}.gamma"] * inv, grads


def _relu_forward(layer, w, x, outputs):
    return np.maximum(x, 0), None


def _relu_backward(layer, w, x, extra, g, weight_grads):
    return g * (x > 0), {}


def _pool_forward(layer, w, x, outputs):
    b, h, wd, c = x.shape
    h2, w2 = h // 2, wd // 2
    blocks = x[:, : 2 * h2, : 2 * w2].reshape(b, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(b, h2, w2, c, 4)
    arg = np.argmax(blocks, axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def _pool_backward(layer, w, x, arg, g, weight_grads):
    b, h, wd, c = x.shape
    h2, w2 = h // 2, wd // 2
    blocks = np.zeros((b, h2, w2, c, 4), dtype=g.dtype)
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    blocks = blocks.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * h2, 2 * w2, c)
    dx = np.zeros_like(x, dtype=g.dtype)
    dx[:, : 2 * h2, : 2 * w2] = blocks
    return dx, {}


def _up_forward(layer, w, x, outputs):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), None


def _up_backward(layer, w, x, extra, g, weight_grads):
    b, h, wd, c = x.shape
    return g.reshape(b, h, 2, wd, 2, c).sum(axis=(2, 4)), {}


def _concat_forward(layer, w, x, outputs):
    other = outputs[layer.source]
    return np.concatenate([x, other], axis=-1), x.shape[-1]


def _concat_backward(layer, w, x, split, g, weight_grads):
    return g[..., :split], {f"@{layer.source}": g[..., split:]}


def _dense_forward(layer, w, x, outputs):
    flat = x.reshape(x.shape[0], -1)
    return flat @ w[f"{layer.name}.w"].T + w[f"{layer.name}.b"], flat


def _dense_backward(layer, w, x, flat, g, weight_grads):
    grads = {}
    if weight_grads:
        grads[f"{layer.name}.w"] = g.T @ flat
        grads[f"{layer.name}.b"] = g.sum(axis=0)
    return (g @ w[f"{layer.name}.w"]).reshape(x.shape), grads


_FORWARD = {
    Conv: _conv_forward,
    BatchNormInference: _bn_forward,
    ReLU: _relu_forward,
    MaxPool: _pool_forward,
    UpSample: _up_forward,
    Concat: _concat_forward,
    Dense: _dense_forward,
}
_BACKWARD = {
    Conv: _conv_backward,
    BatchNormInference: _bn_backward,
    ReLU: _relu_backward,
    MaxPool: _pool_backward,
    UpSample: _up_backward,
    Concat: _concat_backward,
    Dense: _dense_backward,
}


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise ValueError(f"labels must lie in [0, {logits.shape[-1]})")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -np.mean(logp[rows, labels])
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / len(labels)


# ----------------------------------------------------------------- Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(weights: dict, grads: dict, state: AdamState, lr) -> dict:
    """One bias-corrected Adam descent step.

    ``lr`` is a float or a dict of per-entry rates. Entries without a gradient
    are left untouched.
    """
    state.step += 1
    t = state.step
    out = dict(weights)
    for name, g in grads.items():
        m = state.m.get(name, 0.0) * state.beta1 + (1.0 - state.beta1) * g
        v = state.v.get(name, 0.0) * state.beta2 + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1.0 - state.beta1**t)
        vhat = v / (1.0 - state.beta2**t)
        rate = lr[name] if isinstance(lr, dict) else lr
        w = weights[name]
        out[name] = (w - rate * mhat / (np.sqrt(vhat) + state.eps)).astype(np.asarray(w).dtype)
    return out


# ------------------------------------------------------------ weight files

_MAGIC = b"RTWF"
_VERSION = 1


class WeightFileError(ValueError):
    pass


def save_weights(store: dict, path) -> None:
    """Write ``store`` in the RTWF format (little-endian float32 payloads)."""
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(store))]
    for name, arr in store.items():
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_weights(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise WeightFileError(f"{path}: cannot read weight file ({exc.strerror})") from exc

    def take(n, pos):
        if pos + n > len(raw):
            raise WeightFileError(f"{path}: truncated weight file")
        return raw[pos : pos + n], pos + n

    head, pos = take(4, 0)
    if head != _MAGIC:
        raise WeightFileError(f"{path}: bad magic {head!r}, not an RTWF weight file")
    chunk, pos = take(8, pos)
    version, count = struct.unpack("<II", chunk)
    if version != _VERSION:
        raise WeightFileError(f"{path}: unsupported RTWF version {version}")
    store = {}
    for _ in range(count):
        chunk, pos = take(2, pos)
        (nlen,) = struct.unpack("<H", chunk)
        name, pos = take(nlen, pos)
        chunk, pos = take(1, pos)
        (rank,) = struct.unpack("<B", chunk)
        chunk, pos = take(4 * rank, pos)
        dims = struct.unpack(f"<{rank}I", chunk)
        chunk, pos = take(4 * int(np.prod(dims, dtype=np.int64)), pos)
        store[name.decode("utf-8")] = np.frombuffer(chunk, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(raw):
        raise WeightFileError(f"{path}: {len(raw) - pos} trailing bytes after last entry")
    return store


# ---------------------------------------------------------- architectures


def victim_network(num_classes: int = 5, input_shape=(64, 64, 3), dtype=np.float32) -> Network:
    layers = [
        Conv(16, 3, 1), ReLU(), MaxPool(),
        Conv(32, 3, 1), ReLU(), MaxPool(),
        Dense(num_classes),
    ]  # fmt: skip
    return Network(layers, tuple(input_shape), dtype)


def unet_network(widths=(8, 16, 32), input_shape=(64, 64, 3), batchnorm=False, dtype=np.float32) -> Network:
    """Two-level encoder/decoder with skip concats; one nonnegative output channel."""
    layers = []

    def block(width):
        for _ in range(2):
            layers.append(Conv(width, 3, 1))
            if batchnorm:
                layers.append(BatchNormInference())
            layers.append(ReLU())
        return len(layers) - 1

    skips = []
    for width in widths[:-1]:
        skips.append(block(width))
        layers.append(MaxPool())
    block(widths[-1])
    for width, skip in zip(reversed(widths[:-1]), reversed(skips)):
        layers.append(UpSample())
        layers.append(Concat(skip))
        block(width)
    layers += [Conv(1, 1, 1), ReLU()]
    return Network(layers, tuple(input_shape), dtype)


# ---------------------------------------------------------------- trainer


def train(net: Network, weights: dict, inputs, targets, loss_fn, epochs: int, lr: float,
          batch_size: int = 32, seed: int = 0, log=None):
    """Minibatch Adam. ``loss_fn(output, batch_targets) -> (loss, d_output)``.

    Returns ``(weights, per-epoch mean losses)``.
    """
    rng = np.random.default_rng(seed)
    state = AdamState()
    history = []
    n = len(inputs)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            out, cache = net.forward(weights, inputs[idx])
            loss, d_out = loss_fn(out, targets[idx])
            grads = net.weight_gradient(cache, d_out)
            weights = adam_update(weights, grads, state, lr)
            total += loss * len(idx)
        history.append(total / n)
        if log is not None:
            log(epoch, history[-1])
    return weights, history
