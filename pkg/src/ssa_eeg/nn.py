"""Small CNN with hand-written forward/backward passes, float64 throughout.

Layers are stateless with respect to a forward call: ``forward`` returns the
output and a per-layer cache, ``backward`` consumes that cache and returns the
input gradient plus parameter gradients.  The model glues layers together and
owns parameters, batch-norm running statistics and the dropout RNG.

Default architecture for a 1 x C x C input (C = 32 gives 22426 parameters)::

    conv(8, 3x3, s2, p1) -> BN -> ReLU
    conv(16, 3x3, s2, p1) -> BN -> ReLU
    conv(32, 3x3, s2, p1) -> BN -> ReLU
    flatten -> dense(32) -> ReLU -> dropout(0.5) -> dense(2) -> softmax

Convolutions feeding batch norm carry no bias; the BN shift makes it redundant.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CacheError, ClassImbalanceError, ShapeError
from .signal import read_raw_f64, write_raw_f64

N_CLASSES = 2
DEFAULT_PARAM_COUNT_32 = 22426


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    bias: bool = True
    units: int = 0
    rate: float = 0.0

    def __post_init__(self):
        kinds = ("conv", "batchnorm", "relu", "flatten", "dense", "dropout", "softmax")
        if self.kind not in kinds:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.filters < 1 or self.kernel < 1 or self.stride < 1):
            raise ValueError("conv needs filters >= 1, kernel >= 1, stride >= 1")
        if self.kind == "dense" and self.units < 1:
            raise ValueError("dense needs units >= 1")
        if self.kind == "dropout" and not 0 <= self.rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")


def default_architecture(filters=(8, 16, 32), dense_units: int = 32,
                         dropout: float = 0.5) -> list[LayerSpec]:
    specs = []
    for f in filters:
        specs += [LayerSpec("conv", filters=f, kernel=3, stride=2, pad=1, bias=False),
                  LayerSpec("batchnorm"), LayerSpec("relu")]
    specs += [LayerSpec("flatten"), LayerSpec("dense", units=dense_units), LayerSpec("relu"),
              LayerSpec("dropout", rate=dropout), LayerSpec("dense", units=N_CLASSES),
              LayerSpec("softmax")]
    return specs


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class Layer:
    params: dict
    trainable = True

    def __init__(self):
        self.params = {}
        self.buffers = {}

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, training, rng):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, in_ch, spec: LayerSpec, rng):
        super().__init__()
        self.k, self.stride, self.pad = spec.kernel, spec.stride, spec.pad
        fan_in = in_ch * self.k * self.k
        limit = np.sqrt(6.0 / fan_in)
        self.params["W"] = rng.uniform(-limit, limit, size=(spec.filters, in_ch, self.k, self.k))
        if spec.bias:
            self.params["b"] = np.zeros(spec.filters)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        f = self.params["W"].shape[0]
        return (f, (h + 2 * self.pad - self.k) // self.stride + 1,
                (w + 2 * self.pad - self.k) // self.stride + 1)

    def forward(self, x, training, rng):
        W = self.params["W"]
        f, c, k, _ = W.shape
        if x.shape[1] != c:
            raise ShapeError(f"conv expects {c} input channels, got {x.shape[1]}")
        s, p = self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        b, _, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
        out = cols @ W.reshape(f, -1).T
        if "b" in self.params:
            out += self.params["b"]
        out = out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (x.shape, cols, ho, wo)

    def backward(self, dout, cache):
        x_shape, cols, ho, wo = cache
        W = self.params["W"]
        f, c, k, _ = W.shape
        s, p = self.stride, self.pad
        b = x_shape[0]
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
        grads = {"W": (d2.T @ cols).reshape(W.shape)}
        if "b" in self.params:
            grads["b"] = d2.sum(axis=0)
        dcols = (d2 @ W.reshape(f, -1)).reshape(b, ho, wo, c, k, k)
        dxp = np.zeros((b, c, x_shape[2] + 2 * p, x_shape[3] + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + x_shape[2], p:p + x_shape[3]] if p else dxp
        return dx, grads


class BatchNorm(Layer):
    """Per-channel normalization over batch (and spatial) axes."""

    def __init__(self, n_features, momentum=0.9, eps=1e-6):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(n_features)
        self.params["beta"] = np.zeros(n_features)
        self.buffers["running_mean"] = np.zeros(n_features)
        self.buffers["running_var"] = np.ones(n_features)

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bshape(self, x):
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def forward(self, x, training, rng):
        axes, sh = self._axes(x), self._bshape(x)
        g, be = self.params["gamma"].reshape(sh), self.params["beta"].reshape(sh)
        if training:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mu
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(sh)) * inv.reshape(sh)
        return g * xhat + be, (xhat, inv, training)

    def backward(self, dout, cache):
        xhat, inv, training = cache
        axes, sh = self._axes(dout), self._bshape(dout)
        grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        dxhat = dout * self.params["gamma"].reshape(sh)
        if not training:
            return dxhat * inv.reshape(sh), grads
        m = dout.size / dout.shape[1]
        dx = (inv.reshape(sh) / m) * (
            m * dxhat - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, grads


class ReLU(Layer):
    trainable = False

    def forward(self, x, training, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, mask):
        return dout * mask, {}


class Flatten(Layer):
    trainable = False

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), {}


class Dense(Layer):
    def __init__(self, fan_in, units, rng):
        super().__init__()
        limit = np.sqrt(6.0 / fan_in)
        self.params["W"] = rng.uniform(-limit, limit, size=(fan_in, units))
        self.params["b"] = np.zeros(units)

    def out_shape(self, in_shape):
        return (self.params["W"].shape[1],)

    def forward(self, x, training, rng):
        if x.ndim != 2 or x.shape[1] != self.params["W"].shape[0]:
            raise ShapeError(f"dense expects (B, {self.params['W'].shape[0]}), got {x.shape}")
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dout, x):
        return dout @ self.params["W"].T, {"W": x.T @ dout, "b": dout.sum(axis=0)}


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    trainable = False

    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x, training, rng):
        if not training or self.rate == 0:
            return x, None
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dout, mask):
        return (dout if mask is None else dout * mask), {}


class Identity(Layer):
    """Terminal softmax marker; probabilities are taken by the loss/predict."""

    trainable = False

    def forward(self, x, training, rng):
        return x, None

    def backward(self, dout, cache):
        return dout, {}


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, reduction: str = "mean"):
    """Softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=int)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].sum()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    if reduction == "mean":
        return loss / len(labels), grad / len(labels)
    return loss, grad


@dataclass
class ForwardCache:
    layer_caches: list
    version: int
    training: bool


class CnnModel:
    def __init__(self, input_shape=(1, 32, 32), specs: list[LayerSpec] | None = None,
                 seed: int = 0):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.specs = list(specs) if specs is not None else default_architecture()
        self.seed = int(seed)
        init_rng = np.random.default_rng([self.seed, 0])
        self.dropout_rng = np.random.default_rng([self.seed, 1])
        self.layers: list[Layer] = []
        shape = self.input_shape
        for spec in self.specs:
            layer = self._build(spec, shape, init_rng)
            shape = layer.out_shape(shape)
            self.layers.append(layer)
        self.output_shape = shape
        self.version = 0

    @staticmethod
    def _build(spec: LayerSpec, shape, rng) -> Layer:
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"conv after a flattened layer (shape {shape})")
            return Conv2D(shape[0], spec, rng)
        if spec.kind == "batchnorm":
            return BatchNorm(shape[0])
        if spec.kind == "relu":
            return ReLU()
        if spec.kind == "flatten":
            return Flatten()
        if spec.kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"dense needs a flattened input, got {shape}")
            return Dense(shape[0], spec.units, rng)
        if spec.kind == "dropout":
            return Dropout(spec.rate)
        return Identity()

    # -- parameters -------------------------------------------------------

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield (i, name), p

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers.items():
                yield (i, name), b

    @property
    def n_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def set_param(self, key, value) -> None:
        i, name = key
        self.layers[i].params[name] = np.asarray(value, dtype=np.float64).reshape(
            self.layers[i].params[name].shape)
        self.version += 1

    def zero_(self) -> "CnnModel":
        for key, p in list(self.named_params()):
            self.set_param(key, np.zeros_like(p))
        return self

    # -- passes -----------------------------------------------------------

    def forward(self, x, training: bool = False, rng=None):
        """Logits (B x 2) and the cache needed by ``backward``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected (B, {self.input_shape}), got {x.shape}")
        rng = rng if rng is not None else self.dropout_rng
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, training, rng)
            caches.append(c)
        return x, ForwardCache(caches, self.version, training)

    def backward(self, cache: ForwardCache, grad_logits) -> dict:
        if not isinstance(cache, ForwardCache) or cache.version != self.version:
            raise CacheError("cache does not belong to the current parameters; run forward again")
        if not cache.training:
            raise CacheError("backward needs a training-mode forward cache")
        grads = {}
        d = np.asarray(grad_logits, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(d, cache.layer_caches[i])
            for name, v in g.items():
                grads[(i, name)] = v
        return grads

    def predict_proba(self, x) -> np.ndarray:
        logits, _ = self.forward(x, training=False)
        return softmax(logits)

    def loss(self, x, y, training=True, rng=None) -> float:
        logits, _ = self.forward(x, training, rng)
        return cross_entropy(logits, y)[0]

    # -- checkpoints --------------------------------------------------------

    def state_vector(self) -> np.ndarray:
        parts = [p.ravel() for _, p in self.named_params()]
        parts += [b.ravel() for _, b in self.named_buffers()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def load_state_vector(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64).ravel()
        pos = 0
        for key, p in list(self.named_params()):
            self.layers[key[0]].params[key[1]] = vec[pos:pos + p.size].reshape(p.shape).copy()
            pos += p.size
        for key, b in list(self.named_buffers()):
            self.layers[key[0]].buffers[key[1]] = vec[pos:pos + b.size].reshape(b.shape).copy()
            pos += b.size
        if pos != vec.size:
            raise ShapeError(f"state vector has {vec.size} values, model needs {pos}")
        self.version += 1

    def save(self, directory, hyper: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_raw_f64(directory / "params.f64", self.state_vector()[None, :], 0.0)
        manifest = {
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "layers": [asdict(s) for s in self.specs],
            "n_params": self.n_params,
            "hyper": hyper or {},
        }
        (directory / "model.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "CnnModel":
        directory = Path(directory)
        manifest = json.loads((directory / "model.json").read_text())
        model = cls(tuple(manifest["input_shape"]),
                    [LayerSpec(**s) for s in manifest["layers"]], manifest["seed"])
        vec, _ = read_raw_f64(directory / "params.f64")
        model.load_state_vector(vec)
        return model


def default_model(n_channels: int = 32, seed: int = 0, filters=(8, 16, 32),
                  dense_units: int = 32, dropout: float = 0.5) -> CnnModel:
    return CnnModel((1, n_channels, n_channels),
                    default_architecture(filters, dense_units, dropout), seed)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    epochs: int = 60
    batch: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainResult:
    model: CnnModel
    loss_history: list[float] = field(default_factory=list)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, model: CnnModel, grads: dict) -> None:
        if self.lr == 0:
            return
        self.t += 1
        for key, p in list(model.named_params()):
            g = grads[key]
            m = self.m.get(key, np.zeros_like(p))
            v = self.v.get(key, np.zeros_like(p))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[key], self.v[key] = m, v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            model.layers[key[0]].params[key[1]] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        model.version += 1


def monitor_loss(model: CnnModel, x, y) -> float:
    """Full-set loss with batch statistics and no dropout.

    Depends on the parameters only (not on running statistics or the dropout
    stream), so it is constant when nothing is learned.
    """
    saved = {k: b.copy() for k, b in model.named_buffers()}
    drops = [(layer, layer.rate) for layer in model.layers if isinstance(layer, Dropout)]
    for layer, _ in drops:
        layer.rate = 0.0
    try:
        loss = model.loss(x, y, training=True)
    finally:
        for layer, rate in drops:
            layer.rate = rate
        for (i, name), b in saved.items():
            model.layers[i].buffers[name] = b
    return float(loss)


def train(model: CnnModel, x, y, hyper: TrainHyper | None = None) -> TrainResult:
    """Mini-batch Adam on mean softmax cross-entropy.

    ``loss_history`` has ``epochs + 1`` entries: the monitor loss before
    training and after every epoch.
    """
    hyper = hyper or TrainHyper()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    y = np.asarray(y, dtype=int)
    counts = np.bincount(y, minlength=N_CLASSES)
    if np.any(counts < 2):
        raise ClassImbalanceError(f"need >= 2 examples per class, got counts {counts.tolist()}")
    rng = np.random.default_rng([hyper.seed, 2])
    opt = Adam(hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
    history = [monitor_loss(model, x, y)]
    n = len(y)
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch):
            idx = order[start:start + hyper.batch]
            if idx.size < 2:
                # batch norm needs more than one example per batch
                continue
            logits, cache = model.forward(x[idx], training=True)
            _, dlogits = cross_entropy(logits, y[idx])
            opt.step(model, model.backward(cache, dlogits))
        history.append(monitor_loss(model, x, y))
    return TrainResult(model, history)


def predict(model: CnnModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Class per row (argmax, ties to class 0) and the softmax probabilities."""
    probs = model.predict_proba(x)
    return predict_from_probs(probs), probs


def predict_from_probs(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. class 0 on ties
    return np.argmax(probs, axis=1)
