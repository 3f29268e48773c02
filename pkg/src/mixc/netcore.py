"""Small numpy CNN: layers, soft-label cross-entropy, optimizers, gradient checks.

Activations are kept NHWC internally; the public ``forward``/``backward``
take NCHW batches. Conv kernels are stored HWIO, i.e. ``(3, 3, in, out)``.
Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

N_CLASSES = 4
EPS_CLIP = 1e-12
LABEL_TOL = 1e-9


class ShapeError(ValueError):
    """Raised when a batch or parameter does not fit the model spec."""

    def __init__(self, msg: str, layer: int | None = None):
        self.layer = layer
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(prefix + msg)


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class MaxPool:
    kind: str = field(default="maxpool", init=False)


@dataclass(frozen=True)
class GlobalAvgPool:
    kind: str = field(default="gap", init=False)


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: str = field(default="dense", init=False)


Layer = Union[Conv2D, ReLU, MaxPool, GlobalAvgPool, Dense]
_LAYER_TYPES = {"conv2d": Conv2D, "relu": ReLU, "maxpool": MaxPool, "gap": GlobalAvgPool, "dense": Dense}


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self):
        ch, flat = self.in_channels, False
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                if flat:
                    raise ShapeError("conv after global pooling", i)
                if layer.in_ch != ch:
                    raise ShapeError(f"expects {layer.in_ch} input channels, got {ch}", i)
                ch = layer.out_ch
            elif isinstance(layer, MaxPool):
                if flat:
                    raise ShapeError("pooling after global pooling", i)
            elif isinstance(layer, GlobalAvgPool):
                if flat:
                    raise ShapeError("global pooling applied twice", i)
                flat = True
            elif isinstance(layer, Dense):
                if not flat:
                    raise ShapeError("dense layer needs flattened input", i)
                if layer.in_features != ch:
                    raise ShapeError(f"expects {layer.in_features} features, got {ch}", i)
                ch = layer.out_features
            elif not isinstance(layer, ReLU):
                raise ShapeError(f"unknown layer {layer!r}", i)
        last = self.layers[-1] if self.layers else None
        if not isinstance(last, Dense) or last.out_features != N_CLASSES:
            raise ShapeError(f"final layer must be Dense with {N_CLASSES} outputs", len(self.layers) - 1)

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                shapes += [(3, 3, layer.in_ch, layer.out_ch), (layer.out_ch,)]
            elif isinstance(layer, Dense):
                shapes += [(layer.in_features, layer.out_features), (layer.out_features,)]
        return shapes

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {"kind": layer.kind}
            if isinstance(layer, Conv2D):
                d.update(in_ch=layer.in_ch, out_ch=layer.out_ch)
            elif isinstance(layer, Dense):
                d.update(in_features=layer.in_features, out_features=layer.out_features)
            layers.append(d)
        return {"in_channels": self.in_channels, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for ld in d["layers"]:
            kw = {k: v for k, v in ld.items() if k != "kind"}
            layers.append(_LAYER_TYPES[ld["kind"]](**kw))
        return cls(int(d["in_channels"]), tuple(layers))


def spraynet_spec(in_channels: int = 3, widths=(8, 16, 32)) -> ModelSpec:
    """Conv-ReLU-Pool blocks, global average pooling, one output unit per class."""
    layers = []
    ch = in_channels
    for w in widths:
        layers += [Conv2D(ch, w), ReLU(), MaxPool()]
        ch = w
    layers += [GlobalAvgPool(), Dense(ch, N_CLASSES)]
    return ModelSpec(in_channels, tuple(layers))


class Model:
    def __init__(self, spec: ModelSpec, params: list[np.ndarray]):
        shapes = spec.param_shapes()
        if len(params) != len(shapes):
            raise ShapeError(f"expected {len(shapes)} parameter tensors, got {len(params)}")
        for k, (p, s) in enumerate(zip(params, shapes)):
            if tuple(p.shape) != s:
                raise ShapeError(f"parameter {k} has shape {tuple(p.shape)}, expected {s}")
        self.spec = spec
        self.params = [np.ascontiguousarray(p, dtype=np.float64) for p in params]

    @classmethod
    def init(cls, spec: ModelSpec, seed: int) -> "Model":
        """He-uniform weights (fan-in), zero biases."""
        rng = np.random.default_rng(seed)
        params = []
        for shape in spec.param_shapes():
            if len(shape) == 1:
                params.append(np.zeros(shape))
                continue
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-limit, limit, size=shape))
        return cls(spec, params)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "Model":
        return cls(spec, [np.zeros(s) for s in spec.param_shapes()])

    def copy(self) -> "Model":
        return Model(self.spec, [p.copy() for p in self.params])

    def n_params(self) -> int:
        return sum(p.size for p in self.params)


# ---------------------------------------------------------------------------
# layer kernels (NHWC)

_OFFSETS = [(i, j) for i in range(3) for j in range(3)]


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    s = xp.strides
    view = as_strided(xp, (n, h, w, 3, 3, c), (s[0], s[1], s[2], s[1], s[2], s[3]), writeable=False)
    return view.reshape(n * h * w, 9 * c)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, 3, 3, c)
    dx = d[:, :, :, 1, 1, :].copy()
    # offset (i, j) of output pixel (y, x) reads input pixel (y + i - 1, x + j - 1)
    for i, j in _OFFSETS:
        if (i, j) == (1, 1):
            continue
        src_y, dst_y = slice(max(0, 1 - i), h - max(0, i - 1)), slice(max(0, i - 1), h - max(0, 1 - i))
        src_x, dst_x = slice(max(0, 1 - j), w - max(0, j - 1)), slice(max(0, j - 1), w - max(0, 1 - j))
        dx[:, dst_y, dst_x] += d[:, src_y, src_x, i, j]
    return dx


def conv_forward(x, weight, bias):
    n, h, w, _ = x.shape
    cols = _im2col(x)
    out = cols @ weight.reshape(-1, weight.shape[-1]) + bias
    return out.reshape(n, h, w, -1), cols


def conv_backward(dout, cols, x_shape, weight, need_dx=True):
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = (cols.T @ d2).reshape(weight.shape)
    db = d2.sum(axis=0)
    dx = _col2im(d2 @ weight.reshape(-1, weight.shape[-1]).T, x_shape) if need_dx else None
    return dx, dw, db


def maxpool_forward(x, need_arg=True):
    """2x2 max pooling; ``arg`` records the winning corner (0..3, row-major),
    the first one on ties."""
    n, h, w, c = x.shape
    xr = x.reshape(n, h // 2, 2, w // 2, 2, c)
    rows = np.maximum(xr[:, :, :, :, 0], xr[:, :, :, :, 1])
    out = np.maximum(rows[:, :, 0], rows[:, :, 1])
    if not need_arg:
        return out, None
    # leftmost winner within each row, then the upper row on ties
    right = xr[:, :, :, :, 1] > xr[:, :, :, :, 0]
    bottom = rows[:, :, 1] > rows[:, :, 0]
    arg = 2 * bottom.astype(np.int8) + np.where(bottom, right[:, :, 1], right[:, :, 0])
    return out, arg


def maxpool_backward(dout, arg, x_shape):
    dx = np.zeros(x_shape)
    for k, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, i::2, j::2] = np.where(arg == k, dout, 0.0)
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# forward / backward


def _check_batch(model: Model, batch: np.ndarray):
    if batch.ndim != 4:
        raise ShapeError(f"batch must be N,C,H,W, got shape {batch.shape}", 0)
    if batch.shape[1] != model.spec.in_channels:
        raise ShapeError(f"expects {model.spec.in_channels} input channels, got {batch.shape[1]}", 0)


_FUSED = "fused"


def _run(model: Model, batch: np.ndarray, keep: bool):
    _check_batch(model, batch)
    batch = np.asarray(batch, dtype=np.float64)
    # Gray images loaded into every channel make the first convolution a
    # one-channel convolution with channel-summed kernels (same sum, fewer FLOPs).
    tied = isinstance(model.spec.layers[0], Conv2D) and batch.shape[1] > 1 and all(np.array_equal(batch[:, 0], batch[:, c]) for c in range(1, batch.shape[1]))
    x = np.ascontiguousarray((batch[:, :1] if tied else batch).transpose(0, 2, 3, 1))
    caches = []
    it = iter(model.params)
    for i, layer in enumerate(model.spec.layers):
        if isinstance(layer, Conv2D):
            w, b = next(it), next(it)
            if i == 0 and tied:
                w = w.sum(axis=2, keepdims=True)
            shape = x.shape
            x, cols = conv_forward(x, w, b)
            caches.append((shape, cols, w) if keep else None)
        elif isinstance(layer, ReLU):
            if i + 1 < len(model.spec.layers) and isinstance(model.spec.layers[i + 1], MaxPool):
                caches.append(_FUSED)  # applied after the pool below
                continue
            x = np.maximum(x, 0.0)
            caches.append(x > 0 if keep else None)
        elif isinstance(layer, MaxPool):
            if x.shape[1] % 2 or x.shape[2] % 2:
                raise ShapeError(f"max pooling needs even spatial size, got {x.shape[1]}x{x.shape[2]}", i)
            shape = x.shape
            x, arg = maxpool_forward(x, need_arg=keep)
            mask = None
            if i > 0 and caches[i - 1] is _FUSED:
                # relu is monotone, so pooling first gives the same values on a quarter of the pixels
                x = np.maximum(x, 0.0)
                mask = x > 0
            caches.append((shape, arg, mask) if keep else None)
        elif isinstance(layer, GlobalAvgPool):
            caches.append(x.shape if keep else None)
            x = x.mean(axis=(1, 2))
        elif isinstance(layer, Dense):
            w, b = next(it), next(it)
            caches.append(x if keep else None)
            x = x @ w + b
    return x, caches


def logits(model: Model, batch: np.ndarray) -> np.ndarray:
    return _run(model, batch, keep=False)[0]


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Class probabilities, shape (N, 4)."""
    return softmax(logits(model, batch))


def check_soft_labels(target: np.ndarray) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 2 or target.shape[1] != N_CLASSES:
        raise ValueError(f"targets must have shape (N, {N_CLASSES}), got {target.shape}")
    if np.any(target < 0) or np.any(target > 1):
        raise ValueError("target entries must lie in [0, 1]")
    bad = np.abs(target.sum(axis=1) - 1.0) > LABEL_TOL
    if np.any(bad):
        raise ValueError(f"target row {int(np.argmax(bad))} does not sum to 1")
    return target


def soft_cross_entropy(pred: np.ndarray, target: np.ndarray, reduction: str = "mean") -> float:
    """-sum_c t_c log(max(p_c, eps)), averaged (or summed) over rows."""
    target = check_soft_labels(target)
    per_row = -(target * np.log(np.maximum(pred, EPS_CLIP))).sum(axis=1)
    if reduction == "sum":
        return float(per_row.sum())
    return float(per_row.mean())


def backward(model: Model, batch: np.ndarray, target: np.ndarray, reduction: str = "mean"):
    """Returns (loss, probs, grads) with one gradient per parameter tensor."""
    target = check_soft_labels(target)
    out, caches = _run(model, batch, keep=True)
    probs = softmax(out)
    loss = soft_cross_entropy(probs, target, reduction)
    scale = 1.0 / len(batch) if reduction == "mean" else 1.0
    d = (probs - target) * scale

    grads: list[np.ndarray] = [None] * len(model.params)
    k = len(model.params)
    for i in range(len(model.spec.layers) - 1, -1, -1):
        layer, cache = model.spec.layers[i], caches[i]
        if isinstance(layer, Dense):
            k -= 2
            w = model.params[k]
            grads[k] = cache.T @ d
            grads[k + 1] = d.sum(axis=0)
            d = d @ w.T
        elif isinstance(layer, GlobalAvgPool):
            n, h, w_, c = cache
            d = np.broadcast_to(d[:, None, None, :] / (h * w_), cache).copy()
        elif isinstance(layer, MaxPool):
            shape, arg, mask = cache
            d = maxpool_backward(d if mask is None else d * mask, arg, shape)
        elif isinstance(layer, ReLU):
            if cache is not _FUSED:
                d = d * cache
        elif isinstance(layer, Conv2D):
            k -= 2
            shape, cols, w = cache
            d, dw, grads[k + 1] = conv_backward(d, cols, shape, w, need_dx=i > 0)
            # tied input channels share one gradient
            grads[k] = np.repeat(dw, model.params[k].shape[2], axis=2) if w.shape != model.params[k].shape else dw
    return loss, probs, grads


def loss_fn(model: Model, batch: np.ndarray, target: np.ndarray, reduction: str = "mean") -> float:
    return soft_cross_entropy(forward(model, batch), target, reduction)


# ---------------------------------------------------------------------------
# optimizers


def _check_shapes(params, grads, state):
    if len(params) != len(grads) or len(params) != len(state):
        raise ShapeError("parameter, gradient and state lists differ in length")
    for k, (p, g, s) in enumerate(zip(params, grads, state)):
        if p.shape != g.shape or p.shape != s.shape:
            raise ShapeError(f"tensor {k}: param {p.shape}, grad {g.shape}, state {s.shape}")


class Adam:
    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """Updates ``params`` in place."""
        _check_shapes(params, grads, self.m)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


class SGDMomentum:
    def __init__(self, params, lr=0.0001, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        _check_shapes(params, grads, self.velocity)
        self.t += 1
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v -= self.lr * g
            p += v
        return params


# ---------------------------------------------------------------------------
# gradient verification


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradients(model: Model, batch, target, h: float = 1e-5, coords=None) -> list[np.ndarray]:
    """Central finite differences of the mean loss w.r.t. every parameter.

    ``coords`` optionally limits each tensor to a list of flat indices; other
    entries are left at 0.
    """
    out = []
    for k, p in enumerate(model.params):
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in (range(flat.size) if coords is None else coords[k]):
            orig = flat[j]
            flat[j] = orig + h
            lp = loss_fn(model, batch, target)
            flat[j] = orig - h
            lm = loss_fn(model, batch, target)
            flat[j] = orig
            gflat[j] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def gradient_check(model: Model, batch, target, h: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and finite-difference gradients.

    With ``max_coords`` each tensor is checked on at most that many randomly
    chosen entries.
    """
    _, _, grads = backward(model, batch, target)
    coords = None
    if max_coords is not None:
        rng = np.random.default_rng(seed)
        coords = [rng.choice(p.size, size=min(p.size, max_coords), replace=False) for p in model.params]
    numeric = numeric_gradients(model, batch, target, h, coords)
    errs = []
    for k, (a, n) in enumerate(zip(grads, numeric)):
        idx = slice(None) if coords is None else coords[k]
        errs.append(float(relative_error(a.reshape(-1)[idx], n.reshape(-1)[idx]).max()))
    return max(errs)
