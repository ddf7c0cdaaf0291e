"""LieNet layers and the block-structured network builder.

Group-valued activations are arrays of shape ``(B, T, C, 3, 3)``: batch,
frames, channels (feature rotations). After the LogMap layer they are skew
matrices of the same shape; after Vectorize they are ``(B, D)``.

Every layer exposes ``forward(x)`` and ``backward(grad)``; ``backward``
returns the gradient with respect to the layer input and stores weight
gradients on the layer.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import liegroup as lg
from .errors import (
    InvalidSpec,
    LabelOutOfRange,
    OddChannelCount,
    ShapeMismatch,
    StaleRecords,
)

POOL_KINDS = ("spatial", "temporal", "group")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)
    in_shape: tuple = ()
    out_shape: tuple = ()


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative network description.

    ``pooling`` lists one pooling kind per RotMap block, so its length is the
    block count. ``channels`` and ``frames`` give the input geometry.
    """

    channels: int
    frames: int
    class_count: int
    pooling: tuple = ("spatial",)
    pool_window: int = 4
    threshold: float = None
    vectorize: str = "full"
    groups: tuple = None
    class_names: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "pooling", tuple(self.pooling))
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(tuple(int(c) for c in g) for g in self.groups))
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))

    @classmethod
    def lienet(cls, blocks, channels, frames, class_count, **kwargs):
        """LieNet-kBlock(s): one spatial pooling block, then temporal ones."""
        if blocks < 0:
            raise InvalidSpec("block count must be >= 0")
        pooling = () if blocks == 0 else ("spatial",) + ("temporal",) * (blocks - 1)
        return cls(channels, frames, class_count, pooling=pooling, **kwargs)

    @property
    def blocks(self):
        return len(self.pooling)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("pooling", "groups", "class_names"):
            if d.get(key) is not None:
                d[key] = tuple(tuple(v) if isinstance(v, list) else v for v in d[key])
        return cls(**d)


def layer_specs(spec):
    """Validate ``spec`` and return the layer stack with shapes.

    Raises:
        InvalidSpec: with an explanation of the violated rule.
    """
    if spec.channels < 1 or spec.frames < 1:
        raise InvalidSpec("channels and frames must be positive")
    if spec.class_count < 2:
        raise InvalidSpec("class_count must be >= 2")
    if spec.vectorize not in ("full", "so3"):
        raise InvalidSpec(f"vectorize must be 'full' or 'so3', not {spec.vectorize!r}")
    if spec.threshold is not None and spec.threshold < 0:
        raise InvalidSpec("threshold must be >= 0")
    if spec.class_names is not None and len(spec.class_names) != spec.class_count:
        raise InvalidSpec("class_names length differs from class_count")
    t, c = spec.frames, spec.channels
    out = []
    spatial_done = False
    for i, kind in enumerate(spec.pooling):
        out.append(LayerSpec("RotMap", {"channels": c}, (t, c), (t, c)))
        if kind == "spatial":
            if spatial_done:
                raise InvalidSpec(f"block {i}: spatial pooling needs canonical pair channels; use 'group' for a second spatial stage")
            if c % 2:
                raise InvalidSpec(f"block {i}: spatial pooling needs an even channel count, got {c}")
            out.append(LayerSpec("SpaPooling", {}, (t, c), (t, c // 2)))
            c //= 2
            spatial_done = True
        elif kind == "temporal":
            p = spec.pool_window
            if p < 2:
                raise InvalidSpec(f"temporal pooling window must be >= 2, got {p}")
            out.append(LayerSpec("TemPooling", {"p": p}, (t, c), (math.ceil(t / p), c)))
            t = math.ceil(t / p)
        elif kind == "group":
            if not spec.groups:
                raise InvalidSpec(f"block {i}: group pooling requires 'groups'")
            members = [m for g in spec.groups for m in g]
            if any(m < 0 or m >= c for m in members) or any(len(g) == 0 for g in spec.groups):
                raise InvalidSpec(f"block {i}: group indices must lie in [0, {c})")
            out.append(LayerSpec("GroupPooling", {"groups": spec.groups}, (t, c), (t, len(spec.groups))))
            c = len(spec.groups)
            spatial_done = True
        else:
            raise InvalidSpec(f"unknown pooling kind {kind!r}; expected one of {POOL_KINDS}")
    out.append(LayerSpec("LogMap", {}, (t, c), (t, c)))
    width = t * c * (9 if spec.vectorize == "full" else 3)
    out.append(LayerSpec("Vectorize", {"mode": spec.vectorize}, (t, c), (width,)))
    if spec.threshold is not None:
        out.append(LayerSpec("ThresholdRelu", {"eps": spec.threshold}, (width,), (width,)))
    out.append(LayerSpec("FullyConnected", {"in_dim": width, "out_dim": spec.class_count}, (width,), (spec.class_count,)))
    out.append(LayerSpec("SoftmaxLoss", {}, (spec.class_count,), ()))
    return out


class Layer:
    kind = None
    mutate = False

    def params(self):
        return []

    def grads(self):
        return []

    def routing(self):
        """Discrete state picked by the last forward (None for smooth layers)."""
        return None

    def _flip(self, g):
        return -g if self.mutate else g


class RotMap(Layer):
    """Per-channel rotation weights ``W_i``, shared across frames."""

    kind = "RotMap"

    def __init__(self, weights):
        self.weights = np.array(weights, dtype=float)
        self.grad_weights = np.zeros_like(self.weights)

    @classmethod
    def random(cls, channels, rng):
        return cls(lg.random_rotation(rng, channels))

    def params(self):
        return [self.weights]

    def grads(self):
        return [self.grad_weights]

    def forward(self, x):
        if x.shape[-3] != self.weights.shape[0]:
            raise ShapeMismatch(f"RotMap has {self.weights.shape[0]} channels, input has {x.shape[-3]}")
        self._x = x
        return self.weights @ x

    def backward(self, g):
        if g.shape != self._x.shape:
            raise ShapeMismatch(f"upstream {g.shape} vs input {self._x.shape}")
        self.grad_weights = self._flip(np.einsum("btcij,btckj->cik", g, self._x))
        return self._flip(np.swapaxes(self.weights, -1, -2) @ g)


class _RoutingPool(Layer):
    """Max-by-angle pooling recorded as source (frame, channel) indices."""

    def _select(self, angles):
        raise NotImplementedError

    def forward(self, x):
        angles = lg.rotation_angle(x)
        src_t, src_c = self._select(angles)
        b = np.arange(x.shape[0])[:, None, None]
        self._in_shape = x.shape
        self.records = (np.broadcast_to(b, src_t.shape), src_t, src_c)
        return x[b, src_t, src_c]

    def routing(self):
        return np.stack([self.records[1], self.records[2]])

    def backward(self, g):
        bi, ti, ci = self.records
        if g.shape[:3] != ti.shape or g.shape[0] != self._in_shape[0]:
            raise StaleRecords(f"upstream shape {g.shape[:3]} vs records {ti.shape}")
        out = np.zeros(self._in_shape)
        np.add.at(out, (bi, ti, ci), g)
        return self._flip(out)


class SpatialPool(_RoutingPool):
    """Keep the larger-angle member of each ``(R_mn, R_nm)`` channel pair."""

    kind = "SpaPooling"

    def _select(self, angles):
        b, t, c = angles.shape
        if c % 2:
            raise OddChannelCount(f"spatial pooling needs an even channel count, got {c}")
        pairs = angles.reshape(b, t, c // 2, 2)
        pick = (pairs[..., 1] > pairs[..., 0]).astype(int)
        src_c = 2 * np.arange(c // 2) + pick
        src_t = np.broadcast_to(np.arange(t)[None, :, None], src_c.shape)
        return src_t, src_c


class TemporalPool(_RoutingPool):
    """Per-channel max over non-overlapping windows of ``p`` frames."""

    kind = "TemPooling"

    def __init__(self, p):
        if p < 2:
            raise ValueError("window must be >= 2")
        self.p = p

    def _select(self, angles):
        b, t, c = angles.shape
        n = math.ceil(t / self.p)
        src_t = np.empty((b, n, c), dtype=int)
        for w in range(n):
            lo = w * self.p
            src_t[:, w] = lo + np.argmax(angles[:, lo:lo + self.p], axis=1)
        src_c = np.broadcast_to(np.arange(c), src_t.shape)
        return src_t, src_c


class GroupPool(_RoutingPool):
    """Max-by-angle over user-defined channel groups (body-part stage)."""

    kind = "GroupPooling"

    def __init__(self, groups):
        self.groups = [np.asarray(g, dtype=int) for g in groups]

    def _select(self, angles):
        b, t, _ = angles.shape
        src_c = np.empty((b, t, len(self.groups)), dtype=int)
        for k, g in enumerate(self.groups):
            src_c[..., k] = g[np.argmax(angles[..., g], axis=-1)]
        src_t = np.broadcast_to(np.arange(t)[None, :, None], src_c.shape)
        return src_t, src_c


def _logmap_coeffs(theta):
    # c = theta / (2 sin theta);  k = -c'(theta) / (2 sin theta)
    small = theta < lg.SERIES_THETA
    t2 = theta * theta
    safe = np.where(small, 1.0, theta)
    sin, cos = np.sin(safe), np.cos(safe)
    c = np.where(small, 0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0, safe / (2.0 * sin))
    k = np.where(
        small,
        -1.0 / 12.0 - t2 / 30.0 - t2 * t2 / 126.0,
        -(sin - safe * cos) / (4.0 * sin ** 3),
    )
    return c, k


class LogMap(Layer):
    kind = "LogMap"

    def __init__(self, delta=lg.DELTA_THETA, fd_step=1e-7):
        self.delta = delta
        self.fd_step = fd_step

    def forward(self, x):
        self._x = x
        theta = lg.rotation_angle(x)
        self._near_pi = theta >= np.pi - self.delta
        if np.any(self._near_pi):
            return lg.log_map_fallback(x, self.delta)
        return lg.log_map(x, self.delta)

    def routing(self):
        # which entries took the near-pi branch
        return self._near_pi

    def backward(self, g):
        x = self._x
        if g.shape != x.shape:
            raise ShapeMismatch(f"upstream {g.shape} vs input {x.shape}")
        theta = lg.rotation_angle(x)
        c, k = _logmap_coeffs(np.where(self._near_pi, 1.0, theta))
        gt = np.swapaxes(g, -1, -2)
        inner = lg.frobenius_inner(g, x - np.swapaxes(x, -1, -2))
        out = c[..., None, None] * (g - gt) + (inner * k)[..., None, None] * np.eye(3)
        if np.any(self._near_pi):
            out[self._near_pi] = self._numeric_grad(x[self._near_pi], g[self._near_pi])
        return self._flip(out)

    def _numeric_grad(self, r, g):
        h = self.fd_step
        out = np.zeros_like(r)
        for i in range(3):
            for j in range(3):
                d = np.zeros((3, 3))
                d[i, j] = h
                fp = lg.log_map_fallback(r + d, self.delta)
                fm = lg.log_map_fallback(r - d, self.delta)
                out[:, i, j] = lg.frobenius_inner(g, fp - fm) / (2 * h)
        return out


class Vectorize(Layer):
    """Row-major flatten, channels then frames; ``so3`` keeps 3 coordinates."""

    kind = "Vectorize"

    def __init__(self, mode="full"):
        self.mode = mode

    def forward(self, x):
        self._shape = x.shape
        if self.mode == "so3":
            return lg.vee(x).reshape(x.shape[0], -1)
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        if self.mode == "so3":
            v = g.reshape(self._shape[:-2] + (3,))
            out = np.zeros(self._shape)
            out[..., 2, 1] = v[..., 0]
            out[..., 0, 2] = v[..., 1]
            out[..., 1, 0] = v[..., 2]
            return self._flip(out)
        return self._flip(g.reshape(self._shape))


class ThresholdRelu(Layer):
    """Zero entries whose magnitude is below ``eps``."""

    kind = "ThresholdRelu"

    def __init__(self, eps=0.1):
        self.eps = eps

    def forward(self, x):
        self._mask = np.abs(x) >= self.eps
        return np.where(self._mask, x, 0.0)

    def routing(self):
        return self._mask

    def backward(self, g):
        return self._flip(np.where(self._mask, g, 0.0))


class FullyConnected(Layer):
    kind = "FullyConnected"

    def __init__(self, weight, bias=None):
        self.weight = np.array(weight, dtype=float)
        self.bias = np.zeros(self.weight.shape[0]) if bias is None else np.array(bias, dtype=float)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def random(cls, in_dim, out_dim, rng):
        bound = math.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-bound, bound, size=(out_dim, in_dim)))

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeMismatch(f"FC expects width {self.weight.shape[1]}, got {x.shape[-1]}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, g):
        self.grad_weight = self._flip(g.T @ self._x)
        self.grad_bias = self._flip(g.sum(axis=0))
        return self._flip(g @ self.weight)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch.

    Returns:
        ``(loss, probabilities, logit_gradient)``; the gradient includes the
        ``1/B`` factor of the mean.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"{labels.shape[0]} labels for {n} samples")
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k}), got {labels.min()}..{labels.max()}")
    labels = labels.astype(int)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = -logp[rows, labels]
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    return float(loss.mean()), probs, grad / n


class SoftmaxLoss(Layer):
    kind = "SoftmaxLoss"

    def forward(self, logits, labels):
        loss, self.probs, self._grad = softmax_cross_entropy(logits, labels)
        return loss

    def backward(self, g=1.0):
        return self._flip(g * self._grad)


class Network:
    """A built layer stack. ``layers[-1]`` is always the SoftmaxLoss."""

    def __init__(self, spec, layers, debug=False):
        self.spec = spec
        self.layers = layers
        self.debug = debug

    @property
    def rotmaps(self):
        return [l for l in self.layers if isinstance(l, RotMap)]

    @property
    def fcs(self):
        return [l for l in self.layers if isinstance(l, FullyConnected)]

    def forward(self, x, upto=None, start=0):
        """Run layers ``start .. upto-1`` (default: everything up to the logits)."""
        stop = len(self.layers) - 1 if upto is None else upto
        h = np.asarray(x, dtype=float)
        if start == 0 and (h.ndim != 5 or h.shape[1:3] != (self.spec.frames, self.spec.channels)):
            raise ShapeMismatch(
                f"input {h.shape[1:3] if h.ndim == 5 else h.shape} vs network "
                f"(frames={self.spec.frames}, channels={self.spec.channels})"
            )
        for layer in self.layers[start:stop]:
            h = layer.forward(h)
            if self.debug and layer.kind in ("RotMap", "SpaPooling", "TemPooling", "GroupPooling"):
                if not lg.is_rotation(h):
                    raise AssertionError(f"{layer.kind} output left SO(3)")
        return h

    def loss(self, x, labels):
        return self.layers[-1].forward(self.forward(x), labels)

    def backward(self):
        """Backpropagate from the loss; returns the input gradient."""
        g = self.layers[-1].backward()
        for layer in reversed(self.layers[:-1]):
            g = layer.backward(g)
        return g

    def predict_proba(self, x):
        _, probs, _ = softmax_cross_entropy(self.forward(x), np.zeros(len(x), dtype=int))
        return probs

    def copy_params(self):
        return [[p.copy() for p in l.params()] for l in self.layers]

    def load_params(self, saved):
        for layer, ps in zip(self.layers, saved):
            for dst, src in zip(layer.params(), ps):
                dst[...] = src


def build_network(spec, rng, debug=False):
    """Instantiate ``spec``; RotMap weights are Haar-random rotations."""
    layers = []
    for ls in layer_specs(spec):
        if ls.kind == "RotMap":
            layers.append(RotMap.random(ls.params["channels"], rng))
        elif ls.kind == "SpaPooling":
            layers.append(SpatialPool())
        elif ls.kind == "TemPooling":
            layers.append(TemporalPool(ls.params["p"]))
        elif ls.kind == "GroupPooling":
            layers.append(GroupPool(ls.params["groups"]))
        elif ls.kind == "LogMap":
            layers.append(LogMap())
        elif ls.kind == "Vectorize":
            layers.append(Vectorize(ls.params["mode"]))
        elif ls.kind == "ThresholdRelu":
            layers.append(ThresholdRelu(ls.params["eps"]))
        elif ls.kind == "FullyConnected":
            layers.append(FullyConnected.random(ls.params["in_dim"], ls.params["out_dim"], rng))
        elif ls.kind == "SoftmaxLoss":
            layers.append(SoftmaxLoss())
    return Network(spec, layers, debug=debug)


def describe_shapes(spec):
    """Human-readable shape progression, one line per layer."""
    lines = []
    for i, ls in enumerate(layer_specs(spec)):
        lines.append(f"{i:2d} {ls.kind:<15} {ls.in_shape} -> {ls.out_shape}")
    return lines
