"""Riemannian SGD for LieNet, evaluation, gradient checking, checkpoints."""

import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import liegroup as lg
from .errors import EmptyDataset, LabelOutOfRange, MalformedFile, NonFiniteGradient, ShapeMismatch
from .layers import FullyConnected, NetworkSpec, RotMap, build_network, softmax_cross_entropy

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LIEN"
CHECKPOINT_VERSION = 1


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    batch_size: int = 30
    epochs: int = 50
    seed: int = 0
    shuffle: bool = True
    gradcheck_mode: bool = False
    lr_decay: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")


@dataclass
class Dataset:
    """Feature tensors ``x`` of shape ``(N, T, C, 3, 3)`` and integer labels."""

    x: np.ndarray
    y: np.ndarray
    class_names: tuple = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.x.ndim != 5 or self.x.shape[-2:] != (3, 3):
            raise ShapeMismatch(f"dataset features must be (N, T, C, 3, 3), got {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise ShapeMismatch("one label per sample required")

    def __len__(self):
        return len(self.y)


@dataclass
class GradientBundle:
    rotmap: list
    fc: list
    loss_sum: float = 0.0
    correct: int = 0
    count: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    drift: float
    seconds: float


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def to_csv(self, header=True, timing=True):
        """CSV text; ``timing=False`` drops the wall-clock column for byte comparisons."""
        cols = "epoch,loss,train_acc,val_acc,drift" + (",seconds" if timing else "")
        rows = [cols] if header else []
        for r in self.records:
            val = "" if r.val_acc is None else repr(r.val_acc)
            row = f"{r.epoch},{r.loss!r},{r.train_acc!r},{val},{r.drift!r}"
            rows.append(row + (f",{r.seconds:.3f}" if timing else ""))
        return "\n".join(rows) + "\n"

    @property
    def losses(self):
        return [r.loss for r in self.records]


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    mean_loss: float

    def to_csv(self, class_names=None):
        k = self.confusion.shape[0]
        names = class_names or [str(i) for i in range(k)]
        rows = [f"accuracy,{self.accuracy!r}", f"mean_loss,{self.mean_loss!r}"]
        rows.append("true\\pred," + ",".join(names))
        for name, row in zip(names, self.confusion):
            rows.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(rows) + "\n"


def weight_drift(network):
    """Max over RotMap weights of ``||W^T W - I||_F`` (0 without RotMaps)."""
    errs = [float(np.max(lg.orthogonality_error(l.weights))) for l in network.rotmaps]
    return max(errs, default=0.0)


def backward_pass(network, x, labels):
    """Forward and backward over one batch; gradients are batch averages.

    Raises:
        NonFiniteGradient: naming the first layer with a non-finite gradient.
    """
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(x) != len(labels):
        raise ShapeMismatch(f"{len(x)} samples but {len(labels)} labels")
    logits = network.forward(x)
    loss = network.layers[-1].forward(logits, labels)
    network.backward()
    for i, layer in enumerate(network.layers):
        for g in layer.grads():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in layer {i} ({layer.kind})", i)
    correct = int(np.sum(np.argmax(logits, axis=1) == labels))
    return GradientBundle(
        rotmap=[l.grad_weights.copy() for l in network.rotmaps],
        fc=[(l.grad_weight.copy(), l.grad_bias.copy()) for l in network.fcs],
        loss_sum=loss * len(labels),
        correct=correct,
        count=len(labels),
    )


def riemannian_step(weights, euclid_grads, lr):
    """``W <- Gamma(W - lr * proj_W(grad))`` for a stack of rotation weights.

    Weights whose step is exactly zero are returned untouched, so a zero
    gradient or ``lr == 0`` leaves them bitwise unchanged.
    """
    weights = np.asarray(weights, dtype=float)
    euclid_grads = np.asarray(euclid_grads, dtype=float)
    if weights.shape != euclid_grads.shape:
        raise ShapeMismatch(f"weights {weights.shape} vs gradients {euclid_grads.shape}")
    step = lr * lg.tangent_project(weights, euclid_grads)
    moving = np.any(step != 0, axis=(-2, -1))
    out = weights.copy()
    if np.any(moving):
        out[moving] = lg.project_to_rotation(weights[moving] - step[moving])
    return out


def apply_bundle(network, bundle, lr):
    for layer, g in zip(network.rotmaps, bundle.rotmap):
        layer.weights = riemannian_step(layer.weights, g, lr)
    for layer, (gw, gb) in zip(network.fcs, bundle.fc):
        layer.weight = layer.weight - lr * gw
        layer.bias = layer.bias - lr * gb


def sgd_step(network, x, labels, cfg, lr=None):
    """One mini-batch update in place; returns the batch GradientBundle."""
    bundle = backward_pass(network, x, labels)
    apply_bundle(network, bundle, cfg.learning_rate if lr is None else lr)
    return bundle


def _check_labels(network, dataset):
    if len(dataset) == 0:
        raise EmptyDataset("dataset has no samples")
    k = network.spec.class_count
    if np.any(dataset.y < 0) or np.any(dataset.y >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")


def evaluate(network, dataset, chunk=256):
    """Accuracy, confusion counts (rows: true class) and mean loss."""
    _check_labels(network, dataset)
    k = network.spec.class_count
    confusion = np.zeros((k, k), dtype=int)
    loss_sum = 0.0
    for lo in range(0, len(dataset), chunk):
        xb, yb = dataset.x[lo:lo + chunk], dataset.y[lo:lo + chunk]
        logits = network.forward(xb)
        loss, probs, _ = softmax_cross_entropy(logits, yb)
        loss_sum += loss * len(yb)
        np.add.at(confusion, (yb, np.argmax(probs, axis=1)), 1)
    n = len(dataset)
    return EvalResult(float(np.trace(confusion)) / n, confusion, loss_sum / n)


class TrainingAborted(NonFiniteGradient):
    """Raised after restoring the last good weights; carries the log."""

    def __init__(self, message, layer_index, log):
        super().__init__(message, layer_index)
        self.log = log


def train(network, dataset, cfg, validation=None, start_epoch=0, callback=None):
    """Epoch loop around :func:`sgd_step`.

    Shuffling uses a generator seeded by ``(cfg.seed, epoch)`` so a resumed
    run reproduces the uninterrupted one. The training accuracy is measured
    by :func:`evaluate` after each epoch; the loss column is the mean of the
    epoch's mini-batch losses.

    Raises:
        EmptyDataset: if ``dataset`` is empty.
        TrainingAborted: on a non-finite gradient; weights are reset to the
            end of the last completed epoch.
    """
    _check_labels(network, dataset)
    tlog = TrainingLog()
    n = len(dataset)
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        t0 = time.perf_counter()
        good = network.copy_params()
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        if cfg.shuffle:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        else:
            order = np.arange(n)
        loss_sum = 0.0
        try:
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                bundle = sgd_step(network, dataset.x[idx], dataset.y[idx], cfg, lr=lr)
                loss_sum += bundle.loss_sum
        except NonFiniteGradient as err:
            network.load_params(good)
            raise TrainingAborted(str(err), err.layer_index, tlog) from err
        if not np.isfinite(loss_sum):
            network.load_params(good)
            raise TrainingAborted(f"non-finite loss in epoch {epoch}", None, tlog)
        train_acc = evaluate(network, dataset).accuracy
        val_acc = evaluate(network, validation).accuracy if validation is not None else None
        rec = EpochRecord(epoch, loss_sum / n, train_acc, val_acc, weight_drift(network),
                          time.perf_counter() - t0)
        tlog.records.append(rec)
        log.info("epoch %d loss %.6f train_acc %.4f", epoch, rec.loss, train_acc)
        if callback is not None:
            callback(rec)
    return network, tlog


# -- finite-difference oracle ------------------------------------------------

@dataclass
class LayerCheck:
    index: int
    kind: str
    target: str
    max_rel_error: float
    tolerance: float
    redrawn: int = 0

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


@dataclass
class GradcheckReport:
    checks: list
    data_tol: float
    rotmap_tol: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def suspect_layer(self):
        """Highest layer whose check fails, or None."""
        failing = self.failing_layers()
        return failing[-1] if failing else None

    def failing_layers(self):
        return sorted({c.index for c in self.checks if not c.passed})

    def lines(self):
        out = [f"tolerances: data/fc rel {self.data_tol:g}, rotmap tangent rel {self.rotmap_tol:g}"]
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            extra = f", {c.redrawn} direction(s) redrawn at kinks" if c.redrawn else ""
            out.append(
                f"{status} layer {c.index:2d} {c.kind:<15} {c.target:<8} "
                f"max_rel_err {c.max_rel_error:.3e} (tol {c.tolerance:g}){extra}"
            )
        return out


def _rel_err(analytic, numeric, atol):
    diff = abs(analytic - numeric)
    if diff <= atol:
        return 0.0
    return diff / max(abs(analytic), abs(numeric))


def _routing_state(network):
    return [r.copy() for r in (layer.routing() for layer in network.layers) if r is not None]


def _same_routing(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _directional(network, draw, reset, h, atol, redraws, shrinks=3):
    """Relative error along one random direction, avoiding kinks.

    ``draw()`` returns ``(analytic, f)``. If the +-h evaluations switch a
    max-pooling winner, a threshold mask or the log-map branch, the step
    straddles a point where the loss is not smooth: the step is cut by 4
    up to ``shrinks`` times, then the direction is replaced by a fresh draw,
    up to ``redraws`` times. ``reset()`` re-runs the unperturbed forward
    pass and returns its routing. Returns ``(rel_error, redraw_count)``.
    """
    base = reset()
    for attempt in range(redraws + 1):
        analytic, f = draw()
        for k in range(shrinks + 1):
            hk = h / 4**k
            up = f(hk)
            kinked = not _same_routing(_routing_state(network), base)
            down = f(-hk)
            kinked = kinked or not _same_routing(_routing_state(network), base)
            base = reset()
            if not kinked:
                return _rel_err(analytic, (up - down) / (2 * hk), atol), attempt
    return _rel_err(analytic, (up - down) / (2 * hk), atol), attempt


def finite_difference_check(network, x, labels, rng, data_tol=1e-4, rotmap_tol=1e-3,
                            step=1e-6, manifold_step=1e-5, directions=3, fc_coords=8,
                            atol=1e-8, redraws=5):
    """Compare analytic gradients with central differences of the loss.

    For every layer the gradient with respect to its input is checked along
    random directions (the rest of the network is frozen). FC weights are
    checked coordinate-wise on a random sample of entries. RotMap weights
    are checked along random tangent directions ``T = W S`` with retracted
    perturbations ``Gamma(W +- h T)``.

    Euclidean quantities are stepped by ``step``. Rotation-valued
    activations are perturbed along the manifold, ``R exp(+-h S)``, with
    ``manifold_step`` like the RotMap weights: the trace-based angle loses
    about ``eps / (pi - theta)^2`` relative precision near the cut locus, so
    a 1e-6 step there measures round-off rather than slope.

    A corrupted backward in layer k fails the input checks of layers
    ``<= k``; :meth:`GradcheckReport.suspect_layer` names the culprit.
    """
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels, dtype=int)
    nl = len(network.layers)

    acts = [x]
    h = x
    for layer in network.layers[:-1]:
        h = layer.forward(h)
        acts.append(h)
    network.layers[-1].forward(h, labels)

    # input gradient for each layer, captured by re-running backward
    input_grads = [None] * nl
    g = network.layers[-1].backward()
    input_grads[nl - 1] = g
    for i in range(nl - 2, -1, -1):
        g = network.layers[i].backward(g)
        input_grads[i] = g
    # snapshot weight gradients (pooling records must match the forward above)
    rot_grads = {id(l): l.grad_weights.copy() for l in network.rotmaps}
    fc_grads = {id(l): l.grad_weight.copy() for l in network.fcs}

    def loss_from(i, a):
        out = network.forward(a, start=i) if i < nl - 1 else a
        return network.layers[-1].forward(out, labels)

    def reset():
        loss_from(0, x)
        return _routing_state(network)

    checks = []
    for i, layer in enumerate(network.layers):
        a = acts[i]
        on_group = a.ndim == 5 and lg.is_rotation(a)

        def draw(i=i, a=a, on_group=on_group):
            if on_group:
                s = lg.hat(rng.standard_normal(a.shape[:-1]))
                d = a @ s

                def f(h):
                    return loss_from(i, a @ lg.exp_map(h * s))
            else:
                d = rng.standard_normal(a.shape)

                def f(h):
                    return loss_from(i, a + h * d)

            return float(np.sum(input_grads[i] * d)), f

        h0 = manifold_step if on_group else step
        worst, redrawn = 0.0, 0
        for _ in range(directions):
            err, n = _directional(network, draw, reset, h0, atol, redraws)
            worst, redrawn = max(worst, err), redrawn + n
        checks.append(LayerCheck(i, layer.kind, "input", worst, data_tol, redrawn))

    for i, layer in enumerate(network.layers):
        worst, redrawn = 0.0, 0
        if isinstance(layer, FullyConnected):
            gw = fc_grads[id(layer)]
            flat = list(rng.choice(gw.size, size=min(fc_coords, gw.size), replace=False))

            def draw(layer=layer, gw=gw, flat=flat):
                # coordinates are consumed in order; a redraw takes the next one
                idx = flat.pop() if flat else rng.integers(gw.size)
                r, c = np.unravel_index(idx, gw.shape)
                orig = layer.weight[r, c]

                def f(h):
                    layer.weight[r, c] = orig + h
                    try:
                        return loss_from(0, x)
                    finally:
                        layer.weight[r, c] = orig

                return float(gw[r, c]), f

            for _ in range(min(fc_coords, gw.size)):
                err, n = _directional(network, draw, reset, step, atol, redraws)
                worst, redrawn = max(worst, err), redrawn + n
            checks.append(LayerCheck(i, layer.kind, "weight", worst, data_tol, redrawn))
        elif isinstance(layer, RotMap):
            gw = rot_grads[id(layer)]
            w0 = layer.weights.copy()

            def draw(layer=layer, gw=gw, w0=w0):
                t = w0 @ lg.hat(rng.standard_normal((w0.shape[0], 3)))

                def f(h):
                    layer.weights = lg.project_to_rotation(w0 + h * t)
                    try:
                        return loss_from(0, x)
                    finally:
                        layer.weights = w0.copy()

                return float(np.sum(gw * t)), f

            for _ in range(directions):
                err, n = _directional(network, draw, reset, manifold_step, atol, redraws)
                worst, redrawn = max(worst, err), redrawn + n
            checks.append(LayerCheck(i, layer.kind, "tangent", worst, rotmap_tol, redrawn))
    reset()
    return GradcheckReport(checks, data_tol, rotmap_tol)


# -- checkpoint format -------------------------------------------------------

def save_checkpoint(path, network, epoch=0):
    meta = json.dumps({"spec": network.spec.to_dict(), "epoch": int(epoch)}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
    buf.write(meta)
    for layer in network.layers:
        if isinstance(layer, RotMap):
            buf.write(struct.pack("<I", layer.weights.shape[0]))
            buf.write(layer.weights.astype("<f8").tobytes())
        elif isinstance(layer, FullyConnected):
            out_dim, in_dim = layer.weight.shape
            buf.write(struct.pack("<II", out_dim, in_dim))
            buf.write(layer.weight.astype("<f8").tobytes())
            buf.write(layer.bias.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(network, epoch)`` from a ``LIEN`` checkpoint."""
    data = open(path, "rb").read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise MalformedFile(f"{path}: not a LIEN checkpoint")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise MalformedFile(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    spec = NetworkSpec.from_dict(meta["spec"])
    net = build_network(spec, np.random.default_rng(0))

    def read(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float)
        off += 8 * count
        return arr

    try:
        for layer in net.layers:
            if isinstance(layer, RotMap):
                (c,) = struct.unpack_from("<I", data, off)
                off += 4
                if c != layer.weights.shape[0]:
                    raise MalformedFile(f"{path}: RotMap channel count {c} disagrees with spec")
                layer.weights = read(9 * c).reshape(c, 3, 3)
            elif isinstance(layer, FullyConnected):
                out_dim, in_dim = struct.unpack_from("<II", data, off)
                off += 8
                if (out_dim, in_dim) != layer.weight.shape:
                    raise MalformedFile(f"{path}: FC shape {(out_dim, in_dim)} disagrees with spec")
                layer.weight = read(out_dim * in_dim).reshape(out_dim, in_dim)
                layer.bias = read(out_dim)
    except (struct.error, ValueError) as err:
        raise MalformedFile(f"{path}: truncated checkpoint ({err})") from err
    if off != len(data):
        raise MalformedFile(f"{path}: {len(data) - off} trailing bytes")
    return net, meta["epoch"]
