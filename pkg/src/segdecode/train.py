"""Class-balanced cross-entropy, SGD with momentum and the training protocol."""

from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import arch
from .arch import ModelSpec, forward, he_init  # noqa: F401  (he_init re-exported)
from .metrics import SegmentationEvaluator
from .ops import log_softmax_channels
from .tensor import as_tensor, backward, make_result, no_grad

log = logging.getLogger(__name__)

BALANCING_MODES = ("median_frequency", "natural_frequency")
FREQUENCY_MODES = ("presence", "total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 12
    eval_every: int = 1000
    max_epochs: int = 100
    max_iterations: int = 0
    balancing: str = "median_frequency"
    frequency_mode: str = "presence"
    seed: int = 0
    ignore_label: int | None = None
    eval_at_epoch_end: bool = False
    variant: str = "segnet-basic"
    depth: int = 4
    channels: int = 64
    kernel: int = 7
    precision: str = "float32"
    lcn: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if self.max_epochs < 1 or self.max_iterations < 0:
            raise ValueError("max_epochs must be >= 1 and max_iterations >= 0")
        if self.balancing not in BALANCING_MODES:
            raise ValueError(f"balancing must be one of {BALANCING_MODES}")
        if self.frequency_mode not in FREQUENCY_MODES:
            raise ValueError(f"frequency_mode must be one of {FREQUENCY_MODES}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.dtype(self.precision).type


@dataclass
class ClassWeights:
    weights: np.ndarray
    mode: str

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)


def _label_counts(labels, K, ignore_label):
    counts, totals = [], []
    for i, lab in enumerate(labels):
        lab = np.asarray(lab)
        keep = lab != ignore_label if ignore_label is not None else np.ones(lab.shape, bool)
        vals = lab[keep].astype(np.int64)
        if vals.size and (vals.min() < 0 or vals.max() >= K):
            bad = vals[(vals < 0) | (vals >= K)][0]
            raise ValueError(f"image {i}: label {bad} outside [0, {K})")
        counts.append(np.bincount(vals, minlength=K))
        totals.append(vals.size)
    return np.array(counts, dtype=np.int64).reshape(-1, K), np.array(totals, dtype=np.int64)


def class_frequencies(labels, K, ignore_label=None, mode="presence"):
    """Per-class pixel frequency over a set of label maps.

    ``presence``: class pixels divided by the pixels of the images in which
    the class appears. ``total``: class pixels divided by all pixels.
    Ignored pixels count in neither numerator nor denominator.
    """
    counts, totals = _label_counts(labels, K, ignore_label)
    pixels = counts.sum(axis=0).astype(np.float64)
    if mode == "total":
        denom = np.full(K, float(totals.sum()))
    elif mode == "presence":
        denom = ((counts > 0) * totals[:, None]).sum(axis=0).astype(np.float64)
    else:
        raise ValueError(f"unknown frequency mode {mode!r}")
    return np.where(denom > 0, pixels / np.maximum(denom, 1), 0.0)


def median_frequency_weights(freqs):
    """weight[c] = median(non-zero frequencies) / freq[c]; absent classes get 0."""
    f = np.asarray(freqs, dtype=np.float64)
    nz = f > 0
    if not nz.any():
        raise ValueError("all class frequencies are zero")
    med = np.median(f[nz])
    w = np.zeros_like(f)
    w[nz] = med / f[nz]
    return ClassWeights(w, "median_frequency")


def natural_frequency_weights(K):
    return ClassWeights(np.ones(K), "natural_frequency")


def class_weights(labels, K, balancing="median_frequency", ignore_label=None, frequency_mode="presence"):
    if balancing == "natural_frequency":
        return natural_frequency_weights(K)
    if balancing == "median_frequency":
        return median_frequency_weights(class_frequencies(labels, K, ignore_label, frequency_mode))
    raise ValueError(f"unknown balancing mode {balancing!r}")


def weighted_cross_entropy(logits, labels, weights=None, ignore_label=None):
    """Summed pixel cross-entropy, each pixel weighted by the weight of its true class."""
    logits = as_tensor(logits)
    z = logits.data
    if np.isnan(z).any():
        raise FloatingPointError("NaN in logits")
    labels = np.asarray(labels)
    n, K, h, w = z.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match logits {z.shape}")
    valid = labels != ignore_label if ignore_label is not None else np.ones(labels.shape, bool)
    lab = np.where(valid, labels, 0).astype(np.intp)
    if lab.min() < 0 or lab.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    if weights is None:
        pix_w = valid.astype(z.dtype)
    else:
        wv = np.asarray(weights, dtype=z.dtype)
        if wv.shape != (K,):
            raise ValueError(f"expected {K} class weights, got {wv.shape}")
        pix_w = wv[lab] * valid
    logp = log_softmax_channels(z)
    picked = np.take_along_axis(logp, lab[:, None], axis=1)[:, 0]
    loss = -np.sum(pix_w * picked, dtype=np.float64)

    def grad(g):
        p = np.exp(logp)
        np.put_along_axis(p, lab[:, None], np.take_along_axis(p, lab[:, None], axis=1) - 1, axis=1)
        return (p * (pix_w[:, None] * g.reshape(())),)

    return make_result(np.array(loss, dtype=z.dtype).reshape(1, 1, 1, 1), (logits,), grad, "cross_entropy")


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params):
        return cls({name: np.zeros_like(t.data) for name, t in params.items()})


def sgd_momentum_step(params, state: OptimizerState, lr, momentum, grads=None):
    """Classical momentum: v <- momentum * v + g; p <- p - lr * v.

    ``grads`` defaults to each tensor's ``.grad`` (missing gradients count as 0).
    """
    for name, t in params.items():
        g = grads[name] if grads is not None else t.grad
        v = state.velocity.setdefault(name, np.zeros_like(t.data))
        if v.shape != t.shape:
            raise ValueError(f"{name}: velocity shape {v.shape} != parameter shape {t.shape}")
        if g is None:
            g = 0.0
        elif np.shape(g) != t.shape:
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != parameter shape {t.shape}")
        v *= momentum
        v += g
        t.data -= lr * v
    return params, state


@dataclass
class Dataset:
    """Preprocessed float images (n, c, h, w) with integer label maps (n, h, w)."""

    images: np.ndarray
    labels: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in count")
        if self.images.shape[2:] != self.labels.shape[1:]:
            raise ValueError("image and label sizes differ")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)


@dataclass
class HistoryEntry:
    iteration: int
    epoch: int
    train_loss: float
    G: float
    C: float
    mIoU: float
    BF: float

    def line(self):
        return (f"{self.iteration}\t{self.epoch}\t{self.train_loss:.6f}\t{self.G:.6f}\t"
                f"{self.C:.6f}\t{self.mIoU:.6f}\t{self.BF:.6f}")


HISTORY_HEADER = "# iteration\tepoch\ttrain_loss\tval_G\tval_C\tval_mIoU\tval_BF"


@dataclass
class TrainResult:
    best_model: ModelSpec
    final_model: ModelSpec
    history: list
    best_iteration: int
    iterations: int
    optimizer: OptimizerState
    visits: np.ndarray


def evaluate(spec, data: Dataset, ignore_label=None, batch_size=8, theta=None):
    """Eval-mode metrics of ``spec`` on ``data``."""
    ev = SegmentationEvaluator(spec.num_classes, ignore_label, theta)
    with no_grad():
        for s in range(0, len(data), batch_size):
            pred = arch.predict(spec, data.images[s:s + batch_size])
            ev.update(pred, data.labels[s:s + batch_size])
    return ev.report()


def snapshot(spec):
    return copy.deepcopy(spec)


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def iterations_per_epoch(n, batch_size):
    return math.ceil(n / batch_size)


def _append_line(path, line):
    with open(path, "a") as f:
        f.write(line + "\n")
        f.flush()


def train_loop(spec: ModelSpec, train_set: Dataset, val_set: Dataset, cfg: TrainConfig,
               history_path=None, resume=None, callback=None, weights=None):
    """Train ``spec`` in place and return the best validation checkpoint.

    Each epoch visits a seeded permutation of the training set in mini-batches.
    Every ``eval_every`` iterations the model is evaluated on ``val_set``; the
    snapshot with the highest global accuracy (earliest on ties) is returned.
    ``resume`` is the dict produced by :func:`checkpoint_state`. ``callback``
    receives each :class:`HistoryEntry` and may return True to stop.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    K = spec.num_classes
    if weights is None:
        weights = class_weights(train_set.labels, K, cfg.balancing, cfg.ignore_label, cfg.frequency_mode)
    wv = np.asarray(weights, dtype=spec.dtype)
    n = len(train_set)
    per_epoch = iterations_per_epoch(n, cfg.batch_size)
    opt = OptimizerState.zeros_like(spec.params)
    it, epoch0, batch0 = 0, 0, 0
    if resume is not None:
        it, epoch0, batch0 = (int(v) for v in resume["position"])
        for name, v in resume["velocity"].items():
            opt.velocity[name][...] = v
    visits = np.zeros(n, dtype=np.int64)
    history, best, best_g, best_it = [], None, -1.0, -1
    losses = []
    if history_path is not None and resume is None:
        with open(history_path, "w") as f:
            f.write(HISTORY_HEADER + "\n")

    def run_eval(epoch):
        nonlocal best, best_g, best_it
        rep = evaluate(spec, val_set, cfg.ignore_label)
        entry = HistoryEntry(it, epoch, float(np.mean(losses)) if losses else float("nan"),
                             rep.G, rep.C, rep.mIoU, rep.BF)
        losses.clear()
        history.append(entry)
        if history_path is not None:
            _append_line(history_path, entry.line())
        log.info("iter %d epoch %d loss %.4f G %.4f C %.4f mIoU %.4f BF %.4f", *asdict(entry).values())
        if entry.G > best_g:
            best, best_g, best_it = snapshot(spec), entry.G, it
        return bool(callback and callback(entry))

    stop = False
    for epoch in range(epoch0, cfg.max_epochs):
        order = epoch_order(cfg.seed, epoch, n)
        start = batch0 if epoch == epoch0 else 0
        for b in range(start, per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            visits[idx] += 1
            loss = train_step(spec, train_set.images[idx], train_set.labels[idx], wv, opt, cfg, it)
            losses.append(loss)
            it += 1
            if it % cfg.eval_every == 0:
                stop = run_eval(epoch)
            if stop or (cfg.max_iterations and it >= cfg.max_iterations):
                stop = True
                break
        if stop:
            break
        if cfg.eval_at_epoch_end and it % cfg.eval_every != 0:
            stop = run_eval(epoch)
            if stop:
                break
    if best is None:
        run_eval(epoch)
    return TrainResult(best, spec, history, best_it, it, opt, visits)


def train_step(spec, images, labels, weights, opt, cfg, iteration):
    """One forward/backward/update; returns the (summed) batch loss."""
    spec.set_mode("train")
    for t in spec.params.values():
        t.grad = None
    out = forward(spec, images, mode="train", seed=cfg.seed * 1_000_003 + iteration)
    try:
        loss = weighted_cross_entropy(out.logits, labels, weights, cfg.ignore_label)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"{exc} at iteration {iteration}; try a smaller lr") from exc
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at iteration {iteration}; try a smaller lr")
    backward(loss)
    sgd_momentum_step(spec.params, opt, cfg.lr, cfg.momentum)
    return value


def checkpoint_state(result_or_opt, iteration, n_train, batch_size):
    """Extra records needed to resume training exactly after ``iteration`` steps."""
    opt = getattr(result_or_opt, "optimizer", result_or_opt)
    per_epoch = iterations_per_epoch(n_train, batch_size)
    position = np.array([iteration, iteration // per_epoch, iteration % per_epoch], dtype=np.int64)
    extra = {"train/position": position}
    for name, v in opt.velocity.items():
        extra[f"opt/{name}"] = v
    return extra


def resume_state(extra):
    return {
        "position": extra["train/position"],
        "velocity": {k[len("opt/"):]: v for k, v in extra.items() if k.startswith("opt/")},
    }


def build_from_config(cfg: TrainConfig, num_classes, in_channels=3):
    return arch.build_variant(cfg.variant, num_classes, depth=cfg.depth, channels=cfg.channels,
                              kernel=cfg.kernel, seed=cfg.seed, in_channels=in_channels, dtype=cfg.dtype)


def write_history(path, history):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(HISTORY_HEADER + "\n")
        for e in history:
            f.write(e.line() + "\n")
    os.replace(tmp, path)
