"""Optimization loop and the self-, online- and offline-distillation drivers."""

from __future__ import annotations

import contextlib
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset, augment
from .metrics import MetricsLog
from .nn import Backbone, CompactModel
from .objective import LossReport, MuseEstimators, ObjectiveConfig, total_loss
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

AUGMENT_MODES = ("none", "crop", "crop_flip")


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")


def sgd_step(params, state: OptimState, allow_missing: bool = False) -> None:
    """In-place SGD with momentum and coupled weight decay.

    v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v

    Parameters without a gradient raise unless ``allow_missing``, in which
    case they are left untouched (their momentum buffer included).
    """
    for p in params:
        if p.grad is None:
            if allow_missing:
                continue
            raise ValueError(f"parameter {p.name or tuple(p.shape)} has no gradient")
        cast = p.dtype.type  # keep float32 params in float32 arithmetic
        d = p.grad + cast(state.weight_decay) * p.data if state.weight_decay else p.grad
        buf = state.buffers.get(id(p))
        if buf is None:
            buf = np.zeros_like(p.data)
            state.buffers[id(p)] = buf
        buf *= cast(state.momentum)
        buf += d
        p.data -= cast(state.lr) * buf


@dataclass
class Schedule:
    base_lr: float = 0.05
    milestones: tuple = (10, 15)
    gamma: float = 0.1
    total_epochs: int = 20

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        m = self.milestones
        if any(a >= b for a, b in zip(m, m[1:])) or any(x < 0 or x >= self.total_epochs for x in m):
            raise ValueError(f"milestones {m} must be strictly increasing and < total_epochs")

    @classmethod
    def cifar_recipe(cls) -> "Schedule":
        """200 epochs from 0.1, divided by 10 after epochs 75, 130 and 180."""
        return cls(0.1, (75, 130, 180), 0.1, 200)


def lr_at_epoch(schedule: Schedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.gamma**passed


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def thread_limits(threads: int | None = None):
    """Cap BLAS threads. ``MUSE_THREADS=0`` means single-threaded deterministic mode."""
    if threads is None:
        env = os.environ.get("MUSE_THREADS")
        if env is None or env == "":
            yield
            return
        threads = int(env)
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=max(threads, 1)):
        yield


@dataclass
class DataSplits:
    train: LabeledDataset
    test: LabeledDataset


@dataclass
class TrainSettings:
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: str = "none"
    log_every: int = 20
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.augment not in AUGMENT_MODES:
            raise ValueError(f"augment must be one of {AUGMENT_MODES}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (negative pairs need two samples)")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")


@dataclass
class RunResult:
    metrics: MetricsLog
    model: Backbone
    estimators: MuseEstimators | None = None
    reports: list[LossReport] = field(default_factory=list)


def _check_compat(model: Backbone, data: DataSplits) -> None:
    spec = model.spec
    c, h, w = data.train.image_shape
    if (c, h, w) != (spec.in_channels, spec.input_size, spec.input_size):
        raise ValueError(
            f"data images are {c}x{h}x{w} but the backbone expects "
            f"{spec.in_channels}x{spec.input_size}x{spec.input_size}"
        )
    if data.test.image_shape != data.train.image_shape:
        raise ValueError("train and test images differ in shape")
    if data.train.num_classes > spec.num_classes:
        raise ValueError(
            f"dataset has {data.train.num_classes} classes, backbone only {spec.num_classes}"
        )


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def _load_batch(ds: LabeledDataset, idx, mode: str, seed: int) -> tuple[Tensor, np.ndarray]:
    images = ds.images[idx]
    if mode != "none":
        images = augment(images, seed, pad=4, flip=mode == "crop_flip")
    return Tensor(images), ds.labels[idx]


def evaluate(model: Backbone | CompactModel, ds: LabeledDataset, batch_size: int = 500) -> list[float]:
    """Top-1 accuracy (percent) of every head, or of the single exit of a CompactModel."""
    model.eval()
    correct = None
    with no_grad():
        for start in range(0, len(ds), batch_size):
            x = Tensor(ds.images[start : start + batch_size])
            y = ds.labels[start : start + batch_size]
            if isinstance(model, CompactModel):
                logits = [model(x)]
            else:
                logits = model.forward_collect(x).logits
            hits = np.array([(lg.data.argmax(axis=1) == y).sum() for lg in logits])
            correct = hits if correct is None else correct + hits
    return list(100.0 * correct / len(ds))


class _Window:
    """Running mean of LossReport fields between log points."""

    def __init__(self):
        self.reports: list[LossReport] = []

    def add(self, report: LossReport) -> None:
        self.reports.append(report)

    def flush(self) -> LossReport:
        rs, self.reports = self.reports, []

        def avg(values):
            return float(np.mean(values))

        return LossReport(
            ce=[avg(v) for v in zip(*(r.ce for r in rs))],
            kd=[avg(v) for v in zip(*(r.kd for r in rs))],
            mi=[avg(v) for v in zip(*(r.mi for r in rs))],
            si=[avg(v) for v in zip(*(r.si for r in rs))],
            muse=[avg(v) for v in zip(*(r.muse for r in rs))],
            total=avg([r.total for r in rs]),
            weights=rs[-1].weights,
            kd_final=avg([r.kd_final for r in rs]),
        )


class _Tracker:
    """Per-epoch bookkeeping shared by the three drivers."""

    def __init__(self, metrics: MetricsLog, num_modules: int, log_every: int):
        self.metrics = metrics
        self.num_modules = num_modules
        self.log_every = log_every
        self.window = _Window()
        self.reports: list[LossReport] = []
        self.reset()

    def reset(self):
        self.correct = np.zeros(self.num_modules)
        self.seen = 0

    def record(self, epoch, step, fs, labels, report):
        if not math.isfinite(report.total):
            raise FloatingPointError(f"non-finite loss {report.total} at epoch {epoch}, step {step}")
        self.correct += [(lg.data.argmax(axis=1) == labels).sum() for lg in fs.logits]
        self.seen += len(labels)
        self.reports.append(report)
        self.window.add(report)
        if step % self.log_every == 0:
            self.metrics.add_report(epoch, step, self.window.flush())

    def end_epoch(self, epoch, step, model, test, eval_batch_size):
        if self.window.reports:
            self.metrics.add_report(epoch, step, self.window.flush())
        for t, acc in enumerate(100.0 * self.correct / max(self.seen, 1), start=1):
            self.metrics.add(epoch, step, "train", t, "top1", acc)
        test_acc = evaluate(model, test, eval_batch_size)
        for t, acc in enumerate(test_acc, start=1):
            self.metrics.add(epoch, step, "test", t, "top1", acc)
        self.reset()
        return test_acc


def _zero(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def run_self_distill(
    backbone: Backbone,
    data: DataSplits,
    objective: ObjectiveConfig,
    schedule: Schedule,
    seed: int,
    settings: TrainSettings | None = None,
    run_id: str = "self",
) -> RunResult:
    """Train one network whose deep module supervises its shallow ones.

    Every head is logged each epoch (train running top-1 and test top-1), and
    every CE/KD/MI/SI/MUSE term every ``settings.log_every`` steps.
    """
    settings = settings or TrainSettings()
    _check_compat(backbone, data)
    estimators = None
    if objective.uses_mi or objective.uses_si:
        estimators = MuseEstimators.for_backbone(backbone, objective, seed=seed + 1)
    params = backbone.parameters() + (estimators.parameters() if estimators else [])
    state = OptimState(schedule.base_lr, settings.momentum, settings.weight_decay)
    rng = np.random.default_rng(seed)
    metrics = MetricsLog(run_id)
    tracker = _Tracker(metrics, backbone.num_modules, settings.log_every)

    step = 0
    for epoch in range(schedule.total_epochs):
        state.lr = lr_at_epoch(schedule, epoch)
        metrics.add(epoch, step, "train", None, "lr", state.lr)
        for idx in _batches(len(data.train), settings.batch_size, rng):
            step += 1
            x, y = _load_batch(data.train, idx, settings.augment, seed * 1_000_003 + step)
            backbone.train()
            fs = backbone.forward_collect(x)
            loss, report = total_loss(fs, y, estimators, objective, heads=backbone.heads)
            _zero(params)
            loss.backward()
            sgd_step(params, state, allow_missing=True)
            tracker.record(epoch, step, fs, y, report)
        acc = tracker.end_epoch(epoch, step, backbone, data.test, settings.eval_batch_size)
        log.info("%s epoch %d lr %.4g test top1 %s", run_id, epoch, state.lr,
                 " ".join(f"{a:.2f}" for a in acc))
    return RunResult(metrics, backbone, estimators, tracker.reports)


@dataclass
class OnlineResult:
    net1: RunResult
    net2: RunResult

    @property
    def metrics(self) -> MetricsLog:
        merged = MetricsLog(self.net1.metrics.run_id.rsplit(".", 1)[0])
        merged.rows = self.net1.metrics.rows + self.net2.metrics.rows
        return merged


def run_online_distill(
    net1: Backbone,
    net2: Backbone,
    data: DataSplits,
    objective: ObjectiveConfig,
    schedule: Schedule,
    seed: int,
    settings: TrainSettings | None = None,
    run_id: str = "online",
    seeds: tuple[int, int] | None = None,
) -> OnlineResult:
    """Train two networks from scratch, each distilling from the other.

    Each network's shallow features compute MUSE against the other network's
    last feature, and its final logits receive KD from the other's final
    logits (when ``use_kd_heads`` is set). Intermediate heads get no CE or KD.
    The peer's feature and logits are treated as constants. ``seeds`` seeds
    the two sets of discriminators (default: ``(seed, seed)``).
    """
    settings = settings or TrainSettings()
    _check_compat(net1, data)
    _check_compat(net2, data)
    if net1.num_modules < 2 or net2.num_modules < 2:
        raise ValueError("both networks need at least two modules")
    cfg = replace(objective, use_ce_heads=False, use_kd_heads=False)
    s1, s2 = seeds if seeds is not None else (seed, seed)
    nets = (net1, net2)
    ests = [None, None]
    if objective.uses_mi or objective.uses_si:
        ests[0] = MuseEstimators.for_backbone(net1, cfg, seed=s1 + 1,
                                              global_channels=net2.feature_shapes[-1][0])
        ests[1] = MuseEstimators.for_backbone(net2, cfg, seed=s2 + 1,
                                              global_channels=net1.feature_shapes[-1][0])
    params = [n.parameters() + (e.parameters() if e else []) for n, e in zip(nets, ests)]
    states = [OptimState(schedule.base_lr, settings.momentum, settings.weight_decay) for _ in nets]
    metrics = [MetricsLog(f"{run_id}.net1"), MetricsLog(f"{run_id}.net2")]
    trackers = [_Tracker(m, n.num_modules, settings.log_every) for m, n in zip(metrics, nets)]
    rng = np.random.default_rng(seed)

    step = 0
    for epoch in range(schedule.total_epochs):
        lr = lr_at_epoch(schedule, epoch)
        for st, m in zip(states, metrics):
            st.lr = lr
            m.add(epoch, step, "train", None, "lr", lr)
        for idx in _batches(len(data.train), settings.batch_size, rng):
            step += 1
            x, y = _load_batch(data.train, idx, settings.augment, seed * 1_000_003 + step)
            fss = [n.train().forward_collect(x) for n in nets]
            for k in (0, 1):
                peer = fss[1 - k]
                loss, report = total_loss(
                    fss[k], y, ests[k], cfg,
                    global_feature=peer.features[-1].detach(),
                    final_teacher_logits=peer.logits[-1] if objective.use_kd_heads else None,
                    heads=nets[k].heads,
                )
                _zero(params[k])
                loss.backward()
                sgd_step(params[k], states[k], allow_missing=True)
                trackers[k].record(epoch, step, fss[k], y, report)
        for k in (0, 1):
            acc = trackers[k].end_epoch(epoch, step, nets[k], data.test, settings.eval_batch_size)
            log.info("%s net%d epoch %d test top1 %s", run_id, k + 1, epoch,
                     " ".join(f"{a:.2f}" for a in acc))
    return OnlineResult(
        RunResult(metrics[0], net1, ests[0], trackers[0].reports),
        RunResult(metrics[1], net2, ests[1], trackers[1].reports),
    )


def run_offline_distill(
    teacher: Backbone,
    student: Backbone,
    data: DataSplits,
    objective: ObjectiveConfig,
    schedule: Schedule,
    seed: int,
    settings: TrainSettings | None = None,
    run_id: str = "offline",
) -> RunResult:
    """Distill a frozen teacher into a student.

    The student's shallow features compute MUSE against the teacher's fixed
    last feature; the student's final logits get CE plus KD from the teacher.
    The teacher runs in eval mode without gradients, so its weights and
    batchnorm statistics never change.
    """
    settings = settings or TrainSettings()
    _check_compat(student, data)
    _check_compat(teacher, data)
    cfg = replace(objective, use_ce_heads=False, use_kd_heads=False)
    estimators = None
    if objective.uses_mi or objective.uses_si:
        estimators = MuseEstimators.for_backbone(
            student, cfg, seed=seed + 1, global_channels=teacher.feature_shapes[-1][0]
        )
    params = student.parameters() + (estimators.parameters() if estimators else [])
    state = OptimState(schedule.base_lr, settings.momentum, settings.weight_decay)
    rng = np.random.default_rng(seed)
    metrics = MetricsLog(run_id)
    tracker = _Tracker(metrics, student.num_modules, settings.log_every)
    teacher.eval()

    step = 0
    for epoch in range(schedule.total_epochs):
        state.lr = lr_at_epoch(schedule, epoch)
        metrics.add(epoch, step, "train", None, "lr", state.lr)
        for idx in _batches(len(data.train), settings.batch_size, rng):
            step += 1
            x, y = _load_batch(data.train, idx, settings.augment, seed * 1_000_003 + step)
            with no_grad():
                tfs = teacher.forward_collect(x, train_mode=False)
            student.train()
            fs = student.forward_collect(x)
            loss, report = total_loss(
                fs, y, estimators, cfg,
                global_feature=tfs.features[-1],
                final_teacher_logits=tfs.logits[-1] if objective.use_kd_heads else None,
                heads=student.heads,
            )
            _zero(params)
            loss.backward()
            sgd_step(params, state, allow_missing=True)
            tracker.record(epoch, step, fs, y, report)
        acc = tracker.end_epoch(epoch, step, student, data.test, settings.eval_batch_size)
        log.info("%s epoch %d test top1 %s", run_id, epoch, " ".join(f"{a:.2f}" for a in acc))
    return RunResult(metrics, student, estimators, tracker.reports)


def truncate(backbone: Backbone, k: int) -> CompactModel:
    """Early-exit model: modules 1..k and head k, sharing the backbone's weights."""
    return backbone.truncate(k)
