"""Training objective: MUSE variants, per-head cross-entropy, logits KD, L2 hints."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as F
from .infoest import Discriminator, PairingPlan, mi_loss, sample_negatives, si_loss
from .nn import Backbone, FeatureSet
from .tensor import Tensor

VARIANTS = ("none", "mi_only", "si_only", "additive", "multiplicative", "l2")


@dataclass
class ObjectiveConfig:
    muse_variant: str = "additive"
    use_ce_heads: bool = True
    use_kd_heads: bool = True
    lambda_muse: float = 1.0
    lambda_kd: float = 1.0
    kd_temperature: float = 4.0
    embed_dim: int = 64

    def __post_init__(self):
        if self.muse_variant not in VARIANTS:
            raise ValueError(f"muse_variant must be one of {VARIANTS}, got {self.muse_variant!r}")
        for name in ("lambda_muse", "lambda_kd"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if not self.kd_temperature > 0:
            raise ValueError(f"kd_temperature must be > 0, got {self.kd_temperature}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")

    @property
    def uses_mi(self) -> bool:
        return self.muse_variant in ("mi_only", "additive", "multiplicative")

    @property
    def uses_si(self) -> bool:
        return self.muse_variant in ("si_only", "additive", "multiplicative")

    def to_dict(self) -> dict:
        return asdict(self)


def table5_configs() -> dict[str, ObjectiveConfig]:
    """Ablation rows expressible as configs, keyed by their table label."""
    rows = {}
    for label, variant in (
        ("MI", "mi_only"),
        ("SI", "si_only"),
        ("(MI+SI)", "additive"),
        ("(MI×SI)", "multiplicative"),
        ("L2", "l2"),
    ):
        rows[label] = ObjectiveConfig(variant, use_ce_heads=False, use_kd_heads=False)
        rows[f"{label} + CE"] = ObjectiveConfig(variant, use_ce_heads=True, use_kd_heads=False)
        rows[f"{label} + CE + KD"] = ObjectiveConfig(variant, use_ce_heads=True, use_kd_heads=True)
    rows["CE"] = ObjectiveConfig("none", use_ce_heads=True, use_kd_heads=False)
    rows["CE + KD"] = ObjectiveConfig("none", use_ce_heads=True, use_kd_heads=True)
    rows["baseline"] = ObjectiveConfig("none", use_ce_heads=False, use_kd_heads=False)
    return rows


@dataclass
class LossReport:
    """Scalar breakdown of one objective evaluation.

    Lists are indexed by module; ``ce`` has T entries, the rest T-1. Terms a
    config does not compute are NaN. The weights used to form ``total`` are
    kept so the total can be recomputed from the parts.
    """

    ce: list[float]
    kd: list[float]
    mi: list[float]
    si: list[float]
    muse: list[float]
    total: float
    weights: dict = field(default_factory=dict)
    kd_final: float = float("nan")

    def recompute_total(self) -> float:
        w = self.weights
        total = self.ce[-1]
        if w.get("ce_heads"):
            total += sum(self.ce[:-1])
        if w.get("kd"):
            total += w["kd"] * sum(self.kd)
        if w.get("muse"):
            total += w["muse"] * sum(self.muse)
        if w.get("kd_final"):
            total += w["kd_final"] * self.kd_final
        return total


def additive_muse(si_t, mi_t):
    """Loss-space form of H(F_i) + I(F_i; F_T)."""
    return si_t + mi_t


def multiplicative_muse(si_t, mi_t):
    """Loss-space form of H(F_i) x I(F_i; F_T): the SI loss weights the MI gradient."""
    return si_t * mi_t


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = F.log_softmax(logits, axis=1)
    picked = F.take(logp, (np.arange(n), labels))
    return F.neg(F.mean(picked))


def kd_loss(student_logits: Tensor, teacher_logits, temperature: float = 4.0) -> Tensor:
    """tau^2 * KL(softmax(teacher/tau) || softmax(student/tau)), batch mean.

    The teacher side is treated as a constant.
    """
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if teacher.shape != student_logits.shape:
        raise ValueError(f"shape mismatch: student {student_logits.shape} vs teacher {teacher.shape}")
    inv_t = student_logits.dtype.type(1.0 / temperature)
    # scale both sides identically so equal logits give exactly zero
    log_p = F.log_softmax_np(teacher.astype(student_logits.dtype) * inv_t, axis=1)
    p = np.exp(log_p)
    log_q = F.log_softmax(F.scale(student_logits, 1.0 / temperature), axis=1)
    n = student_logits.shape[0]
    # sum p*log p is a constant; the subtraction keeps KL exactly zero on identical inputs
    per_sample = F.tsum(F.mul(log_q, -p) + p * log_p, axis=1)
    return F.scale(F.tsum(per_sample), temperature**2 / n)


def l2_discrepancy(projected: Tensor, target: Tensor) -> Tensor:
    if projected.shape != target.shape:
        raise ValueError(f"shape mismatch after projection: {projected.shape} vs {target.shape}")
    diff = projected - target
    return F.mean(diff * diff)


class MuseEstimators:
    """One MI and one SI discriminator per shallow module, no weight sharing.

    ``global_channels`` is the channel count of the feature that supplies the
    global view for MI terms (F_T of the same network, or a teacher's F_T).
    """

    def __init__(self, feature_channels, global_channels: int, embed_dim: int = 64, seed: int = 0,
                 use_mi: bool = True, use_si: bool = True):
        rng = np.random.default_rng(seed)
        self.mi = [
            Discriminator(c, global_channels, embed_dim, seed=int(rng.integers(2**31)))
            if use_mi else None
            for c in feature_channels
        ]
        self.si = [
            Discriminator(c, c, embed_dim, seed=int(rng.integers(2**31))) if use_si else None
            for c in feature_channels
        ]

    @classmethod
    def for_backbone(cls, backbone: Backbone, config: ObjectiveConfig, seed: int = 0,
                     global_channels: int | None = None):
        channels = [s[0] for s in backbone.feature_shapes[:-1]]
        g = backbone.feature_shapes[-1][0] if global_channels is None else global_channels
        return cls(channels, g, config.embed_dim, seed, use_mi=config.uses_mi, use_si=config.uses_si)

    def discriminators(self) -> list[Discriminator]:
        return [d for d in self.mi + self.si if d is not None]

    def parameters(self) -> list[Tensor]:
        return [p for d in self.discriminators() for p in d.parameters()]

    def named_parameters(self):
        for kind, discs in (("mi", self.mi), ("si", self.si)):
            for t, d in enumerate(discs, start=1):
                if d is not None:
                    yield from d.named_parameters(f"{kind}{t}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def total_loss(
    features: FeatureSet,
    labels,
    estimators: MuseEstimators | None,
    config: ObjectiveConfig,
    *,
    plan: PairingPlan | None = None,
    global_feature: Tensor | None = None,
    teacher_logits: Tensor | None = None,
    final_teacher_logits: Tensor | None = None,
    heads=None,
) -> tuple[Tensor, LossReport]:
    """Compose the self-distillation objective.

    total = ce[T] + [ce heads] sum ce[t] + [kd] lambda_kd sum kd[t]
            + lambda_muse sum variant(t)      for t < T

    ``global_feature`` replaces F_T as the global view for MI terms (online and
    offline distillation). ``teacher_logits`` replaces logits_T as the KD
    teacher. ``final_teacher_logits`` adds lambda_kd * kd(logits_T, teacher), the
    last-layer KD of online/offline distillation. ``heads`` supplies the
    bottleneck projections for the L2 variant.
    """
    T = features.num_modules
    nan = float("nan")
    logits_T = features.logits[-1]
    f_global = features.features[-1] if global_feature is None else global_feature
    teacher = logits_T.detach() if teacher_logits is None else teacher_logits.detach()

    ce_terms = [cross_entropy(lg, labels) for lg in features.logits]
    total = ce_terms[-1]
    report_ce = [t.item() for t in ce_terms]
    report_kd = [nan] * (T - 1)
    report_mi = [nan] * (T - 1)
    report_si = [nan] * (T - 1)
    report_muse = [nan] * (T - 1)

    if config.use_ce_heads:
        for term in ce_terms[:-1]:
            total = total + term
    if config.use_kd_heads:
        for t in range(T - 1):
            kd = kd_loss(features.logits[t], teacher, config.kd_temperature)
            report_kd[t] = kd.item()
            if config.lambda_kd:
                total = total + F.scale(kd, config.lambda_kd)

    if config.muse_variant != "none":
        if plan is None:
            plan = sample_negatives(features.features[0].shape[0])
        for t in range(T - 1):
            f_t = features.features[t]
            mi = si = None
            if config.uses_mi:
                mi = mi_loss(f_t, f_global, estimators.mi[t], plan)
                report_mi[t] = mi.item()
            if config.uses_si:
                si = si_loss(f_t, estimators.si[t], plan)
                report_si[t] = si.item()
            if config.muse_variant == "mi_only":
                term = mi
            elif config.muse_variant == "si_only":
                term = si
            elif config.muse_variant == "additive":
                term = additive_muse(si, mi)
            elif config.muse_variant == "multiplicative":
                term = multiplicative_muse(si, mi)
            else:
                if heads is None:
                    raise ValueError("the l2 variant needs the bottleneck heads for projection")
                term = l2_discrepancy(heads[t].project(f_t), f_global.detach())
            report_muse[t] = term.item()
            if config.lambda_muse:
                total = total + F.scale(term, config.lambda_muse)

    kd_final = nan
    if final_teacher_logits is not None:
        kd = kd_loss(logits_T, final_teacher_logits.detach(), config.kd_temperature)
        kd_final = kd.item()
        if config.lambda_kd:
            total = total + F.scale(kd, config.lambda_kd)

    weights = {
        "kd_final": config.lambda_kd if final_teacher_logits is not None else 0.0,
        "ce_heads": config.use_ce_heads,
        "kd": config.lambda_kd if config.use_kd_heads else 0.0,
        "muse": config.lambda_muse if config.muse_variant != "none" else 0.0,
    }
    report = LossReport(
        report_ce, report_kd, report_mi, report_si, report_muse, total.item(), weights, kd_final
    )
    return total, report

