import math

import numpy as np
import pytest

from musekd import tensor as F
from musekd.nn import BackboneSpec, FeatureSet, build_backbone
from musekd.objective import (
    VARIANTS,
    LossReport,
    MuseEstimators,
    ObjectiveConfig,
    additive_muse,
    cross_entropy,
    kd_loss,
    l2_discrepancy,
    multiplicative_muse,
    table5_configs,
    total_loss,
)
from musekd.tensor import Tensor

from conftest import gradcheck, to_float64

RNG = np.random.default_rng(7)


def test_ce_of_uniform_logits_is_log_k():
    for k in (2, 10, 100):
        assert cross_entropy(Tensor(np.zeros((5, k))), np.zeros(5, int)).item() == pytest.approx(math.log(k), abs=1e-6)


def test_ce_matches_scipy():
    from scipy.special import log_softmax

    logits, labels = RNG.standard_normal((6, 4)), np.array([0, 3, 1, 1, 2, 0])
    expect = -log_softmax(logits, axis=1)[np.arange(6), labels].mean()
    with F.default_dtype(np.float64):
        assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(expect, rel=1e-12)


def test_ce_label_range_checked():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0]))


def test_kd_of_identical_logits_is_zero():
    for dtype in (np.float32, np.float64):
        x = (10 * RNG.standard_normal((8, 10))).astype(dtype)
        for tau in (1.0, 3.0, 4.0, 7.5):
            assert abs(kd_loss(Tensor(x), Tensor(x), tau).item()) <= 1e-7


def test_kd_matches_scipy_kl():
    from scipy.special import rel_entr, softmax

    s, t, tau = RNG.standard_normal((5, 6)), RNG.standard_normal((5, 6)), 4.0
    p, q = softmax(t / tau, axis=1), softmax(s / tau, axis=1)
    expect = tau**2 * rel_entr(p, q).sum(axis=1).mean()
    with F.default_dtype(np.float64):
        assert kd_loss(Tensor(s), Tensor(t), tau).item() == pytest.approx(expect, rel=1e-10)


def test_kd_teacher_gets_no_gradient():
    s = Tensor(RNG.standard_normal((3, 4)), requires_grad=True)
    t = Tensor(RNG.standard_normal((3, 4)), requires_grad=True)
    kd_loss(s, t).backward()
    assert s.grad is not None and t.grad is None


def test_muse_arithmetic_exact():
    assert additive_muse(0.75, 1.25) == 2.0
    assert multiplicative_muse(0.75, 1.25) == 0.9375
    with F.default_dtype(np.float64):
        si, mi = Tensor(np.array(0.6931), requires_grad=True), Tensor(np.array(1.2), requires_grad=True)
        assert additive_muse(si, mi).item() == 0.6931 + 1.2
        assert multiplicative_muse(si, mi).item() == 0.6931 * 1.2


def test_multiplicative_gradient_wrt_mi_is_si_exactly():
    for dtype in (np.float32, np.float64):
        with F.default_dtype(dtype):
            si = Tensor(np.array(1.3862943611198906, dtype=dtype), requires_grad=True)
            mi = Tensor(np.array(0.417, dtype=dtype), requires_grad=True)
            multiplicative_muse(si, mi).backward()
            assert mi.grad == si.data and si.grad == mi.data


def test_l2_discrepancy():
    a, b = RNG.standard_normal((2, 3, 2, 2)), RNG.standard_normal((2, 3, 2, 2))
    with F.default_dtype(np.float64):
        assert l2_discrepancy(Tensor(a), Tensor(b)).item() == pytest.approx(((a - b) ** 2).mean())
    with pytest.raises(ValueError):
        l2_discrepancy(Tensor(a), Tensor(b[:, :2]))


@pytest.mark.parametrize("kwargs", [dict(muse_variant="sum"), dict(lambda_muse=-1.0), dict(lambda_kd=float("nan")),
                                    dict(kd_temperature=0.0), dict(embed_dim=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ObjectiveConfig(**kwargs)


def test_config_defaults():
    cfg = ObjectiveConfig()
    assert (cfg.lambda_muse, cfg.lambda_kd, cfg.kd_temperature, cfg.muse_variant) == (1.0, 1.0, 4.0, "additive")


def test_table5_rows_cover_variants():
    rows = table5_configs()
    assert {c.muse_variant for c in rows.values()} == set(VARIANTS)
    assert rows["(MI×SI) + CE + KD"] == ObjectiveConfig("multiplicative", True, True)
    assert rows["baseline"] == ObjectiveConfig("none", False, False)


# ---------------------------------------------------------------------------
# composed objective
# ---------------------------------------------------------------------------

SHAPES = [(3, 4, 4), (5, 2, 2), (6, 2, 2)]
N, K = 4, 5


def _features(arrays):
    *feats, l1, l2, l3 = arrays
    return FeatureSet(list(feats), [l1, l2, l3])


def _inputs():
    feats = [RNG.standard_normal((N, *s)) for s in SHAPES]
    logits = [RNG.standard_normal((N, K)) for _ in range(3)]
    return feats + logits


class _Proj:
    """Stand-in bottleneck projection: fixed 1x1 channel map plus spatial pooling."""

    def __init__(self, c_in, c_out, size_in):
        self.w = Tensor(RNG.standard_normal((c_out, c_in, 1, 1)))
        self.stride = size_in // 2

    def project(self, f):
        return F.conv2d(f, self.w, stride=self.stride)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("heads_on", [False, True])
def test_grad_total_loss_all_variants(variant, heads_on):
    cfg = ObjectiveConfig(variant, use_ce_heads=heads_on, use_kd_heads=heads_on, lambda_muse=0.7,
                          lambda_kd=1.3, kd_temperature=3.0, embed_dim=4)
    with F.default_dtype(np.float64):
        est = MuseEstimators([3, 5], 6, 4, seed=1, use_mi=cfg.uses_mi, use_si=cfg.uses_si)
        heads = [_Proj(3, 6, 4), _Proj(5, 6, 2)]
    for d in est.discriminators():
        to_float64(d)
    labels = np.array([0, 4, 2, 1])
    inputs = _inputs()
    # stop-gradient targets enter as constants so finite differences see the same function
    frozen = dict(teacher_logits=Tensor(inputs[-1].copy()))
    if variant == "l2":
        frozen["global_feature"] = Tensor(inputs[2].copy())

    def build(*arrays):
        loss, _ = total_loss(_features(arrays), labels, est, cfg, heads=heads, **frozen)
        return loss

    assert gradcheck(build, inputs, est.parameters()) < 1e-4


@pytest.mark.parametrize("variant", ["l2", "additive"])
def test_internal_stop_gradient_matches_explicit_constants(variant):
    cfg = ObjectiveConfig(variant, embed_dim=4)
    with F.default_dtype(np.float64):
        est = MuseEstimators([3, 5], 6, 4, seed=1, use_mi=cfg.uses_mi, use_si=cfg.uses_si)
        heads = [_Proj(3, 6, 4), _Proj(5, 6, 2)]
        inputs = _inputs()
        labels = np.array([0, 4, 2, 1])
        grads = []
        for explicit in (False, True):
            ts = [Tensor(a, requires_grad=True) for a in inputs]
            kw = dict(teacher_logits=Tensor(inputs[-1].copy())) if explicit else {}
            if explicit and variant == "l2":
                kw["global_feature"] = Tensor(inputs[2].copy())
            loss, _ = total_loss(_features(ts), labels, est, cfg, heads=heads, **kw)
            loss.backward()
            grads.append([t.grad for t in ts])
    for a, b in zip(*grads):
        if a is None or b is None:
            assert a is None and b is None
        else:
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_grad_total_loss_with_external_teacher():
    cfg = ObjectiveConfig("multiplicative", False, False, embed_dim=4)
    with F.default_dtype(np.float64):
        est = MuseEstimators([3, 5], 7, 4, seed=2)
        glob = Tensor(RNG.standard_normal((N, 7, 2, 2)))
        teacher = Tensor(RNG.standard_normal((N, K)))
    for d in est.discriminators():
        to_float64(d)
    labels = np.array([1, 1, 0, 3])

    def build(*arrays):
        loss, _ = total_loss(_features(arrays), labels, est, cfg, global_feature=glob,
                             final_teacher_logits=teacher)
        return loss

    assert gradcheck(build, _inputs(), est.parameters()) < 1e-4


@pytest.mark.parametrize("variant", ["none", "mi_only", "additive", "multiplicative"])
def test_report_total_is_consistent(variant):
    net = build_backbone(BackboneSpec("small-cnn-4", 10, in_channels=1, input_size=28), 0)
    cfg = ObjectiveConfig(variant, lambda_muse=0.5, lambda_kd=2.0)
    est = MuseEstimators.for_backbone(net, cfg, seed=1)
    x = Tensor(RNG.standard_normal((6, 1, 28, 28)))
    fs = net.forward_collect(x)
    loss, rep = total_loss(fs, np.arange(6) % 10, est, cfg, final_teacher_logits=fs.logits[-1] * 0.5)
    assert isinstance(rep, LossReport)
    assert rep.total == loss.item()
    assert rep.recompute_total() == pytest.approx(rep.total, rel=1e-5)
    if variant == "none":
        assert all(math.isnan(v) for v in rep.mi + rep.si + rep.muse)
    if variant == "additive":
        for s, m, u in zip(rep.si, rep.mi, rep.muse):
            assert u == pytest.approx(s + m, rel=1e-6)
    if variant == "multiplicative":
        for s, m, u in zip(rep.si, rep.mi, rep.muse):
            assert u == pytest.approx(s * m, rel=1e-6)


def test_zero_lambda_leaves_total_unchanged():
    net = build_backbone(BackboneSpec("small-cnn-4", 10, in_channels=1, input_size=28), 0)
    x = Tensor(RNG.standard_normal((4, 1, 28, 28)))
    fs = net.forward_collect(x, train_mode=False)
    y = np.arange(4)
    base, _ = total_loss(fs, y, None, ObjectiveConfig("none", True, False))
    cfg = ObjectiveConfig("additive", True, True, lambda_muse=0.0, lambda_kd=0.0)
    est = MuseEstimators.for_backbone(net, cfg)
    zero, rep = total_loss(fs, y, est, cfg)
    assert zero.item() == base.item()
    assert not any(math.isnan(v) for v in rep.mi)  # still reported


def test_l2_variant_requires_heads():
    fs = _features([Tensor(a) for a in _inputs()])
    with pytest.raises(ValueError, match="heads"):
        total_loss(fs, np.zeros(N, int), None, ObjectiveConfig("l2"))


def test_estimators_have_independent_weights():
    est = MuseEstimators([4, 4], 4, 8, seed=0)
    a, b = est.mi[0].parameters()[0].data, est.mi[1].parameters()[0].data
    assert est.mi[0] is not est.mi[1] and not np.array_equal(a, b)
    names = [n for n, _ in est.named_parameters()]
    assert len(names) == len(set(names)) and names[0].startswith("mi1.")
