"""Jensen-Shannon estimators of mutual information and self-information.

A :class:`Discriminator` scores (local, global) view pairs: a 1x1-conv stack
embeds every spatial location of one feature map, a pooled MLP embeds the
other map as a vector, and the score is their dot product. Positive pairs come
from the same sample, negative pairs from a deranged batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as F
from .nn import Conv2d, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class PairingPlan:
    """Batch permutation used to form negative pairs; never maps i to itself."""

    perm: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.perm)
        if perm.ndim != 1 or sorted(perm.tolist()) != list(range(len(perm))):
            raise ValueError("perm must be a permutation of 0..N-1")
        if np.any(perm == np.arange(len(perm))):
            raise ValueError("perm must be a derangement (no fixed points)")

    @property
    def batch_size(self) -> int:
        return len(self.perm)


def sample_negatives(batch_size: int) -> PairingPlan:
    """Cyclic shift by one: sample i is paired against sample (i + 1) mod N."""
    if batch_size < 2:
        raise ValueError(f"need at least 2 samples to form negatives, got {batch_size}")
    return PairingPlan(np.roll(np.arange(batch_size), -1))


class Discriminator(Module):
    """Scorer T_phi over (local map, global vector) pairs.

    Args:
        local_channels: channels of the feature giving the local view.
        global_channels: channels of the feature giving the global view.
        embed_dim: shared embedding width E.
    """

    def __init__(self, local_channels: int, global_channels: int, embed_dim: int = 64, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.embed_dim = embed_dim
        self.local1 = Conv2d(rng, local_channels, embed_dim, 1, padding=0, bias=True)
        self.local2 = Conv2d(rng, embed_dim, embed_dim, 1, padding=0, bias=True)
        self.global1 = Linear(rng, global_channels, embed_dim)
        self.global2 = Linear(rng, embed_dim, embed_dim)
        # He init on both output layers makes initial scores grow like E; shrinking each
        # by E^(-1/4) starts the estimator near the 2 ln 2 zero-score state
        shrink = np.float32(embed_dim ** -0.25)
        self.local2.weight.data *= shrink
        self.global2.weight.data *= shrink

    def local_embed(self, fmap: Tensor) -> Tensor:
        return self.local2(F.relu(self.local1(fmap)))

    def global_embed(self, fmap: Tensor) -> Tensor:
        return self.global2(F.relu(self.global1(F.global_avg_pool(fmap))))

    def zero_(self) -> "Discriminator":
        for p in self.parameters():
            p.data[...] = 0
        return self


def pair_scores(local: Tensor, glob: Tensor) -> Tensor:
    """[N, E, H, W] x [N, E] -> [N, H, W] dot products per location."""
    return F.channel_dot(local, glob)


def jsd_loss(pos_scores: Tensor, neg_scores: Tensor) -> Tensor:
    """E[sp(negative)] + E[sp(-positive)]; lower means more estimated information."""
    if pos_scores.size == 0 or neg_scores.size == 0:
        raise ValueError("score tensors must be non-empty")
    return F.mean(F.softplus(neg_scores)) + F.mean(F.softplus(F.neg(pos_scores)))


def mi_loss(f_local: Tensor, f_global: Tensor, disc: Discriminator, plan: PairingPlan) -> Tensor:
    """JSD loss between the local view of ``f_local`` and the global view of ``f_global``.

    Local embeddings of sample i score against the global embedding of i
    (positive) and of ``plan.perm[i]`` (negative), at every spatial location.
    """
    n = f_local.shape[0]
    if f_global.shape[0] != n:
        raise ValueError(f"batch size mismatch: {n} vs {f_global.shape[0]}")
    if plan.batch_size != n:
        raise ValueError(f"pairing plan is for {plan.batch_size} samples, batch has {n}")
    local = disc.local_embed(f_local)
    glob = disc.global_embed(f_global)
    pos = pair_scores(local, glob)
    neg = pair_scores(local, F.take(glob, plan.perm))
    return jsd_loss(pos, neg)


def si_loss(feature: Tensor, disc: Discriminator, plan: PairingPlan) -> Tensor:
    """Self-information as MI of a feature with itself."""
    return mi_loss(feature, feature, disc, plan)


def mi_benchmark(
    rhos,
    steps: int = 500,
    seed: int = 0,
    dim: int = 4,
    batch_size: int = 256,
    lr: float = 0.05,
    momentum: float = 0.9,
    embed_dim: int = 64,
    eval_size: int = 4096,
) -> list[dict]:
    """Train a fresh estimator per correlation on correlated Gaussians.

    Vectors enter as 1x1 feature maps, so the local and global views coincide
    with the two variables. Every step draws a new batch; the converged loss
    is measured on a held-out draw of ``eval_size`` pairs.
    """
    from .data import GaussianPairSpec, corr_gaussian_batch
    from .training import OptimState, sgd_step

    results = []
    for rho in rhos:
        spec = GaussianPairSpec(float(rho), dim)
        disc = Discriminator(dim, dim, embed_dim, seed=seed)
        state = OptimState(lr, momentum, 0.0)
        params = disc.parameters()
        rng = np.random.default_rng([seed, 1])
        for _ in range(steps):
            x, y = corr_gaussian_batch(spec, batch_size, rng.integers(2**63))
            loss = mi_loss(_as_map(x), _as_map(y), disc, sample_negatives(batch_size))
            for p in params:
                p.grad = None
            loss.backward()
            sgd_step(params, state)
        x, y = corr_gaussian_batch(spec, eval_size, [seed, 2])
        with F.no_grad():
            final = mi_loss(_as_map(x), _as_map(y), disc, sample_negatives(eval_size)).item()
        results.append({"rho": spec.rho, "analytic_mi": spec.analytic_mi_nats, "loss": final})
    return results


def _as_map(v: Tensor) -> Tensor:
    return F.reshape(v, (v.shape[0], v.shape[1], 1, 1))
