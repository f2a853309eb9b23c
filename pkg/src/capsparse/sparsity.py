"""Rank-based sparse masking of latent capsules with lifetime-sparsity boosting.

Per batch: routing support psi -> boosted support z -> per-sample ranks ->
exponential mask m -> v' = v * m. After each batch the rank-0 frequency of
every capsule feeds an EMA, and every ``period`` batches the boosts move by
``step`` to push that EMA into [mu_min, mu_max].

Everything here is numpy; the mask is a constant for differentiation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class SparsityConfig:
    n_latent: int = 16
    gamma: float = 12.0
    mask_floor: float = 0.01
    alpha: float = 0.99
    boost_step: float = 0.1
    period: int = 50
    mu_min: float = 0.04
    mu_max: float = 0.1
    ema_every_batch: bool = True

    def __post_init__(self):
        if not 0 < self.mu_min < self.mu_max < 1:
            raise ValueError(f"need 0 < mu_min < mu_max < 1, got {self.mu_min}, {self.mu_max}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.boost_step <= 0:
            raise ValueError("boost_step must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SparsityState:
    g: np.ndarray
    mu: np.ndarray
    n: int = 0
    eps_acc: np.ndarray | None = field(default=None, repr=False)
    acc_count: int = 0

    @classmethod
    def fresh(cls, n_latent: int) -> "SparsityState":
        return cls(g=np.ones(n_latent), mu=np.zeros(n_latent), n=0)

    def to_dict(self) -> dict:
        return {
            "g": self.g.tolist(),
            "mu": self.mu.tolist(),
            "n": self.n,
            "eps_acc": None if self.eps_acc is None else self.eps_acc.tolist(),
            "acc_count": self.acc_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SparsityState":
        acc = d.get("eps_acc")
        return cls(
            g=np.asarray(d["g"], dtype=np.float64),
            mu=np.asarray(d["mu"], dtype=np.float64),
            n=int(d["n"]),
            eps_acc=None if acc is None else np.asarray(acc, dtype=np.float64),
            acc_count=int(d.get("acc_count", 0)),
        )


def aggregate_support(c: np.ndarray) -> np.ndarray:
    """c [K,Wc,Hc,P,L] -> psi [K,L]: max over P, summed over the grid."""
    c = np.asarray(c)
    return c.max(axis=3).sum(axis=(1, 2))


def boost_support(psi: np.ndarray, g: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi)
    g = np.asarray(g)
    if psi.shape[-1] != g.shape[-1]:
        raise ValueError(f"psi has {psi.shape[-1]} capsules, boost vector has {g.shape[-1]}")
    return psi * g


def rank_capsules(z: np.ndarray) -> np.ndarray:
    """Descending rank per row (largest -> 0); ties go to the lower index."""
    z = np.atleast_2d(np.asarray(z))
    order = np.argsort(-z, axis=1, kind="stable")
    r = np.empty_like(order)
    np.put_along_axis(r, order, np.arange(z.shape[1])[None, :].repeat(z.shape[0], 0), axis=1)
    return r


def exp_mask(r: np.ndarray, cfg: SparsityConfig) -> np.ndarray:
    r = np.asarray(r)
    n_latent = r.shape[-1]
    if n_latent < 2:
        raise ValueError("the exponential mask needs at least two capsules")
    m = np.exp(-cfg.gamma * r / (n_latent - 1))
    m[m < cfg.mask_floor] = 0.0
    return m


def apply_mask(v, m) -> Tensor:
    """v [K,L,D] times the constant mask m [K,L] broadcast over D."""
    v = T.as_tensor(v)
    m = np.asarray(m, dtype=v.data.dtype)
    if m.shape != v.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match capsules {v.shape[:2]}")
    return v * Tensor(m[..., None], dtype=v.data.dtype)


def batch_rank0_frequency(r: np.ndarray) -> np.ndarray:
    """Fraction of samples in which each capsule holds rank 0."""
    r = np.atleast_2d(np.asarray(r))
    return (r == 0).mean(axis=0)


def update_ema(mu: np.ndarray, eps: np.ndarray, alpha: float) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if mu.shape != eps.shape:
        raise ValueError(f"EMA shape {mu.shape} != frequency shape {eps.shape}")
    return alpha * mu + (1.0 - alpha) * eps


def boost_update(state: SparsityState, cfg: SparsityConfig) -> SparsityState:
    """Count the batch; every ``cfg.period`` batches nudge boosts toward the band."""
    state.n += 1
    if state.n % cfg.period != 0:
        return state
    g = state.g.copy()
    low = state.mu < cfg.mu_min
    high = state.mu > cfg.mu_max
    g[low] += cfg.boost_step
    g[high] = np.maximum(1.0, g[high] - cfg.boost_step)
    state.g = g
    return state


@dataclass
class MaskResult:
    psi: np.ndarray
    z: np.ndarray
    r: np.ndarray
    m: np.ndarray


class SparseController:
    """Holds config and mutable state; the training loop calls :meth:`mask` then :meth:`after_batch`."""

    def __init__(self, cfg: SparsityConfig, state: SparsityState | None = None):
        self.cfg = cfg
        self.state = state or SparsityState.fresh(cfg.n_latent)

    def mask(self, c: np.ndarray) -> MaskResult:
        psi = aggregate_support(c)
        z = boost_support(psi, self.state.g)
        r = rank_capsules(z)
        return MaskResult(psi, z, r, exp_mask(r, self.cfg))

    def after_batch(self, r: np.ndarray, update_boosts: bool = True):
        eps = batch_rank0_frequency(r)
        st = self.state
        if self.cfg.ema_every_batch:
            st.mu = update_ema(st.mu, eps, self.cfg.alpha)
        else:
            # statistics gated by the period: average the period's batches, then one EMA step
            st.eps_acc = eps if st.eps_acc is None else st.eps_acc + eps
            st.acc_count += 1
            if (st.n + 1) % self.cfg.period == 0:
                st.mu = update_ema(st.mu, st.eps_acc / st.acc_count, self.cfg.alpha)
                st.eps_acc, st.acc_count = None, 0
        if update_boosts:
            boost_update(st, self.cfg)
        else:
            st.n += 1
        return eps
