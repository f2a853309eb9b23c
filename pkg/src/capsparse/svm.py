"""One-vs-rest RBF support vector machines trained by SMO.

The solver follows the second-order working-set selection of Fan, Chen and
Lin (2005), as used by LIBSVM, on a fully precomputed Gram matrix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

TAU = 1e-12


def rbf_kernel(a, b, gamma: float) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"kernel operands differ in length: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.exp(-gamma * np.dot(d, d)))


def rbf_gram(a: np.ndarray, b: np.ndarray, gamma: float, chunk: int = 2048) -> np.ndarray:
    """exp(-gamma * |a_i - b_j|^2) for all pairs."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    bb = (b * b).sum(1)
    out = np.empty((len(a), len(b)))
    for s in range(0, len(a), chunk):
        blk = a[s:s + chunk]
        d2 = (blk * blk).sum(1)[:, None] + bb[None, :] - 2.0 * blk @ b.T
        np.maximum(d2, 0.0, out=d2)
        out[s:s + chunk] = np.exp(-gamma * d2)
    return out


@dataclass
class BinarySolution:
    alpha: np.ndarray
    rho: float
    iterations: int
    gap: float
    converged: bool

    def objective(self, gram: np.ndarray, y: np.ndarray) -> float:
        ya = y * self.alpha
        return 0.5 * ya @ gram @ ya - self.alpha.sum()


def smo_binary(gram: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3,
               max_iter: int | None = None) -> BinarySolution:
    """Solve min 1/2 a'Qa - e'a, 0 <= a <= C, y'a = 0 with Q = yy' * gram."""
    y = np.asarray(y, np.float64)
    n = len(y)
    max_iter = max_iter or max(100_000, 100 * n)
    alpha = np.zeros(n)
    grad = -np.ones(n)
    qd = np.diag(gram).copy()
    it = 0
    gap = np.inf
    pos = y > 0
    while it < max_iter:
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        score = -y * grad
        s_up = np.where(up, score, -np.inf)
        i = int(np.argmax(s_up))
        m_up = s_up[i]
        s_low = np.where(low, score, np.inf)
        m_low = s_low.min()
        gap = m_up - m_low
        if gap < tol:
            break
        b = m_up - score
        cand = low & (b > 0)
        a = qd[i] + qd - 2.0 * gram[i]
        a = np.where(a > 0, a, TAU)
        obj = np.where(cand, -(b * b) / a, np.inf)
        j = int(np.argmin(obj))

        yi, yj = y[i], y[j]
        kij = gram[i, j]
        ai_old, aj_old = alpha[i], alpha[j]
        if yi != yj:
            quad = qd[i] + qd[j] + 2.0 * (yi * yj * kij)
            quad = quad if quad > 0 else TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            quad = qd[i] + qd[j] - 2.0 * (yi * yj * kij)
            quad = quad if quad > 0 else TAU
            delta = (grad[i] - grad[j]) / quad
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        grad += y * (yi * (ai - ai_old) * gram[i] + yj * (aj - aj_old) * gram[j])
        it += 1

    converged = gap < tol
    if not converged:
        log.warning("SMO stopped after %d iterations with KKT gap %.3g (tol %.3g)", it, gap, tol)
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(yg[free].mean())
    else:
        score = -y * grad
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        ub = -np.max(np.where(up, score, -np.inf))
        lb = -np.min(np.where(low, score, np.inf))
        rho = float((ub + lb) / 2)
    return BinarySolution(alpha, rho, it, float(gap), converged)


@dataclass
class SvmModel:
    classes: np.ndarray
    support: np.ndarray  # union of support vectors, standardized
    dual_coef: np.ndarray  # [n_classes, n_support], y_i * alpha_i
    bias: np.ndarray  # [n_classes], decision = K @ coef - bias
    gamma: float
    C: float
    mean: np.ndarray
    std: np.ndarray
    meta: dict

    @property
    def n_features(self) -> int:
        return len(self.mean)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected features of width {self.n_features}, got shape {x.shape}")
        return (x - self.mean) / self.std

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        k = rbf_gram(self.standardize(x), self.support, self.gamma)
        return k @ self.dual_coef.T - self.bias[None, :]

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Labels (argmax, ties to the lowest class index) and decision values."""
        d = self.decision_function(x)
        return self.classes[np.argmax(d, axis=1)], d

    def arrays(self) -> dict[str, np.ndarray]:
        return {"classes": self.classes, "support": self.support, "dual_coef": self.dual_coef,
                "bias": self.bias, "mean": self.mean, "std": self.std}

    @classmethod
    def from_arrays(cls, arrays: dict, gamma: float, C: float, meta: dict) -> "SvmModel":
        return cls(arrays["classes"].astype(np.int64), arrays["support"], arrays["dual_coef"], arrays["bias"],
                   gamma, C, arrays["mean"], arrays["std"], meta)


def standardization(x: np.ndarray, floor: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, np.float64)
    return x.mean(0), np.maximum(x.std(0), floor)


def fit(features, labels, C: float = 10.0, gamma: float | None = None, tol: float = 1e-3,
        max_iter: int | None = None, standardize: bool = True) -> SvmModel:
    """Train one binary machine per class against the rest."""
    x = np.asarray(features, np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError(f"need at least two classes, got {classes.tolist()}")
    if standardize:
        mean, std = standardization(x)
    else:
        mean, std = np.zeros(x.shape[1]), np.ones(x.shape[1])
    xs = (x - mean) / std
    if gamma is None:
        var = xs.var()
        gamma = 1.0 / (x.shape[1] * (var if var > 0 else 1.0))
    gram = rbf_gram(xs, xs, gamma)
    coefs = np.zeros((len(classes), len(x)))
    bias = np.zeros(len(classes))
    info = []
    for ci, cls_ in enumerate(classes):
        y = np.where(labels == cls_, 1.0, -1.0)
        sol = smo_binary(gram, y, C, tol, max_iter)
        coefs[ci] = y * sol.alpha
        bias[ci] = sol.rho
        info.append({"class": int(cls_), "iterations": sol.iterations, "gap": sol.gap, "converged": sol.converged,
                     "n_support": int((sol.alpha > 0).sum())})
    used = np.flatnonzero(np.abs(coefs).sum(0) > 0)
    meta = {"n_train": len(x), "tol": tol, "binary": info}
    return SvmModel(classes, xs[used], coefs[:, used], bias, float(gamma), float(C), mean, std, meta)
