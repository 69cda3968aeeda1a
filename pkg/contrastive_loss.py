"""
Weighted uni-directional InfoNCE over embedding batches.

For query i with positive t_i, in-batch targets t_j and weighted hard
negatives n_ik (weights w_k, K_i of them):

    L_i = -log( phi(q_i, t_i) / (sum_k (w_k / K_i) phi(q_i, n_ik) + sum_j phi(q_i, t_j)) )
    phi(a, b) = exp(cos(a, b) / tau)

and L is the mean over queries. Every sum of phi runs in log space.
"""

from typing import List, Optional, Sequence, Tuple
from dataclasses import dataclass, replace

import numpy as np

from core_model import InputFormatError, PreconditionError


def _as_rows(values, name: str, dim: Optional[int] = None) -> np.ndarray:
    rows = np.array(values, dtype=np.float64)
    if rows.ndim == 1 and rows.size == 0:
        rows = rows.reshape(0, dim or 0)
    if rows.ndim != 2:
        raise InputFormatError(f"{name} must be a 2-D array, got shape {rows.shape}")
    if dim is not None and rows.shape[1] != dim:
        raise InputFormatError(f"{name} has dimension {rows.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(rows)):
        raise InputFormatError(f"{name} holds non-finite values")
    if rows.size and np.any(np.linalg.norm(rows, axis=1) == 0):
        raise InputFormatError(f"{name} holds a zero vector")
    return rows


@dataclass(frozen=True, eq=False)
class LossBatch:
    """
    One training batch.

    ``hard_negatives[i]`` is a (K_i x d vectors, K_i weights) pair for query i;
    K_i may be zero. Vectors need not be unit length: the loss uses the true
    cosine, which is the dot product on unit inputs.
    """
    query_vecs: np.ndarray
    positive_vecs: np.ndarray
    hard_negatives: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    tau: float
    exclude_diagonal: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise InputFormatError(f"tau must be > 0, got {self.tau}")
        queries = _as_rows(self.query_vecs, "query_vecs")
        n, d = queries.shape
        positives = _as_rows(self.positive_vecs, "positive_vecs", d)
        if positives.shape[0] != n:
            raise InputFormatError(f"{n} queries but {positives.shape[0]} positives")
        if len(self.hard_negatives) != n:
            raise InputFormatError(f"{n} queries but {len(self.hard_negatives)} hard-negative groups")
        groups = []
        for i, (vecs, weights) in enumerate(self.hard_negatives):
            vecs = _as_rows(vecs, f"hard negatives of query {i}", d)
            weights = np.array(weights, dtype=np.float64).reshape(-1)
            if weights.shape[0] != vecs.shape[0]:
                raise InputFormatError(f"Query {i}: {vecs.shape[0]} negatives but {weights.shape[0]} weights")
            if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
                raise InputFormatError(f"Query {i}: hard-negative weights must be finite and > 0")
            groups.append((vecs, weights))
        object.__setattr__(self, "query_vecs", queries)
        object.__setattr__(self, "positive_vecs", positives)
        object.__setattr__(self, "hard_negatives", tuple(groups))

    @property
    def size(self) -> int:
        return self.query_vecs.shape[0]

    @classmethod
    def from_pairs(cls, query_vecs, positive_vecs, negatives: Sequence[Sequence[Tuple[np.ndarray, float]]],
                   tau: float, exclude_diagonal: bool = False) -> "LossBatch":
        """Build a batch from per-query lists of (vector, weight) pairs."""
        d = np.asarray(query_vecs).shape[-1]
        groups = []
        for group in negatives:
            vecs = np.array([v for v, _ in group], dtype=np.float64).reshape(len(group), d)
            weights = np.array([w for _, w in group], dtype=np.float64)
            groups.append((vecs, weights))
        return cls(query_vecs, positive_vecs, tuple(groups), tau, exclude_diagonal)


@dataclass(frozen=True, eq=False)
class LossGradients:
    queries: np.ndarray
    positives: np.ndarray
    negatives: Tuple[np.ndarray, ...]

    def flat(self) -> np.ndarray:
        parts = [self.queries.ravel(), self.positives.ravel()] + [g.ravel() for g in self.negatives]
        return np.concatenate(parts)


def _unit(rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return rows / norms, norms


def _logsumexp(values: np.ndarray) -> float:
    top = np.max(values)
    return float(top + np.log(np.sum(np.exp(values - top))))


def log_phi(h_q: np.ndarray, h_t: np.ndarray, tau: float) -> float:
    """cos(h_q, h_t) / tau."""
    if not tau > 0:
        raise PreconditionError(f"tau must be > 0, got {tau}")
    h_q = np.asarray(h_q, dtype=np.float64)
    h_t = np.asarray(h_t, dtype=np.float64)
    if h_q.shape != h_t.shape:
        raise InputFormatError(f"Dimension mismatch: {h_q.shape} vs {h_t.shape}")
    cos = float(np.dot(h_q, h_t) / (np.linalg.norm(h_q) * np.linalg.norm(h_t)))
    return cos / tau


def phi(h_q: np.ndarray, h_t: np.ndarray, tau: float) -> float:
    """exp(cos / tau). Overflows to inf for tiny tau; the loss itself never forms it."""
    with np.errstate(over="ignore"):
        return float(np.exp(log_phi(h_q, h_t, tau)))


def _forward(batch: LossBatch):
    """Per-query logits and the cosines they came from."""
    q_hat, _ = _unit(batch.query_vecs)
    t_hat, _ = _unit(batch.positive_vecs)
    cos_batch = q_hat @ t_hat.T
    cos_negs = []
    for i, (vecs, _) in enumerate(batch.hard_negatives):
        if len(vecs):
            n_hat, _ = _unit(vecs)
            cos_negs.append(n_hat @ q_hat[i])
        else:
            cos_negs.append(np.zeros(0))
    return cos_batch, cos_negs


def _query_terms(batch: LossBatch, i: int, cos_batch: np.ndarray, cos_neg: np.ndarray):
    """Denominator logits of query i: hard negatives first, then in-batch targets."""
    tau = batch.tau
    _, weights = batch.hard_negatives[i]
    neg_logits = np.log(weights / len(weights)) + cos_neg / tau if len(weights) else np.zeros(0)
    in_batch = cos_batch[i] / tau
    if batch.exclude_diagonal:
        in_batch = np.delete(in_batch, i)
    logits = np.concatenate([neg_logits, in_batch])
    if logits.size == 0:
        raise InputFormatError(f"Query {i} has an empty denominator")
    return logits


def info_nce_loss(batch: LossBatch) -> float:
    cos_batch, cos_negs = _forward(batch)
    total = 0.0
    for i in range(batch.size):
        logits = _query_terms(batch, i, cos_batch, cos_negs[i])
        total += _logsumexp(logits) - cos_batch[i, i] / batch.tau
    return total / batch.size


def info_nce_gradient(batch: LossBatch, through_normalization: bool = True) -> LossGradients:
    """
    Analytic gradient of ``info_nce_loss``.

    With ``through_normalization`` the chain runs through the cosine of the
    stored vectors, d cos(x, y) / dx = (y_hat - cos * x_hat) / |x|. Without it
    the inputs are treated as free unit vectors and d(x . y) / dx = y.
    """
    n = batch.size
    tau = batch.tau
    cos_batch, cos_negs = _forward(batch)
    # dL/dcos for every in-batch pair and every hard negative
    coeff = np.zeros_like(cos_batch)
    coeff_negs: List[np.ndarray] = []
    for i in range(n):
        logits = _query_terms(batch, i, cos_batch, cos_negs[i])
        probs = np.exp(logits - _logsumexp(logits))
        k_i = len(cos_negs[i])
        coeff_negs.append(probs[:k_i] / (tau * n))
        in_batch = probs[k_i:] / (tau * n)
        if batch.exclude_diagonal:
            in_batch = np.insert(in_batch, i, 0.0)
        coeff[i] = in_batch
        coeff[i, i] -= 1.0 / (tau * n)

    queries, positives = batch.query_vecs, batch.positive_vecs
    if through_normalization:
        q_hat, q_norm = _unit(queries)
        t_hat, t_norm = _unit(positives)
        weighted = coeff * cos_batch
        grad_q = (coeff @ t_hat - weighted.sum(axis=1, keepdims=True) * q_hat) / q_norm
        grad_t = (coeff.T @ q_hat - weighted.sum(axis=0)[:, None] * t_hat) / t_norm
        grad_negs = []
        for i, (vecs, _) in enumerate(batch.hard_negatives):
            if not len(vecs):
                grad_negs.append(np.zeros_like(vecs))
                continue
            n_hat, n_norm = _unit(vecs)
            g = coeff_negs[i]
            c = cos_negs[i]
            grad_q[i] += (g @ n_hat - np.dot(g, c) * q_hat[i]) / q_norm[i]
            grad_negs.append((g[:, None] * (q_hat[i][None, :] - c[:, None] * n_hat)) / n_norm)
    else:
        grad_q = coeff @ positives
        grad_t = coeff.T @ queries
        grad_negs = []
        for i, (vecs, _) in enumerate(batch.hard_negatives):
            g = coeff_negs[i]
            if len(vecs):
                grad_q[i] += g @ vecs
            grad_negs.append(g[:, None] * queries[i][None, :] if len(vecs) else np.zeros_like(vecs))
    return LossGradients(queries=grad_q, positives=grad_t, negatives=tuple(grad_negs))


def finite_diff_gradient(batch: LossBatch, step: float = 1e-5) -> LossGradients:
    """Central-difference estimate of the loss gradient, one coordinate at a time."""
    if not step > 0:
        raise PreconditionError(f"step must be > 0, got {step}")

    def central(rebuild, base: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            grad[idx] = (info_nce_loss(rebuild(plus)) - info_nce_loss(rebuild(minus))) / (2 * step)
        return grad

    grad_q = central(lambda v: replace(batch, query_vecs=v), batch.query_vecs)
    grad_t = central(lambda v: replace(batch, positive_vecs=v), batch.positive_vecs)
    grad_negs = []
    for i, (vecs, weights) in enumerate(batch.hard_negatives):
        def rebuild(v, i=i, weights=weights):
            groups = list(batch.hard_negatives)
            groups[i] = (v, weights)
            return replace(batch, hard_negatives=tuple(groups))
        grad_negs.append(central(rebuild, vecs))
    return LossGradients(queries=grad_q, positives=grad_t, negatives=tuple(grad_negs))

