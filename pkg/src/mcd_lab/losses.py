"""Differentiable training objectives with closed-form gradients.

Every loss returns a :class:`LossResult` carrying the scalar value and a
dict of gradients with respect to the loss's *direct* inputs (similarity
or distance matrices, embeddings, logits, temperature).  Chaining those
gradients back into encoder parameters is the trainer's job.  No autodiff:
each gradient is derived by hand and verified against central finite
differences (see :mod:`mcd_lab.gradcheck`).

Teacher-side quantities are constants everywhere: gradients never flow
into teacher distance matrices or teacher similarity rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BatchTooSmallError,
    EmptyNegativesError,
    EmptyPositivesError,
    IndexOutOfRangeError,
    NotSquareError,
    ShapeMismatchError,
    TargetOutOfRangeError,
)
from .geometry import AUGMENTED_IMAGE, DistanceMatrix, EmbeddingBatch, SimilarityMatrix
from .rng import SplitMix64

TAU_MIN = 0.01
TAU_MAX = 100.0

# Temperatures of the KL-divergence distillation baseline.
KL_TEACHER_TEMP = 0.04
KL_STUDENT_TEMP = 0.1
KL_CENTER_MOMENTUM = 0.9


@dataclass
class LossResult:
    """Scalar loss plus gradients keyed by input name, same shape as the input."""

    value: float
    gradients: dict = field(default_factory=dict)


@dataclass
class Temperature:
    """Learnable softmax temperature, stored as log(tau) for positivity.

    After every optimizer step the trainer calls :meth:`project` to keep
    tau inside [TAU_MIN, TAU_MAX].
    """

    log_tau: float

    @classmethod
    def from_tau(cls, tau: float) -> "Temperature":
        return cls(math.log(tau))

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    def project(self) -> None:
        self.log_tau = min(max(self.log_tau, math.log(TAU_MIN)), math.log(TAU_MAX))


def _tau_value(tau) -> float:
    if isinstance(tau, Temperature):
        return tau.tau
    return float(tau)


def _matrix(x) -> np.ndarray:
    if isinstance(x, (SimilarityMatrix, DistanceMatrix)):
        return x.values
    return np.asarray(x, dtype=np.float64)


@dataclass
class PairIndexSets:
    """Positive and negative partner indices for every row of a unified batch.

    ``positives[i]`` contains i itself plus all rows of the same group;
    ``negatives[i]`` contains every row of a different group.
    """

    positives: list
    negatives: list
    validated: bool = False

    @classmethod
    def from_group_ids(cls, group_id) -> "PairIndexSets":
        group_id = np.asarray(group_id)
        n = group_id.shape[0]
        idx = np.arange(n)
        positives = [idx[group_id == group_id[i]] for i in range(n)]
        negatives = [idx[group_id != group_id[i]] for i in range(n)]
        # construction guarantees i in P_i, disjointness and index bounds
        return cls(positives, negatives, validated=True)

    def validate(self, count: int) -> None:
        if len(self.positives) != count or len(self.negatives) != count:
            raise ShapeMismatchError("need one positive and one negative set per row")
        if self.validated:
            return
        for i in range(count):
            p = np.asarray(self.positives[i])
            n = np.asarray(self.negatives[i])
            if i not in p:
                raise IndexOutOfRangeError(f"row {i} missing from its own positive set")
            if p.size and (p.min() < 0 or p.max() >= count):
                raise IndexOutOfRangeError(f"positive index out of range for row {i}")
            if n.size and (n.min() < 0 or n.max() >= count):
                raise IndexOutOfRangeError(f"negative index out of range for row {i}")
            if np.intersect1d(p, n).size:
                raise IndexOutOfRangeError(f"positive/negative overlap for row {i}")


# ---------------------------------------------------------------------------
# InfoNCE family
# ---------------------------------------------------------------------------

def info_nce(s, tau) -> LossResult:
    """Softmax contrastive loss over a square similarity matrix.

    value = -(1/N) sum_i log softmax_j(S_ij / tau)[i], i.e. the diagonal
    entry must win each row.  Gradients w.r.t. S and tau.
    """
    S = _matrix(s)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise NotSquareError(f"similarity matrix has shape {S.shape}")
    n = S.shape[0]
    t = _tau_value(tau)

    logits = S / t
    m = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - m)
    z = exp.sum(axis=1, keepdims=True)
    p = exp / z                                   # row softmax
    log_p_diag = logits.diagonal() - (m[:, 0] + np.log(z[:, 0]))
    value = -log_p_diag.mean()

    grad_s = (p - np.eye(n)) / (n * t)
    # d/dtau of -(1/N) sum_i [S_ii/t - lse_i]; lse' pulls in sum_j p_ij S_ij.
    grad_tau = float(np.sum(S.diagonal() - (p * S).sum(axis=1)) / (n * t * t))
    return LossResult(float(value), {"similarity": grad_s, "tau": grad_tau})


def clip_loss(s, tau) -> LossResult:
    """Symmetrized InfoNCE: average of the row-wise and column-wise losses."""
    S = _matrix(s)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise NotSquareError(f"similarity matrix has shape {S.shape}")
    a = info_nce(S, tau)
    b = info_nce(S.T, tau)
    value = 0.5 * (a.value + b.value)
    grad_s = 0.5 * (a.gradients["similarity"] + b.gradients["similarity"].T)
    grad_tau = 0.5 * (a.gradients["tau"] + b.gradients["tau"])
    return LossResult(value, {"similarity": grad_s, "tau": grad_tau})


def augmented_clip_loss(s_prime, tau) -> LossResult:
    """clip_loss applied to augmented-image vs text similarities.

    The caller is responsible for scaling the result by the schedule's
    augmented-view weight.
    """
    return clip_loss(s_prime, tau)


def mp_nce(batch: EmbeddingBatch, sets: PairIndexSets, tau, aug_weight: float = 1.0) -> LossResult:
    """Multi-positive contrastive loss over a unified embedding batch.

    For each row i and each positive p != i:

        -log[ w(i,p) / (w(i,p) + sum_{n in N_i} w(i,n)) ],   w = exp(sim/tau)

    averaged over positives, then over rows.  ``aug_weight`` scales every
    per-positive term whose anchor or positive is an augmented image;
    negatives inside denominators are not reweighted.

    Gradients w.r.t. all embeddings ("embeddings") and tau.
    """
    Z = batch.vectors
    n_rows, dim = Z.shape
    sets.validate(n_rows)
    t = _tau_value(tau)

    S = Z @ Z.T
    W = np.exp(S / t)

    value = 0.0
    grad_s = np.zeros_like(S)
    grad_tau = 0.0
    is_aug = batch.modality == AUGMENTED_IMAGE

    for i in range(n_rows):
        pos = np.asarray(sets.positives[i])
        pos = pos[pos != i]
        if pos.size == 0:
            raise EmptyPositivesError(f"row {i} has no positives besides itself")
        neg = np.asarray(sets.negatives[i])
        if neg.size == 0:
            raise EmptyNegativesError(f"row {i} has no negatives")

        a_i = W[i, neg].sum()
        w_ip = W[i, pos]
        denom = w_ip + a_i                        # one denominator per positive term
        terms = np.log(denom) - S[i, pos] / t

        weights = np.where(is_aug[i] | is_aug[pos], aug_weight, 1.0)
        coeff = weights / (n_rows * pos.size)
        value += float(coeff @ terms)

        grad_s[i, pos] += coeff * (w_ip / denom - 1.0) / t
        # each negative appears in every positive's denominator
        scale = float((coeff / denom).sum())
        grad_s[i, neg] += W[i, neg] * scale / t

        # d term / d tau = (1/t^2) [S_ip - (w_ip S_ip + sum_n w_in S_in) / denom]
        neg_dot = float(W[i, neg] @ S[i, neg])
        dtau = (S[i, pos] - (w_ip * S[i, pos] + neg_dot) / denom) / (t * t)
        grad_tau += float(coeff @ dtau)

    grad_z = grad_s @ Z + grad_s.T @ Z            # S_ab = z_a . z_b, both roles
    return LossResult(value, {"embeddings": grad_z, "tau": grad_tau})


# ---------------------------------------------------------------------------
# Log-ratio distillation family
# ---------------------------------------------------------------------------

def _check_same_shape(*mats):
    shapes = {m.shape for m in mats}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"distance matrices disagree: {sorted(shapes)}")


def _log_ratio_batch(num_s, den_s, num_t, den_t):
    """|log(num_s/den_s) - log(num_t/den_t)| per entry, plus d/dnum_s, d/dden_s."""
    v = (np.log(num_s) - np.log(den_s)) - (np.log(num_t) - np.log(den_t))
    sign = np.sign(v)
    return np.abs(v), sign / num_s, -sign / den_s


def log_ratio_term(d_student, d_teacher, idx) -> LossResult:
    """Single log-ratio penalty comparing pair (a, b) against pair (i, j).

    value = | log(Ds[a,b]/Ds[i,j]) - log(Dt[a,b]/Dt[i,j]) |

    The teacher ratio is a constant target: the gradient flows only into
    the two referenced student distances.
    """
    Ds = _matrix(d_student)
    Dt = _matrix(d_teacher)
    _check_same_shape(Ds, Dt)
    i, j, a, b = idx
    rows, cols = Ds.shape
    for r, c in ((i, j), (a, b)):
        if not (0 <= r < rows and 0 <= c < cols):
            raise IndexOutOfRangeError(f"pair ({r}, {c}) outside {Ds.shape}")

    val, dnum, dden = _log_ratio_batch(Ds[a, b], Ds[i, j], Dt[a, b], Dt[i, j])
    grad = np.zeros_like(Ds)
    grad[a, b] += dnum
    grad[i, j] += dden
    return LossResult(float(val), {"d_student": grad})


def distill_pos(d_s_orig, d_s_aug, d_t_orig, d_t_aug) -> LossResult:
    """Positive-pair misalignment: augmented-positive vs original-positive distance.

    Mean over i of the log-ratio term with numerator pair (i', i) and
    denominator pair (i, i).  Distance matrices are image-by-text.
    """
    Dso, Dsa, Dto, Dta = map(_matrix, (d_s_orig, d_s_aug, d_t_orig, d_t_aug))
    _check_same_shape(Dso, Dsa, Dto, Dta)
    n = Dso.shape[0]
    diag = np.arange(n)

    val, dnum, dden = _log_ratio_batch(Dsa[diag, diag], Dso[diag, diag],
                                       Dta[diag, diag], Dto[diag, diag])
    g_aug = np.zeros_like(Dsa)
    g_orig = np.zeros_like(Dso)
    g_aug[diag, diag] = dnum / n
    g_orig[diag, diag] = dden / n
    return LossResult(float(val.mean()), {"d_s_aug": g_aug, "d_s_orig": g_orig})


def _ordered_pairs(n: int, max_pairs, seed: int):
    """All ordered pairs (i, j), i != j; subsampled without replacement if capped."""
    total = n * (n - 1)
    if max_pairs is None or total <= max_pairs:
        ks = np.arange(total)
    else:
        ks = np.asarray(SplitMix64(seed).sample(total, max_pairs))
    i = ks // (n - 1)
    r = ks % (n - 1)
    j = np.where(r < i, r, r + 1)
    return i, j


def distill_neg(d_s_orig, d_s_aug, d_t_orig, d_t_aug,
                max_pairs=None, seed: int = 0) -> LossResult:
    """Negative-pair misalignment: augmented image j vs text i, against pair (i, i).

    Mean over ordered pairs i != j of the log-ratio term with numerator
    (j', i) and denominator (i, i).  ``max_pairs`` caps the expectation by
    seeded subsampling for large batches; by default it is exact.
    """
    Dso, Dsa, Dto, Dta = map(_matrix, (d_s_orig, d_s_aug, d_t_orig, d_t_aug))
    _check_same_shape(Dso, Dsa, Dto, Dta)
    n = Dso.shape[0]
    if n < 2:
        raise BatchTooSmallError("need at least 2 pairs for negative-pair terms")
    i, j = _ordered_pairs(n, max_pairs, seed)

    val, dnum, dden = _log_ratio_batch(Dsa[j, i], Dso[i, i], Dta[j, i], Dto[i, i])
    count = len(i)
    g_aug = np.zeros_like(Dsa)
    g_orig = np.zeros_like(Dso)
    np.add.at(g_aug, (j, i), dnum / count)
    np.add.at(g_orig, (i, i), dden / count)
    return LossResult(float(val.mean()), {"d_s_aug": g_aug, "d_s_orig": g_orig})


def distill_noisy(d_s_orig, d_t_orig, max_pairs=None, seed: int = 0) -> LossResult:
    """Noisy-pair misalignment: diagonal distance ratios within the original matrix.

    Mean over ordered pairs i != j of the log-ratio term with numerator
    (j, j) and denominator (i, i).
    """
    Dso, Dto = map(_matrix, (d_s_orig, d_t_orig))
    _check_same_shape(Dso, Dto)
    n = Dso.shape[0]
    if n < 2:
        raise BatchTooSmallError("need at least 2 pairs for noisy-pair terms")
    i, j = _ordered_pairs(n, max_pairs, seed)

    val, dnum, dden = _log_ratio_batch(Dso[j, j], Dso[i, i], Dto[j, j], Dto[i, i])
    count = len(i)
    g_orig = np.zeros_like(Dso)
    np.add.at(g_orig, (j, j), dnum / count)
    np.add.at(g_orig, (i, i), dden / count)
    return LossResult(float(val.mean()), {"d_s_orig": g_orig})


def distill_total(d_s_orig, d_s_aug, d_t_orig, d_t_aug,
                  max_pairs=None, seed: int = 0) -> LossResult:
    """Sum of the positive, negative and noisy log-ratio losses."""
    parts = [
        distill_pos(d_s_orig, d_s_aug, d_t_orig, d_t_aug),
        distill_neg(d_s_orig, d_s_aug, d_t_orig, d_t_aug, max_pairs=max_pairs, seed=seed),
        distill_noisy(d_s_orig, d_t_orig, max_pairs=max_pairs, seed=seed),
    ]
    value = sum(p.value for p in parts)
    grads: dict = {}
    for p in parts:
        for k, g in p.gradients.items():
            grads[k] = grads.get(k, 0.0) + g
    return LossResult(value, grads)


# ---------------------------------------------------------------------------
# MLM, KL baseline, composite
# ---------------------------------------------------------------------------

def mlm_loss(logits, targets) -> LossResult:
    """Mean cross-entropy over masked token positions.

    ``logits`` is (masked_count, vocab); an empty mask yields value 0 with
    zero gradients.  Gradient w.r.t. logits is softmax - one_hot, scaled
    by 1/masked_count.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeMismatchError("logits must be (masked_count, vocab)")
    k, vocab = logits.shape
    if targets.shape[0] != k:
        raise ShapeMismatchError("one target per masked position")
    if k == 0:
        return LossResult(0.0, {"logits": np.zeros_like(logits)})
    if targets.min() < 0 or targets.max() >= vocab:
        raise TargetOutOfRangeError(f"target outside [0, {vocab})")

    m = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - m)
    z = exp.sum(axis=1, keepdims=True)
    log_p = logits - m - np.log(z)
    value = -log_p[np.arange(k), targets].mean()

    grad = exp / z
    grad[np.arange(k), targets] -= 1.0
    return LossResult(float(value), {"logits": grad / k})


def kl_distill_baseline(s_student, s_teacher, center,
                        teacher_temp: float = KL_TEACHER_TEMP,
                        student_temp: float = KL_STUDENT_TEMP) -> LossResult:
    """Row-wise KL(teacher softmax || student softmax), the non-log-ratio baseline.

    Teacher rows are sharpened at temperature 0.04 after subtracting the
    running center; student rows use temperature 0.1.  The teacher side is
    constant; gradient only w.r.t. the student similarities.
    """
    Ss = _matrix(s_student)
    St = _matrix(s_teacher)
    if Ss.shape != St.shape:
        raise ShapeMismatchError(f"shapes {Ss.shape} vs {St.shape}")
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (Ss.shape[1],):
        raise ShapeMismatchError("center must have one entry per column")
    rows = Ss.shape[0]

    def _log_softmax(x):
        m = x.max(axis=1, keepdims=True)
        return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))

    log_p = _log_softmax((St - center[None, :]) / teacher_temp)
    log_q = _log_softmax(Ss / student_temp)
    p = np.exp(log_p)
    value = float((p * (log_p - log_q)).sum(axis=1).mean())

    grad = (np.exp(log_q) - p) / (student_temp * rows)
    return LossResult(value, {"s_student": grad})


def ema_center(center, s_teacher, momentum: float = KL_CENTER_MOMENTUM) -> np.ndarray:
    """EMA update of the KL baseline's centering vector from a teacher batch."""
    St = _matrix(s_teacher)
    return momentum * np.asarray(center, dtype=np.float64) + (1.0 - momentum) * St.mean(axis=0)


def mcd_total(lc: LossResult, ld: LossResult, lmlm: LossResult,
              alpha: float, beta: float) -> LossResult:
    """Composite objective: contrastive + alpha * distillation + beta * MLM.

    Gradients are combined linearly; a key appearing in several parts is
    summed with its coefficient.
    """
    value = lc.value + alpha * ld.value + beta * lmlm.value
    grads: dict = {}
    for coeff, part in ((1.0, lc), (alpha, ld), (beta, lmlm)):
        for k, g in part.gradients.items():
            scaled = coeff * g
            grads[k] = grads[k] + scaled if k in grads else scaled
    return LossResult(value, grads)
