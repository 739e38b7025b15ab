"""The five self-supervised objectives, each with value and exact gradients.

Every loss takes the positive embeddings as an explicit argument, which is
the substitution point for bootstrapped pseudo-positives: callers may swap
any row of ``Zpos`` for a queue entry and gradients through swapped rows are
simply discarded by the trainer (queue entries are constants).

Gradient conventions: embeddings are raw (unnormalized); cosine terms
differentiate through the normalization, d cos(u,v)/du = (v_hat - cos * u_hat)/|u|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ZeroNormError, as_matrix, softmax_rows


def _unit_rows(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    arr = as_matrix(m)
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroNormError(f"{what} contains a zero row")
    return arr / norms, norms


def _check_tau(tau: float) -> None:
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _log_softmax_rows(s: np.ndarray) -> np.ndarray:
    shifted = s - s.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Contrastive losses
# ---------------------------------------------------------------------------

def _ntxent_one_way(Z, Zpos, tau):
    U, n_u = _unit_rows(Z, "anchors")
    V, n_v = _unit_rows(Zpos, "positives")
    if U.shape != V.shape:
        raise ValueError("anchor and positive batches must have equal shapes")
    b = U.shape[0]
    cos = U @ V.T
    s = cos / tau
    logp = _log_softmax_rows(s)
    value = -float(np.trace(logp)) / b
    p = np.exp(logp)
    g = (p - np.eye(b)) / b  # dL/ds
    grad_z = (g @ V - (g * cos).sum(axis=1, keepdims=True) * U) / (tau * n_u)
    grad_pos = (g.T @ U - (g * cos).sum(axis=0)[:, None] * V) / (tau * n_v)
    return value, grad_z, grad_pos


def simclr_loss(Z, Zpos, tau: float, symmetric: bool = True):
    """NT-Xent over anchor/positive pairs; denominator sums positives only.

    The symmetric form (the default, matching how the contrastive framework
    is trained) averages the loss with the two branches swapped.
    """
    _check_tau(tau)
    value, grad_z, grad_pos = _ntxent_one_way(Z, Zpos, tau)
    if not symmetric:
        return value, grad_z, grad_pos
    value2, grad_pos2, grad_z2 = _ntxent_one_way(Zpos, Z, tau)
    return (
        0.5 * (value + value2),
        0.5 * (grad_z + grad_z2),
        0.5 * (grad_pos + grad_pos2),
    )


def moco_loss(Z, Zpos, queue, tau: float):
    """Contrastive loss with queue negatives; queue rows get no gradient."""
    _check_tau(tau)
    U, n_u = _unit_rows(Z, "anchors")
    V, n_v = _unit_rows(Zpos, "positives")
    if U.shape != V.shape:
        raise ValueError("anchor and positive batches must have equal shapes")
    b = U.shape[0]
    queue = np.asarray(queue, dtype=np.float64).reshape(-1, U.shape[1]) if np.size(queue) else np.zeros((0, U.shape[1]))
    cos_pos = (U * V).sum(axis=1)
    if queue.shape[0]:
        Qn, _ = _unit_rows(queue, "queue")
        cos_neg = U @ Qn.T
        logits = np.concatenate([cos_pos[:, None], cos_neg], axis=1) / tau
    else:
        Qn = queue
        cos_neg = np.zeros((b, 0))
        logits = cos_pos[:, None] / tau
    logp = _log_softmax_rows(logits)
    value = -float(logp[:, 0].sum()) / b
    p = np.exp(logp)
    d_pos = (p[:, 0] - 1.0) / b
    d_neg = p[:, 1:] / b
    row_scale = d_pos * cos_pos + (d_neg * cos_neg).sum(axis=1)
    grad_z = (d_pos[:, None] * V + d_neg @ Qn - row_scale[:, None] * U) / (tau * n_u)
    grad_pos = d_pos[:, None] * (U - cos_pos[:, None] * V) / (tau * n_v)
    return value, grad_z, grad_pos


# ---------------------------------------------------------------------------
# Clustering loss (swapped prediction) and its balanced-assignment codes
# ---------------------------------------------------------------------------

SINKHORN_EPSILON = 0.05
SINKHORN_TOL = 1e-6
_SINKHORN_MAX_SWEEPS = 10_000


def _sinkhorn_attempt(scores: np.ndarray, n_iters: int) -> np.ndarray | None:
    b, p = scores.shape
    q = np.exp(scores / SINKHORN_EPSILON)
    total = q.sum()
    if not np.isfinite(total) or total == 0.0:
        return None
    q /= total
    sweeps = 0
    while True:
        col = q.sum(axis=0)
        if np.any(col == 0.0):
            return None
        q /= col * p
        row = q.sum(axis=1)
        if np.any(row == 0.0):
            return None
        q /= row[:, None] * b
        sweeps += 1
        col_err = float(np.abs(q.sum(axis=0) - 1.0 / p).max())
        if sweeps >= n_iters and col_err < SINKHORN_TOL:
            return q
        if sweeps >= _SINKHORN_MAX_SWEEPS:
            raise FloatingPointError("balanced assignment did not converge")


def sinkhorn_codes(scores, n_iters: int = 3) -> np.ndarray:
    """Balanced soft assignments from similarity scores.

    Returns a nonnegative matrix with uniform marginals: rows sum to
    1/B_eff, columns to 1/P, both within 1e-6. At least ``n_iters``
    alternating normalization sweeps run; sweeps continue past that until
    the tolerance holds, so the post-condition is met for hostile inputs
    too. An input whose exponentiation collapses entire rows or columns to
    zero is re-centered and rescaled into [-1, 1] once and retried.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    s = as_matrix(scores)
    q = _sinkhorn_attempt(s - s.max(), n_iters)
    if q is None:
        mid = 0.5 * (s.max() + s.min())
        half = max(0.5 * (s.max() - s.min()), 1.0)
        q = _sinkhorn_attempt((s - mid) / half, n_iters)
        if q is None:
            raise FloatingPointError("balanced assignment underflowed even after rescaling")
    return q


@dataclass
class Prototypes:
    """Learned cluster prototypes; rows kept unit-norm after each update."""

    vectors: np.ndarray
    frozen: bool = False

    @classmethod
    def init(cls, count: int, dim: int, rng: np.random.Generator) -> "Prototypes":
        vecs = rng.standard_normal((count, dim))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        return cls(vectors=vecs, frozen=True)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def renormalize(self) -> None:
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ZeroNormError("prototype collapsed to zero norm")
        self.vectors /= norms


def swav_loss(Zpos, codes, prototypes, tau: float):
    """Swapped prediction: codes (constants) supervise prototype softmaxes.

    Returns (value, grad wrt Zpos, grad wrt prototype vectors). The caller
    runs it once per branch direction and averages for the symmetric form.
    """
    _check_tau(tau)
    proto = prototypes.vectors if isinstance(prototypes, Prototypes) else prototypes
    U, n_u = _unit_rows(Zpos, "embeddings")
    Pm, n_p = _unit_rows(proto, "prototypes")
    A = as_matrix(codes)
    if A.shape[0] != U.shape[0]:
        raise ValueError("codes and embeddings disagree on batch size")
    if A.shape[1] != Pm.shape[0]:
        raise ValueError(
            f"codes are over {A.shape[1]} prototypes but {Pm.shape[0]} were given"
        )
    b, p = A.shape
    cos = U @ Pm.T
    s = cos / tau
    logp = _log_softmax_rows(s)
    value = -float((A * logp).sum()) / (b * p)
    pred = np.exp(logp)
    g = (A.sum(axis=1, keepdims=True) * pred - A) / (b * p)  # dL/ds
    grad_z = (g @ Pm - (g * cos).sum(axis=1, keepdims=True) * U) / (tau * n_u)
    grad_proto = (g.T @ U - (g * cos).sum(axis=0)[:, None] * Pm) / (tau * n_p)
    return value, grad_z, grad_proto


# ---------------------------------------------------------------------------
# Information-maximization loss
# ---------------------------------------------------------------------------

def _variance_term(Z: np.ndarray, eps: float):
    b, d = Z.shape
    centered = Z - Z.mean(axis=0)
    var = (centered**2).mean(axis=0)
    sd = np.sqrt(var + eps)
    hinge = np.maximum(0.0, 1.0 - sd)
    value = float(hinge.mean())
    # sd == 0 only at eps == 0 with a constant dimension; the sqrt kink has
    # no useful direction there, so that dimension contributes no gradient
    scale = np.where((hinge > 0.0) & (sd > 0.0), 1.0 / np.where(sd > 0.0, sd, 1.0), 0.0)
    grad = -(centered * scale) / (d * b)
    return value, grad


def _covariance_term(Z: np.ndarray):
    b, d = Z.shape
    centered = Z - Z.mean(axis=0)
    cov = centered.T @ centered / (b - 1)
    off = cov - np.diag(np.diag(cov))
    value = float((off**2).sum()) / d
    grad = 4.0 * centered @ off / (d * (b - 1))
    return value, grad


def vicreg_loss(Z, Zpos, lam: float, mu: float, nu: float, eps_v: float = 1e-4):
    """Invariance + variance + covariance regularization.

    Variance uses the population estimator with ``eps_v`` inside the square
    root; covariance normalizes by B - 1.
    """
    Za = as_matrix(Z)
    Zb = as_matrix(Zpos)
    if Za.shape != Zb.shape:
        raise ValueError("anchor and positive batches must have equal shapes")
    b = Za.shape[0]
    if b < 2:
        raise ValueError("variance and covariance terms need a batch of at least 2")

    diff = Za - Zb
    inv = float((diff**2).sum()) / b
    g_inv_a = 2.0 * diff / b
    g_inv_b = -g_inv_a

    v_a, g_va = _variance_term(Za, eps_v)
    v_b, g_vb = _variance_term(Zb, eps_v)
    c_a, g_ca = _covariance_term(Za)
    c_b, g_cb = _covariance_term(Zb)

    value = lam * inv + mu * (v_a + v_b) + nu * (c_a + c_b)
    grad_z = lam * g_inv_a + mu * g_va + nu * g_ca
    grad_pos = lam * g_inv_b + mu * g_vb + nu * g_cb
    return value, grad_z, grad_pos


# ---------------------------------------------------------------------------
# Self-distillation loss
# ---------------------------------------------------------------------------

@dataclass
class DinoCenter:
    """Running mean of teacher outputs, subtracted before sharpening."""

    c: np.ndarray
    decay: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("center decay must lie in [0, 1)")

    def update(self, teacher_logits: np.ndarray) -> None:
        flat = np.asarray(teacher_logits, dtype=np.float64).reshape(-1, self.c.shape[0])
        self.c = self.decay * self.c + (1.0 - self.decay) * flat.mean(axis=0)


def dino_loss(student_logits, teacher_logits, center, tau_s: float, tau_t: float):
    """Cross-entropy from sharpened, centered teacher views to student views.

    ``student_logits`` is (B, S, D), ``teacher_logits`` is (B, T, D); the
    first T student views are the same crops the teacher saw, so pairs with
    equal view index are skipped. Teacher inputs are constants: the returned
    gradient is with respect to the student logits only.
    """
    _check_tau(tau_s)
    _check_tau(tau_t)
    zs = np.asarray(student_logits, dtype=np.float64)
    zt = np.asarray(teacher_logits, dtype=np.float64)
    if zs.ndim != 3 or zt.ndim != 3:
        raise ValueError("view tensors must be (batch, views, dim)")
    if zs.shape[0] != zt.shape[0] or zs.shape[2] != zt.shape[2]:
        raise ValueError("student/teacher views disagree on batch size or head dim")
    b, n_student, dim = zs.shape
    n_teacher = zt.shape[1]
    if n_teacher < 1 or n_student < 1 or (n_teacher == 1 and n_student == 1):
        raise ValueError("need at least one teacher/student view pair")
    c = np.asarray(center, dtype=np.float64)
    if c.shape != (dim,):
        raise ValueError("center dim does not match head dim")

    p = softmax_rows((zt - c) / tau_t)  # (B, T, D)
    s_scaled = zs / tau_s
    shifted = s_scaled - s_scaled.max(axis=2, keepdims=True)
    log_q = shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True))
    q = np.exp(log_q)

    value = 0.0
    grad_student = np.zeros_like(zs)
    for t in range(n_teacher):
        for s_view in range(n_student):
            if s_view == t:
                continue
            value -= float((p[:, t, :] * log_q[:, s_view, :]).sum())
            grad_student[:, s_view, :] += (q[:, s_view, :] - p[:, t, :]) / tau_s
    return value / b, grad_student / b
