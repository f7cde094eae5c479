"""Brute-force ground truths for every algebraic step of the pipeline.

Everything here recomputes attention outputs, per-row softmax Jacobians or
explicit Kronecker products from scratch, so these functions are slow and
memory-hungry by design; they exist to certify the fast trace-form losses
on small instances, never to run inside the optimization loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .flops import matmul_flops
from .linalg import DEFAULT_KRON_BUDGET, kron, softmax_jacobian_row, vec
from .model import AttentionHead, CalibSequence, attention_forward
from .objectives import ProjectionKind

__all__ = [
    "OracleReport",
    "exact_error",
    "taylor_error",
    "kron_exact_query_loss",
    "upper_bound_check",
    "joint_qk_cost_demo",
]

_KIND_TO_PROJECTION = {
    ProjectionKind.VALUE: "W_V",
    ProjectionKind.OTHER: "W_V",
    ProjectionKind.QUERY: "W_Q",
    ProjectionKind.KEY: "W_K",
}


@dataclass
class OracleReport:
    """Numbers produced by one oracle evaluation; unused fields are zero.

    exact_error: mean squared attention-output deviation from full recompute.
    taylor_error: the Jacobian-linearized deviation (1/d_h logit scaling).
    surrogate_loss: the weighted-Frobenius surrogate ||K dW X||_F^2.
    bound_factor: sum over rows of ||V^T J(a_row)||_F^2.
    relative_gap: context-dependent ratio, see each producer.
    """

    exact_error: float = 0.0
    taylor_error: float = 0.0
    surrogate_loss: float = 0.0
    bound_factor: float = 0.0
    relative_gap: float = 0.0

    def __post_init__(self):
        for name in ("exact_error", "taylor_error", "surrogate_loss", "bound_factor", "relative_gap"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise DataError(f"OracleReport.{name} must be finite and >= 0, got {val!r}")


def _check_delta(head: AttentionHead, delta_w: np.ndarray) -> np.ndarray:
    delta_w = np.asarray(delta_w, dtype=np.float64)
    if delta_w.shape != (head.d_h, head.d):
        raise DataError(
            f"delta_w has shape {delta_w.shape}, expected {head.d_h}x{head.d}"
        )
    return delta_w


def exact_error(
    head: AttentionHead,
    sequences: list[CalibSequence],
    kind: ProjectionKind,
    delta_w: np.ndarray,
) -> float:
    """Mean over sequences of ||SA(perturbed) - SA(full precision)||_F^2,
    recomputing the softmax forward pass with the perturbed projection."""
    if not sequences:
        raise DataError("exact_error needs at least one sequence")
    delta_w = _check_delta(head, delta_w)
    name = _KIND_TO_PROJECTION[kind]
    perturbed = head.replace(name, head.projection(name) + delta_w)
    total = 0.0
    for seq in sequences:
        sa_ref = attention_forward(head, seq).sa
        sa_pert = attention_forward(perturbed, seq).sa
        total += float(np.sum((sa_pert - sa_ref) ** 2))
    return total / len(sequences)


def _taylor_delta_a(
    trace, delta_logits: np.ndarray
) -> np.ndarray:
    """First-order attention-map change, assembled row by row through the
    per-row softmax Jacobian."""
    rows = []
    for ell in range(trace.a.shape[0]):
        jac = softmax_jacobian_row(trace.a[ell])
        rows.append(delta_logits[ell] @ jac.T)
    return np.vstack(rows)


def taylor_error(
    head: AttentionHead,
    sequences: list[CalibSequence],
    kind: ProjectionKind,
    delta_w: np.ndarray,
) -> float:
    """First-order Taylor estimate of the attention error for query or key
    perturbations: mean of ||dA V||_F^2 with dA linearized row-wise from the
    logit change (which carries the 1/sqrt(d_h) scaling)."""
    if kind not in (ProjectionKind.QUERY, ProjectionKind.KEY):
        raise DataError("taylor_error is defined for query/key perturbations only")
    if not sequences:
        raise DataError("taylor_error needs at least one sequence")
    delta_w = _check_delta(head, delta_w)
    scale = 1.0 / math.sqrt(head.d_h)
    total = 0.0
    for seq in sequences:
        trace = attention_forward(head, seq)
        if kind is ProjectionKind.QUERY:
            delta_logits = (delta_w @ seq.x).T @ trace.k.T * scale
        else:
            delta_logits = trace.q @ (delta_w @ seq.x) * scale
        delta_a = _taylor_delta_a(trace, delta_logits)
        total += float(np.sum((delta_a @ trace.v) ** 2))
    return total / len(sequences)


def kron_exact_query_loss(
    head: AttentionHead,
    sequences: list[CalibSequence],
    delta_w: np.ndarray,
    max_elements: int = DEFAULT_KRON_BUDGET,
) -> float:
    """The query surrogate via the explicit (d*d_h)^2 Kronecker form:
    vec(dW)^T . mean(X X^T kron K^T K) . vec(dW), column-major vec.

    Exact for any number of sequences (no mean-field factorization); the
    element budget keeps this on oracle-scale problems.
    """
    if not sequences:
        raise DataError("kron_exact_query_loss needs at least one sequence")
    delta_w = _check_delta(head, delta_w)
    acc = None
    for seq in sequences:
        trace = attention_forward(head, seq)
        term = kron(seq.x @ seq.x.T, trace.k.T @ trace.k, max_elements=max_elements)
        acc = term if acc is None else acc + term
    acc /= len(sequences)
    w_flat = vec(delta_w)
    return float(w_flat @ acc @ w_flat)


def upper_bound_check(
    head: AttentionHead, sequence: CalibSequence, delta_w: np.ndarray
) -> OracleReport:
    """Verify, on one sequence, that the Jacobian-path error is bounded by
    the factored surrogate:

        sum_l ||V^T J(a_l) m_l||^2  <=  (sum_l ||V^T J(a_l)||_F^2) ||M||_F^2

    with M = K dW X (column m_l per token). Raises if the inequality fails
    beyond a 1e-9 relative slack; the report carries both sides.
    """
    delta_w = _check_delta(head, delta_w)
    trace = attention_forward(head, sequence)
    m = trace.k @ delta_w @ sequence.x
    lhs = 0.0
    factor = 0.0
    for ell in range(trace.a.shape[0]):
        vj = trace.v.T @ softmax_jacobian_row(trace.a[ell])
        lhs += float(np.sum((vj @ m[:, ell]) ** 2))
        factor += float(np.sum(vj**2))
    surrogate = float(np.sum(m**2))
    rhs = factor * surrogate
    if lhs > rhs * (1.0 + 1e-9):
        raise NumericalError(
            f"upper bound violated: {lhs!r} > {rhs!r} (this should be impossible)"
        )
    return OracleReport(
        exact_error=exact_error(head, [sequence], ProjectionKind.QUERY, delta_w),
        taylor_error=lhs / head.d_h,
        surrogate_loss=surrogate,
        bound_factor=factor,
        relative_gap=0.0 if rhs == 0 else lhs / rhs,
    )


def joint_qk_cost_demo(
    head: AttentionHead,
    sequences: list[CalibSequence],
    delta_wq: np.ndarray,
    delta_wk: np.ndarray,
) -> tuple[float, int]:
    """Evaluate the joint query+key pre-softmax error

        mean ||dQ K^T + Q dK^T + dQ dK^T||_F^2

    by explicit per-sequence recomputation, returning (error, flop count).
    The count grows linearly with the number of sequences, in contrast with
    the trace-form losses whose cost is constant; quantifying that gap is
    this function's whole purpose.
    """
    if not sequences:
        raise DataError("joint_qk_cost_demo needs at least one sequence")
    delta_wq = _check_delta(head, delta_wq)
    delta_wk = _check_delta(head, delta_wk)
    d, d_h = head.d, head.d_h
    total = 0.0
    ops = 0
    for seq in sequences:
        trace = attention_forward(head, seq)
        length = seq.length
        dq = (delta_wq @ seq.x).T
        dk_t = delta_wk @ seq.x
        joint = dq @ trace.k.T + trace.q @ dk_t + dq @ dk_t
        total += float(np.sum(joint**2))
        ops += 2 * matmul_flops(d_h, d, length)  # dQ and dK^T forward maps
        ops += 3 * matmul_flops(length, d_h, length)  # the three L x L products
        ops += 2 * length**2  # summing the three terms
        ops += 2 * length**2 - 1  # squared Frobenius norm
    return total / len(sequences), ops
