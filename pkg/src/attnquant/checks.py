"""Self-contained oracle suite behind the ``check`` CLI subcommand.

Each check pits a fast code path against an independent brute-force
recomputation on randomly drawn small instances and reports the worst
observed discrepancy. All randomness is seeded, so a run is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flops import FlopCounter
from .linalg import kron, vec
from .model import generate_synthetic
from .objectives import ProjectionKind, context_for, loss
from .oracle import (
    exact_error,
    joint_qk_cost_demo,
    kron_exact_query_loss,
    taylor_error,
    upper_bound_check,
)
from .quantizer import fit_step_size, optq_quantize, rtn_quantize
from .stats import accumulate_stats

__all__ = ["CheckResult", "run_all_checks"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _rel_gap(a: float, b: float) -> float:
    denom = max(abs(a), abs(b), 1e-300)
    return abs(a - b) / denom


def _check_value_exactness(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(10):
        d = int(rng.integers(4, 13))
        d_h = int(rng.integers(2, 5))
        length = int(rng.integers(2, 9))
        head, seqs = generate_synthetic(seed * 100 + trial, d, d_h, length, int(rng.integers(1, 9)))
        stats = accumulate_stats(head, seqs)
        ctx = context_for(ProjectionKind.VALUE, stats)
        delta = rng.standard_normal((d_h, d)) * 0.1
        worst = max(worst, _rel_gap(loss(ctx, delta), exact_error(head, seqs, ProjectionKind.VALUE, delta)))
    return CheckResult(
        "value trace loss == exact attention error",
        worst <= 1e-9,
        f"worst relative gap {worst:.2e} (tolerance 1e-9)",
    )


def _check_kron_identities(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for _ in range(25):
        d, d_h = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        r = rng.standard_normal((d, d))
        mx = r @ r.T
        r = rng.standard_normal((d_h, d_h))
        mk = r @ r.T
        dw = rng.standard_normal((d_h, d))
        quad = float(vec(dw) @ kron(mx, mk) @ vec(dw))
        trace_form = float(np.trace(mk @ dw @ mx @ dw.T))
        worst = max(worst, _rel_gap(quad, trace_form))
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        c = rng.standard_normal((5, 2))
        lhs = vec(a @ b @ c)
        rhs = kron(c.T, a) @ vec(b)
        worst = max(worst, float(np.abs(lhs - rhs).max() / max(1e-300, np.abs(lhs).max())))
    return CheckResult(
        "Kronecker quadratic-form and vec identities",
        worst <= 1e-12,
        f"worst relative gap {worst:.2e} (tolerance 1e-12)",
    )


def _check_single_sequence_factorization(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for trial in range(10):
        head, seqs = generate_synthetic(seed * 31 + trial, 8, 3, 6, 1)
        stats = accumulate_stats(head, seqs)
        ctx = context_for(ProjectionKind.QUERY, stats)
        delta = rng.standard_normal((3, 8)) * 0.1
        worst = max(
            worst,
            _rel_gap(loss(ctx, delta), kron_exact_query_loss(head, seqs, delta)),
        )
    return CheckResult(
        "single-sequence query factorization is exact",
        worst <= 1e-9,
        f"worst relative gap {worst:.2e} (tolerance 1e-9)",
    )


def _check_taylor_convergence(seed: int) -> CheckResult:
    head, seqs = generate_synthetic(seed + 3, 10, 4, 6, 4)
    rng = np.random.default_rng(seed + 4)
    base = rng.standard_normal((4, 10)) * (1.0 / math.sqrt(10))
    gaps = []
    for eps in (0.1, 0.05, 0.025):
        exact = exact_error(head, seqs, ProjectionKind.QUERY, eps * base)
        approx = taylor_error(head, seqs, ProjectionKind.QUERY, eps * base)
        gaps.append(abs(exact - approx) / max(exact, 1e-300))
    monotone = gaps[0] >= gaps[1] >= gaps[2]
    return CheckResult(
        "first-order attention error converges as the perturbation shrinks",
        monotone and gaps[-1] <= 0.5,
        f"relative gaps at eps 0.1/0.05/0.025: {gaps[0]:.3f}/{gaps[1]:.3f}/{gaps[2]:.3f}",
    )


def _check_upper_bound(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 5)
    worst = 0.0
    for trial in range(50):
        head, seqs = generate_synthetic(seed * 53 + trial, 8, 3, 5, 1)
        delta = rng.standard_normal((3, 8)) * float(rng.uniform(0.01, 1.0))
        report = upper_bound_check(head, seqs[0], delta)
        worst = max(worst, report.relative_gap)
    return CheckResult(
        "factored surrogate upper-bounds the Jacobian-path error",
        worst <= 1.0 + 1e-9,
        f"largest lhs/rhs ratio {worst:.6f} over 50 instances",
    )


def _check_joint_cost_scaling(seed: int) -> CheckResult:
    head, seqs = generate_synthetic(seed + 6, 8, 3, 5, 8)
    rng = np.random.default_rng(seed + 7)
    dwq = rng.standard_normal((3, 8)) * 0.1
    dwk = rng.standard_normal((3, 8)) * 0.1
    _, ops8 = joint_qk_cost_demo(head, seqs, dwq, dwk)
    _, ops16 = joint_qk_cost_demo(head, seqs + seqs, dwq, dwk)
    stats = accumulate_stats(head, seqs)
    ctx = context_for(ProjectionKind.QUERY, stats)
    c1, c2 = FlopCounter(), FlopCounter()
    loss(ctx, dwq, c1)
    loss(context_for(ProjectionKind.QUERY, accumulate_stats(head, seqs + seqs)), dwq, c2)
    return CheckResult(
        "joint query+key recompute cost scales with data, trace loss does not",
        ops16 == 2 * ops8 and c1.count == c2.count,
        f"joint ops {ops8} -> {ops16}; trace-loss ops {c1.count} -> {c2.count}",
    )


def _check_optq_identity(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 8)
    ok = True
    for _ in range(10):
        w = rng.standard_normal((4, 6))
        spec = fit_step_size(w, np.eye(6), 4)
        same = np.array_equal(
            optq_quantize(w, np.eye(6), spec).w_int, rtn_quantize(w, spec).w_int
        )
        ok = ok and same
    return CheckResult(
        "identity-curvature column compensation equals nearest rounding",
        ok,
        "bit-identical integer assignments" if ok else "assignments diverged",
    )


def run_all_checks(seed: int = 0) -> list[CheckResult]:
    return [
        _check_value_exactness(seed),
        _check_kron_identities(seed),
        _check_single_sequence_factorization(seed),
        _check_taylor_convergence(seed),
        _check_upper_bound(seed),
        _check_joint_cost_scaling(seed),
        _check_optq_identity(seed),
    ]
