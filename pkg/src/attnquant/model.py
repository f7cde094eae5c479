"""Desk-scale single-head attention model: forward pass, synthetic data,
checkpoint and calibration-file I/O.

Weight convention: each projection W is d_h x d and maps a token column
x (length d) to a head vector W @ x (length d_h). Token matrices Q, K, V
are L x d_h with one token per row, so Q^T = W_Q @ X for X holding one
token per column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .jsonio import atomic_write_json, load_json, require_field
from .linalg import as_matrix, softmax_rows

__all__ = [
    "AttentionHead",
    "CalibSequence",
    "AttentionTrace",
    "attention_forward",
    "generate_synthetic",
    "save_checkpoint",
    "load_checkpoint",
    "save_calibration",
    "load_calibration",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass
class AttentionHead:
    """One attention head's full-precision projections."""

    d: int
    d_h: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        if self.d_h > self.d:
            raise DataError(f"head dimension d_h={self.d_h} exceeds hidden size d={self.d}")
        for name in ("w_q", "w_k", "w_v"):
            m = as_matrix(getattr(self, name), name)
            if m.shape != (self.d_h, self.d):
                raise DataError(
                    f"{name}: expected shape {self.d_h}x{self.d}, got {m.shape[0]}x{m.shape[1]}"
                )
            setattr(self, name, _frozen(m))

    def projection(self, name: str) -> np.ndarray:
        try:
            return {"W_Q": self.w_q, "W_K": self.w_k, "W_V": self.w_v}[name]
        except KeyError:
            raise DataError(f"unknown projection '{name}'") from None

    def replace(self, name: str, w: np.ndarray) -> "AttentionHead":
        parts = {"W_Q": self.w_q, "W_K": self.w_k, "W_V": self.w_v}
        if name not in parts:
            raise DataError(f"unknown projection '{name}'")
        parts[name] = w
        return AttentionHead(self.d, self.d_h, parts["W_Q"], parts["W_K"], parts["W_V"])


@dataclass
class CalibSequence:
    """One calibration sequence, stored as X with one token per column (d x L)."""

    x: np.ndarray

    def __post_init__(self):
        self.x = _frozen(as_matrix(self.x, "calibration sequence"))
        if self.length < 1:
            raise DataError("calibration sequence must contain at least one token")

    @property
    def d(self) -> int:
        return self.x.shape[0]

    @property
    def length(self) -> int:
        return self.x.shape[1]


@dataclass
class AttentionTrace:
    """Intermediate products of one forward pass (token-row convention)."""

    q: np.ndarray  # L x d_h
    k: np.ndarray  # L x d_h
    v: np.ndarray  # L x d_h
    a: np.ndarray  # L x L, row-stochastic
    sa: np.ndarray  # L x d_h


def attention_forward(head: AttentionHead, seq: CalibSequence) -> AttentionTrace:
    """Full-precision forward pass producing Q, K, V, the attention map A
    and the head output SA = A @ V.

    Logits are scaled by 1/sqrt(d_h), the per-head key dimension.
    """
    if seq.d != head.d:
        raise DataError(
            f"sequence has {seq.d} feature rows but head expects d={head.d}"
        )
    q = (head.w_q @ seq.x).T
    k = (head.w_k @ seq.x).T
    v = (head.w_v @ seq.x).T
    a = softmax_rows(q @ k.T / math.sqrt(head.d_h))
    return AttentionTrace(q=q, k=k, v=v, a=a, sa=a @ v)


def generate_synthetic(
    seed: int, d: int, d_h: int, length: int, n_sequences: int
) -> tuple[AttentionHead, list[CalibSequence]]:
    """Deterministic synthetic head and calibration set.

    Weights are i.i.d. Gaussian scaled by 1/sqrt(d) so projected tokens are
    O(1); sequences are i.i.d. standard Gaussian. The same seed always
    produces bit-identical output.
    """
    if min(d, d_h, length, n_sequences) < 1:
        raise DataError("all synthetic dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(d)
    head = AttentionHead(
        d=d,
        d_h=d_h,
        w_q=rng.standard_normal((d_h, d)) * scale,
        w_k=rng.standard_normal((d_h, d)) * scale,
        w_v=rng.standard_normal((d_h, d)) * scale,
    )
    seqs = [CalibSequence(rng.standard_normal((d, length))) for _ in range(n_sequences)]
    return head, seqs


def _matrix_field(obj: dict, key: str, rows: int, cols: int, what: str) -> np.ndarray:
    raw = require_field(obj, key, what)
    try:
        m = as_matrix(raw, f"{what}: field '{key}'")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{what}: field '{key}' is not a numeric matrix: {exc}") from exc
    if m.shape != (rows, cols):
        raise DataError(
            f"{what}: field '{key}' has shape {m.shape[0]}x{m.shape[1]}, "
            f"expected {rows}x{cols}"
        )
    return m


def save_checkpoint(head: AttentionHead, path: str | Path) -> None:
    atomic_write_json(
        {
            "d": head.d,
            "d_h": head.d_h,
            "W_Q": head.w_q.tolist(),
            "W_K": head.w_k.tolist(),
            "W_V": head.w_v.tolist(),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> AttentionHead:
    what = "checkpoint"
    obj = load_json(path, what)
    d = int(require_field(obj, "d", what))
    d_h = int(require_field(obj, "d_h", what))
    return AttentionHead(
        d=d,
        d_h=d_h,
        w_q=_matrix_field(obj, "W_Q", d_h, d, what),
        w_k=_matrix_field(obj, "W_K", d_h, d, what),
        w_v=_matrix_field(obj, "W_V", d_h, d, what),
    )


def save_calibration(seqs: list[CalibSequence], path: str | Path) -> None:
    if not seqs:
        raise DataError("refusing to write an empty calibration file")
    d, length = seqs[0].d, seqs[0].length
    atomic_write_json(
        {"d": d, "L": length, "sequences": [s.x.tolist() for s in seqs]},
        path,
    )


def load_calibration(path: str | Path) -> list[CalibSequence]:
    what = "calibration file"
    obj = load_json(path, what)
    d = int(require_field(obj, "d", what))
    length = int(require_field(obj, "L", what))
    raw = require_field(obj, "sequences", what)
    if not isinstance(raw, list) or not raw:
        raise DataError(f"{what}: field 'sequences' must be a non-empty list")
    seqs = []
    for i, entry in enumerate(raw):
        m = as_matrix(entry, f"{what}: sequences[{i}]")
        if m.shape != (d, length):
            raise DataError(
                f"{what}: sequences[{i}] has shape {m.shape[0]}x{m.shape[1]}, "
                f"expected {d}x{length}"
            )
        seqs.append(CalibSequence(m))
    return seqs
