"""Chain-CRF baseline: Laplace-smoothed second-order transition tensor
combined with calibrated posteriors for the current year."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataFormatError

TENSOR_MAGIC = b"RCTT"


@dataclass
class TransitionTensor:
    """t[a, b, c] = P(label_i = c | label_{i-2} = a, label_{i-1} = b)."""

    t: np.ndarray  # (L, L, L)
    alpha: float
    triplet_count: int = 0

    @property
    def num_classes(self):
        return self.t.shape[0]


def estimate_transitions(triplets, num_classes, alpha=1.0) -> TransitionTensor:
    """Add-alpha estimate of the transition tensor from (a, b, c) label
    triplets; unseen (a, b) contexts fall back to the uniform prior."""
    if alpha <= 0:
        raise ContractError("Laplace constant alpha must be positive")
    L = num_classes
    counts = np.zeros((L, L, L), dtype=np.float64)
    n = 0
    for a, b, c in triplets:
        counts[a, b, c] += 1
        n += 1
    totals = counts.sum(axis=2, keepdims=True)
    t = (counts + alpha) / (totals + alpha * L)
    return TransitionTensor(t=t, alpha=float(alpha), triplet_count=n)


def crf_score(p, a, b, transitions: TransitionTensor):
    """Hadamard product of the calibrated posterior with the transition row
    for past labels (a, b); returns (raw scores, normalized posterior).

    Applies to years i > 2 only; the caller is responsible for restricting
    the evaluation accordingly."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] != transitions.num_classes:
        raise ContractError("posterior length must match the class count")
    if abs(p.sum() - 1.0) > 1e-4:
        raise ContractError("crf_score expects a calibrated posterior summing to 1")
    row = transitions.t[a, b, :]
    scores = p * row
    total = scores.sum()
    if total <= 0:
        raise ContractError("degenerate CRF score (all-zero product)")
    return scores, scores / total


def save_transitions(path, transitions: TransitionTensor):
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", transitions.num_classes))
        fh.write(np.ascontiguousarray(transitions.t, dtype="<f8").tobytes())
    meta = {
        "num_classes": transitions.num_classes,
        "alpha": transitions.alpha,
        "triplet_count": transitions.triplet_count,
    }
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_transitions(path):
    path = str(path)
    with open(path + ".json") as fh:
        meta = json.load(fh)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TENSOR_MAGIC:
            raise DataFormatError(
                f"bad transition-tensor magic {magic!r}; expected {TENSOR_MAGIC!r}"
            )
        (L,) = struct.unpack("<I", fh.read(4))
        buf = fh.read(8 * L * L * L)
        if len(buf) != 8 * L * L * L:
            raise DataFormatError("truncated transition tensor")
        t = np.frombuffer(buf, dtype="<f8").reshape(L, L, L)
    return TransitionTensor(
        t=t.copy(), alpha=meta["alpha"], triplet_count=meta["triplet_count"]
    )
