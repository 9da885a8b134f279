"""Greedy choice of which filters to keep, driven by Pearson correlation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidCount, TooFewSamples
from .spectral import ResponseMatrix

# relative tolerance under which two scores count as tied
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class SelectionResult:
    layer_id: str
    kept_indices: tuple[int, ...]
    removed_order: tuple[int, ...]


def abs_correlation(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """|Pearson r| between columns with a zero diagonal, plus a dead-column mask.

    Constant columns have no defined correlation; their entries are 0 and
    they are flagged in the mask.
    """
    a = np.asarray(data, dtype=np.float64)
    dead = np.ptp(a, axis=0) == 0
    centered = a - a.mean(axis=0)
    norms = np.sqrt(np.einsum("ij,ij->j", centered, centered))
    norms[dead] = 1.0
    z = centered / norms
    z[:, dead] = 0.0
    r = np.abs(np.clip(z.T @ z, -1.0, 1.0))
    r = (r + r.T) / 2
    np.fill_diagonal(r, 0.0)
    return r, dead


def _ties(scores: np.ndarray) -> np.ndarray:
    top = scores.max()
    if np.isinf(top):
        return np.flatnonzero(np.isinf(scores))
    return np.flatnonzero(scores >= top - TIE_RTOL * max(1.0, abs(top)))


def select_filters(responses: ResponseMatrix, kept_count: int) -> SelectionResult:
    """Remove the most correlated filters one at a time until ``kept_count`` remain.

    At each step the filter with the largest l1-norm of |r| against the other
    remaining filters is dropped; ties go to the largest single |r|, then to
    the lowest index. Constant (dead) filters are dropped first.
    """
    C = responses.channels
    if not (1 <= kept_count <= C):
        raise InvalidCount(f"{responses.layer_id}: kept_count {kept_count} outside [1, {C}]")
    if responses.samples < 2:
        raise TooFewSamples(f"{responses.layer_id}: need at least 2 samples")

    r, dead = abs_correlation(responses.data)
    active = list(range(C))
    removed = []
    for _ in range(C - kept_count):
        idx = np.array(active)
        sub = r[np.ix_(idx, idx)]
        norms = sub.sum(axis=1)
        norms[dead[idx]] = np.inf
        cand = _ties(norms)
        if cand.size > 1:
            peak = sub[cand].max(axis=1) if idx.size > 1 else np.zeros(cand.size)
            peak[dead[idx[cand]]] = np.inf
            cand = cand[_ties(peak)]
        pick = int(idx[cand.min()])
        removed.append(pick)
        active.remove(pick)
    return SelectionResult(responses.layer_id, tuple(active), tuple(removed))
