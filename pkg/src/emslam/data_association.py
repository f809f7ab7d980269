"""Soft data-association weights from detection-vs-landmark log-likelihoods.

The expectation step needs, for every detection k and landmark j, the
posterior probability that k was generated by j.  ``weights_exact`` sums over
the whole association space by brute force and exists as the reference;
``weights_factorized`` is the per-detection softmax that the exact sum reduces
to when detections are treated as independent, and is what the EM loop uses.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

# Shared floor for log-likelihood entries; anything at or below this level is
# treated as "effectively impossible" so normalization stays finite.
LOG_FLOOR = -700.0

# Combinatorial guard for the brute-force association sum.
MAX_EXACT_SIZE = 8

_ENUM_CHUNK = 200_000


@dataclass(frozen=True, eq=False)
class AssociationWeights:
    """Row-normalized detection-to-landmark probabilities.

    ``degenerate_rows`` lists detections whose every log-likelihood sat at the
    floor; those rows fall back to the uniform distribution.
    """

    w: np.ndarray
    degenerate_rows: tuple[int, ...] = ()

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 2:
            raise ValueError("weights must be a 2-D matrix")
        if w.size:
            if np.any(w < -1e-12) or np.any(w > 1.0 + 1e-12):
                raise ValueError("weights must lie in [0, 1]")
            if not np.allclose(w.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError("every weight row must sum to 1")
        w.flags.writeable = False
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "degenerate_rows", tuple(self.degenerate_rows))

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape


def _floored(log_likelihoods) -> np.ndarray:
    L = np.asarray(log_likelihoods, dtype=float)
    if L.ndim != 2:
        raise ValueError("log-likelihood matrix must be 2-D")
    if np.any(np.isnan(L)):
        raise ValueError("log-likelihood entries must not be NaN")
    return np.maximum(L, LOG_FLOOR)


def weights_factorized(log_likelihoods) -> AssociationWeights:
    """Per-detection softmax over landmarks.

    Equals the exact sum over the unconstrained association space, because the
    product over detections factorizes row by row.
    """
    L = _floored(log_likelihoods)
    K, M = L.shape
    if M == 0:
        raise ValueError("need at least one landmark column")
    w = np.empty_like(L)
    degenerate = []
    for k in range(K):
        row = L[k]
        if np.all(row <= LOG_FLOOR):
            w[k] = 1.0 / M
            degenerate.append(k)
        else:
            w[k] = np.exp(row - logsumexp(row))
    return AssociationWeights(w, tuple(degenerate))


def weights_exact(log_likelihoods, constraint: str = "unconstrained") -> AssociationWeights:
    """Brute-force posterior weights over an explicit association space.

    ``unconstrained`` enumerates every mapping of detections to landmarks
    (M^K of them); ``one-to-one`` enumerates injective mappings only and
    requires M >= K.  Sizes are guarded to K, M <= 8.
    """
    L = _floored(log_likelihoods)
    K, M = L.shape
    if K == 0 or M == 0:
        raise ValueError("exact enumeration needs K >= 1 and M >= 1")
    if K > MAX_EXACT_SIZE or M > MAX_EXACT_SIZE:
        raise ValueError(f"exact enumeration guarded to K, M <= {MAX_EXACT_SIZE}")
    if constraint not in ("unconstrained", "one-to-one"):
        raise ValueError(f"unknown constraint {constraint!r}")
    if constraint == "one-to-one":
        if M < K:
            raise ValueError("one-to-one association needs at least as many landmarks")
        mappings = itertools.permutations(range(M), K)
    else:
        mappings = itertools.product(range(M), repeat=K)

    total_parts: list[float] = []
    pair_parts: list[list[list[float]]] = [[[] for _ in range(M)] for _ in range(K)]
    rows = np.arange(K)
    while True:
        chunk = np.array(list(itertools.islice(mappings, _ENUM_CHUNK)), dtype=int)
        if chunk.size == 0:
            break
        scores = L[rows, chunk].sum(axis=1)
        total_parts.append(logsumexp(scores))
        for k in range(K):
            for j in range(M):
                mask = chunk[:, k] == j
                if np.any(mask):
                    pair_parts[k][j].append(logsumexp(scores[mask]))
    total = logsumexp(total_parts)
    w = np.zeros((K, M))
    for k in range(K):
        for j in range(M):
            if pair_parts[k][j]:
                w[k, j] = np.exp(logsumexp(pair_parts[k][j]) - total)
    return AssociationWeights(w)


def weights_with_null(log_likelihoods, new_landmark_log_likelihood: float) -> AssociationWeights:
    """Factorized weights with an appended new-landmark column.

    The last column holds the probability that a detection matches nothing in
    the map and should spawn a landmark instead.  Works for M = 0 (empty map),
    where every detection gets null weight 1.
    """
    L = np.asarray(log_likelihoods, dtype=float)
    if L.ndim != 2:
        raise ValueError("log-likelihood matrix must be 2-D")
    K = L.shape[0]
    null_col = np.full((K, 1), max(new_landmark_log_likelihood, LOG_FLOOR))
    return weights_factorized(np.hstack([L, null_col]))
