"""Contrastive objectives over landmark embeddings.

Two losses share one softmax over all candidate scores: the basic
multi-positive objective, and the position-aware objective that weights each
positive by exp(-alpha * i), where i counts backward from the final sentence
of the relevant span (the boundary gets weight 1).

The position-aware loss has two modes.  In ``weighted_log`` (default) the
weight multiplies the log-probability, which is what actually shifts
gradients toward the boundary.  In ``literal`` the weight sits inside the
logarithm, where it only adds a parameter-independent constant to the loss;
it is kept for exact comparison, and its gradients equal the basic ones.

All arithmetic here is float64 with max-shifted log-sum-exp, regardless of
the embedding dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODES = ("weighted_log", "literal")


def positional_weight(i: int, alpha: float) -> float:
    """exp(-alpha * i): weight of the positive ``i`` places before the boundary."""
    if i < 0:
        raise ValueError(f"position offset must be nonnegative, got {i}")
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    return float(np.exp(-alpha * float(i)))


@dataclass(frozen=True)
class PositionalWeighting:
    alpha: float = 1.0
    mode: str = "weighted_log"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")

    def weights(self, num_positives: int) -> np.ndarray:
        """Weights ordered boundary-first: index i -> exp(-alpha * i)."""
        return np.exp(-self.alpha * np.arange(num_positives, dtype=np.float64))


@dataclass
class ContrastiveInstance:
    """One query against n candidates, of which a consecutive span is positive.

    ``positive_indices`` are candidate indices in span order; the last one is
    the span's final sentence (the boundary).
    """

    query_embedding: np.ndarray  # (d,)
    candidate_embeddings: np.ndarray  # (n, d)
    positive_indices: tuple[int, ...]
    temperature: float = 1.0

    def __post_init__(self):
        self.query_embedding = np.asarray(self.query_embedding)
        self.candidate_embeddings = np.asarray(self.candidate_embeddings)
        n = len(self.candidate_embeddings)
        if n < 2:
            raise ValueError("need at least 2 candidates")
        pos = tuple(int(i) for i in self.positive_indices)
        if not pos:
            raise ValueError("need at least one positive index")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError(f"positive indices must be strictly increasing: {pos}")
        if pos[0] < 0 or pos[-1] >= n:
            raise ValueError(f"positive index out of range 0..{n - 1}: {pos}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        self.positive_indices = pos

    @property
    def num_candidates(self) -> int:
        return len(self.candidate_embeddings)

    @property
    def boundary_index(self) -> int:
        return self.positive_indices[-1]


def _log_softmax(inst: ContrastiveInstance) -> tuple[np.ndarray, np.ndarray]:
    """Scores/temperature and their log-softmax, both float64."""
    q = inst.query_embedding.astype(np.float64)
    c = inst.candidate_embeddings.astype(np.float64)
    if not (np.isfinite(q).all() and np.isfinite(c).all()):
        raise ValueError("non-finite values in embeddings")
    z = (c @ q) / inst.temperature
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    return z, z - lse


def scores(inst: ContrastiveInstance) -> np.ndarray:
    """Raw inner products query . candidate (before temperature)."""
    return inst.candidate_embeddings.astype(np.float64) @ inst.query_embedding.astype(np.float64)


def basic_loss(inst: ContrastiveInstance) -> float:
    """Multi-positive cross entropy: -sum over positives of log softmax."""
    _, logp = _log_softmax(inst)
    return float(-sum(logp[p] for p in inst.positive_indices))


def position_aware_loss(inst: ContrastiveInstance, weighting: PositionalWeighting) -> float:
    """Boundary-emphasized loss; see module docstring for the two modes."""
    _, logp = _log_softmax(inst)
    pos = inst.positive_indices
    m = len(pos) - 1
    w = weighting.weights(m + 1)  # w[i] pairs with pos[m - i] (boundary first)
    if weighting.mode == "weighted_log":
        return float(-sum(w[i] * logp[pos[m - i]] for i in range(m + 1)))
    # literal: weight inside the log adds the constant -log w_i = alpha * i
    const = float(weighting.alpha * (m * (m + 1)) / 2.0)
    return basic_loss(inst) + const


def loss_gradients(
    inst: ContrastiveInstance, weighting: PositionalWeighting | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the selected loss w.r.t. query and candidates.

    Returns ``(d_query, d_candidates)`` in float64.  ``weighting=None``
    selects the basic loss; literal mode gradients equal the basic ones (the
    weight contributes only a constant there).
    """
    _, logp = _log_softmax(inst)
    softmax = np.exp(logp)
    n = inst.num_candidates
    pos = inst.positive_indices
    m = len(pos) - 1
    per_candidate_weight = np.zeros(n, dtype=np.float64)
    if weighting is None or weighting.mode == "literal":
        per_candidate_weight[list(pos)] = 1.0
    else:
        w = weighting.weights(m + 1)
        for i in range(m + 1):
            per_candidate_weight[pos[m - i]] = w[i]
    total_w = per_candidate_weight.sum()
    g = (total_w * softmax - per_candidate_weight) / inst.temperature  # dL/dz
    q = inst.query_embedding.astype(np.float64)
    c = inst.candidate_embeddings.astype(np.float64)
    d_query = g @ c
    d_candidates = np.outer(g, q)
    return d_query, d_candidates
