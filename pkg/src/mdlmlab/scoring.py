"""Per-position scores that rank masked tokens for decoding.

Every ranking follows one convention: higher means decode earlier, so the
entropy scorer negates the raw entropy at this boundary. Unmasked positions
carry NaN ("not scored"). Natural log throughout.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

NOT_SCORED = np.nan

UNCERTAINTY_SCORERS = ("confidence", "entropy", "margin")
SCORERS = UNCERTAINTY_SCORERS + ("dos", "oracle_dep")


def confidence(p: np.ndarray) -> float:
    """Largest probability in the distribution."""
    return float(np.max(p))


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def margin(p: np.ndarray) -> float:
    """Gap between the highest and second-highest probabilities."""
    p = np.asarray(p, dtype=float)
    if p.size < 2:
        raise ValueError("margin needs at least two outcomes")
    top2 = np.partition(p, -2)[-2:]
    return float(top2[1] - top2[0])


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with 0 log 0 = 0; q is floored at 1e-12 so the value is total."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions must share a support size")
    q = np.maximum(q, 1e-12)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / q[nz])).sum())


def dos_dependency(
    attentions: Sequence[np.ndarray],
    layer: int,
    masked: Sequence[int],
    unmasked: Sequence[int],
    n_positions: int,
) -> np.ndarray:
    """Attention mass each masked position places on the unmasked context.

    The chosen layer's heads are averaged arithmetically into one L x L
    matrix; the score of a masked position is its row-sum over the unmasked
    columns (no renormalization). Unmasked positions stay unscored.
    """
    if not 0 <= layer < len(attentions):
        raise IndexError(f"layer {layer} out of range for {len(attentions)} layers")
    attn = np.asarray(attentions[layer], dtype=float).mean(axis=0)
    scores = np.full(n_positions, NOT_SCORED)
    cols = list(unmasked)
    for m in masked:
        scores[m] = float(attn[m, cols].sum()) if cols else 0.0
    return scores


def uncertainty_scores(
    kind: str, probs: np.ndarray, masked: Sequence[int], n_positions: int
) -> np.ndarray:
    """Ranking vector for one of the uncertainty scorers (higher = earlier)."""
    scores = np.full(n_positions, NOT_SCORED)
    for m in masked:
        if kind == "confidence":
            scores[m] = confidence(probs[m])
        elif kind == "entropy":
            scores[m] = -entropy(probs[m])
        elif kind == "margin":
            scores[m] = margin(probs[m])
        else:
            raise ValueError(f"unknown uncertainty scorer {kind!r}")
    return scores


def confidence_vector(
    probs: np.ndarray, masked: Sequence[int], n_positions: int
) -> np.ndarray:
    return uncertainty_scores("confidence", probs, masked, n_positions)


def entropy_vector(
    probs: np.ndarray, masked: Sequence[int], n_positions: int
) -> np.ndarray:
    """Raw (unnegated) entropies, used as the budget in entropy-bounded selection."""
    scores = np.full(n_positions, NOT_SCORED)
    for m in masked:
        scores[m] = entropy(probs[m])
    return scores
