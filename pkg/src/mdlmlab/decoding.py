"""The generation loop: selection policies, block partitioning, traces.

A denoiser is anything callable as ``denoiser(state) -> DenoiserOutput``
with a ``vocab`` attribute; the exact backend additionally exposes
``dependency_scores(state)`` for the oracle_dep scorer. One forward call is
made per step and both the scores and the committed predictions come from
that same call, so the trace's NFE equals the number of forward evaluations
exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import LINEAR, DenoiserOutput, SequenceState, make_masked_state, reverse_unmask_prob
from . import scoring

SELECTORS = ("topk", "threshold", "klass", "eb")


@dataclass(frozen=True)
class PolicyConfig:
    """One decoding policy: how to rank masked positions and which to commit.

    ``steps`` is the top-k budget T (0 means one token per step). The
    threshold, klass, and eb parameters default to the standard settings
    (eps=0.95, n=2, gamma=0.01).
    """

    scorer: str = "confidence"
    selector: str = "topk"
    steps: int = 0
    block_size: int = 0  # 0 = single block
    temperature: str = "greedy"  # greedy | sample
    layer: int = 0
    eps: float = 0.95
    tau: float = 0.9
    eps_kl: float = 0.01
    n_history: int = 2
    gamma: float = 0.01
    stochastic_remask: bool = False
    dep_eb_prefilter: float | None = None

    def __post_init__(self) -> None:
        if self.scorer not in scoring.SCORERS:
            raise ValueError(f"unknown scorer {self.scorer!r}")
        if self.selector not in SELECTORS:
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.temperature not in ("greedy", "sample"):
            raise ValueError(f"unknown temperature mode {self.temperature!r}")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.eps_kl <= 0.0:
            raise ValueError("eps_kl must be > 0")
        if self.n_history < 1:
            raise ValueError("n_history must be >= 1")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")
        if self.steps < 0 or self.block_size < 0 or self.layer < 0:
            raise ValueError("steps, block_size, and layer must be >= 0")
        if self.stochastic_remask and self.selector != "topk":
            raise ValueError("stochastic_remask requires the step-scheduled topk selector")

    def policy_id(self) -> str:
        parts = [self.scorer, self.selector]
        if self.selector == "topk":
            parts.append(f"T{self.steps}" if self.steps else "T0")
        if self.block_size:
            parts.append(f"b{self.block_size}")
        if self.scorer == "dos":
            parts.append(f"l{self.layer}")
        parts.append(self.temperature)
        return "-".join(parts)


@dataclass
class TraceStep:
    step: int
    positions: list[int]
    tokens: list[int]
    scores: list[float]
    nfe: int

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "positions": self.positions,
            "tokens": self.tokens,
            "scores": self.scores,
            "nfe": self.nfe,
        }


@dataclass
class DecodeTrace:
    """Per-step record of committed positions plus cumulative forward count."""

    steps: list[TraceStep] = field(default_factory=list)

    @property
    def nfe(self) -> int:
        return self.steps[-1].nfe if self.steps else 0

    def committed_positions(self) -> list[int]:
        return [p for s in self.steps for p in s.positions]

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(s.to_record()) for s in self.steps) + "\n"

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


class History:
    """Rolling record of the last n+1 predictive distributions per position."""

    def __init__(self, n: int):
        self.n = n
        self._dists: dict[int, list[np.ndarray]] = {}

    def record(self, position: int, dist: np.ndarray) -> None:
        lst = self._dists.setdefault(position, [])
        lst.append(np.array(dist, dtype=float))
        if len(lst) > self.n + 1:
            del lst[0]

    def clear(self, position: int) -> None:
        self._dists.pop(position, None)

    def stable(self, position: int, eps_kl: float) -> bool:
        """True iff n+1 records exist and all n consecutive KLs are < eps_kl."""
        lst = self._dists.get(position, [])
        if len(lst) < self.n + 1:
            return False
        return all(
            scoring.kl_divergence(lst[k], lst[k + 1]) < eps_kl
            for k in range(self.n)
        )

    def copy(self) -> "History":
        h = History(self.n)
        h._dists = {k: [d.copy() for d in v] for k, v in self._dists.items()}
        return h


# ---------------------------------------------------------------------------
# selection primitives (all ties break toward the lowest position index)
# ---------------------------------------------------------------------------

def _ranked(scores: np.ndarray, candidates: Sequence[int]) -> list[int]:
    cand = sorted(candidates)
    return sorted(cand, key=lambda i: (-scores[i], i))


def select_topk(scores: np.ndarray, candidates: Sequence[int], k: int) -> tuple[int, ...]:
    """The min(k, #candidates) highest-scoring positions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not candidates:
        raise ValueError("no masked positions to select from")
    return tuple(sorted(_ranked(scores, candidates)[:k]))


def select_threshold(conf: np.ndarray, candidates: Sequence[int], eps: float) -> tuple[int, ...]:
    """Positions with confidence > eps; falls back to the single best one."""
    chosen = [i for i in sorted(candidates) if conf[i] > eps]
    if not chosen:
        chosen = _ranked(conf, candidates)[:1]
    return tuple(sorted(chosen))


def select_klass(
    history: History,
    conf: np.ndarray,
    candidates: Sequence[int],
    tau: float,
    eps_kl: float,
) -> tuple[int, ...]:
    """Stable positions: n consecutive KLs below eps_kl and confidence above tau.

    Positions with fewer than n+1 recorded distributions are ineligible; an
    empty result falls back to the argmax-confidence singleton.
    """
    chosen = [
        i
        for i in sorted(candidates)
        if conf[i] > tau and history.stable(i, eps_kl)
    ]
    if not chosen:
        chosen = _ranked(conf, candidates)[:1]
    return tuple(sorted(chosen))


def select_eb(
    ranking: np.ndarray,
    entropies: np.ndarray,
    candidates: Sequence[int],
    gamma: float,
) -> tuple[int, ...]:
    """Longest ranked prefix whose entropy sum minus prefix-max entropy is <= gamma.

    The constraint value never decreases as the prefix grows, so the scan
    stops at the first violation; a prefix of size 1 always qualifies.
    """
    order = _ranked(ranking, candidates)
    chosen: list[int] = []
    ent_sum = 0.0
    ent_max = 0.0
    for i in order:
        e = float(entropies[i])
        if chosen and (ent_sum + e) - max(ent_max, e) > gamma:
            break
        chosen.append(i)
        ent_sum += e
        ent_max = max(ent_max, e)
    return tuple(sorted(chosen))


def commit_token(p: np.ndarray, temperature: str, rng: np.random.Generator) -> int:
    """Greedy argmax (ties to the lowest token id) or an exact categorical draw."""
    p = np.asarray(p, dtype=float)
    if temperature == "greedy":
        return int(np.argmax(p)) + 1
    if temperature == "sample":
        return int(rng.choice(p.size, p=p / p.sum())) + 1
    raise ValueError(f"unknown temperature mode {temperature!r}")


# ---------------------------------------------------------------------------
# one planning step, shared by the sampler and the exact enumerator
# ---------------------------------------------------------------------------

def compute_ranking(
    policy: PolicyConfig,
    out: DenoiserOutput,
    state: SequenceState,
    denoiser,
) -> np.ndarray:
    """ScoreVector for the policy's scorer over the currently masked positions."""
    masked = state.masked_positions()
    L = len(state)
    if policy.scorer in scoring.UNCERTAINTY_SCORERS:
        return scoring.uncertainty_scores(policy.scorer, out.probs, masked, L)
    if policy.scorer == "dos":
        if out.attentions is None:
            raise ValueError("the dos scorer needs a denoiser that returns attentions")
        return scoring.dos_dependency(
            out.attentions, policy.layer, masked, state.unmasked_positions(), L
        )
    if policy.scorer == "oracle_dep":
        dep = getattr(denoiser, "dependency_scores", None)
        if dep is None:
            raise ValueError("the oracle_dep scorer needs an exact denoiser")
        return dep(state)
    raise ValueError(f"unknown scorer {policy.scorer!r}")


def plan_step(
    policy: PolicyConfig,
    out: DenoiserOutput,
    state: SequenceState,
    denoiser,
    candidates: Sequence[int],
    steps_left: int,
    history: History,
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Scores and the selected position subset for one step (no commitment)."""
    L = len(state)
    ranking = compute_ranking(policy, out, state, denoiser)
    if policy.selector == "topk":
        k = math.ceil(len(candidates) / max(1, steps_left))
        selected = select_topk(ranking, candidates, k)
    elif policy.selector == "threshold":
        conf = scoring.confidence_vector(out.probs, state.masked_positions(), L)
        selected = select_threshold(conf, candidates, policy.eps)
    elif policy.selector == "klass":
        conf = scoring.confidence_vector(out.probs, state.masked_positions(), L)
        selected = select_klass(history, conf, candidates, policy.tau, policy.eps_kl)
    elif policy.selector == "eb":
        ents = scoring.entropy_vector(out.probs, state.masked_positions(), L)
        pool = candidates
        if policy.dep_eb_prefilter is not None:
            kept = [i for i in candidates if ranking[i] > policy.dep_eb_prefilter]
            pool = kept or candidates
        selected = select_eb(ranking, ents, pool, policy.gamma)
    else:
        raise ValueError(f"unknown selector {policy.selector!r}")
    return ranking, selected


def _blocks(prompt_len: int, gen_len: int, block_size: int) -> list[list[int]]:
    positions = list(range(prompt_len, prompt_len + gen_len))
    if block_size <= 0 or block_size >= gen_len:
        return [positions]
    return [positions[i : i + block_size] for i in range(0, gen_len, block_size)]


def _block_step_budget(total_steps: int, block_len: int, gen_len: int) -> int:
    # Step budget splits across blocks proportionally to their length.
    return max(1, round(total_steps * block_len / gen_len))


def _run(
    denoiser,
    policy: PolicyConfig,
    prompt: Sequence[int],
    gen_len: int,
    rng: np.random.Generator,
    blocks: list[list[int]],
    unconditional: bool,
) -> tuple[SequenceState, DecodeTrace]:
    state = make_masked_state(denoiser.vocab, prompt, gen_len, unconditional)
    total_steps = policy.steps if policy.steps else gen_len
    history = History(policy.n_history)
    trace = DecodeTrace()
    nfe = 0
    step_no = 0
    for block in blocks:
        block_budget = _block_step_budget(total_steps, len(block), gen_len)
        steps_in_block = 0
        while any(state.is_masked(i) for i in block):
            out = denoiser(state)
            nfe += 1
            if policy.selector == "klass":
                for i in state.masked_positions():
                    history.record(i, out.probs[i])
            candidates = tuple(i for i in block if state.is_masked(i))
            steps_left = max(1, block_budget - steps_in_block)
            ranking, selected = plan_step(
                policy, out, state, denoiser, candidates, steps_left, history
            )
            committed = selected
            if policy.stochastic_remask:
                t = max(1.0 - steps_in_block / block_budget, 1.0 / block_budget)
                s = max(1.0 - (steps_in_block + 1) / block_budget, 0.0)
                p_reveal = reverse_unmask_prob(LINEAR, t, s) if s < t else 1.0
                committed = tuple(i for i in selected if rng.random() < p_reveal)
            updates = {
                i: commit_token(out.probs[i], policy.temperature, rng)
                for i in committed
            }
            if updates:
                state = state.with_tokens(updates)
                for i in committed:
                    history.clear(i)
            trace.steps.append(
                TraceStep(
                    step=step_no,
                    positions=list(committed),
                    tokens=[updates[i] for i in committed],
                    scores=[float(ranking[i]) for i in committed],
                    nfe=nfe,
                )
            )
            step_no += 1
            steps_in_block += 1
    return state, trace


def decode(
    denoiser,
    policy: PolicyConfig,
    prompt: Sequence[int],
    gen_len: int,
    rng: np.random.Generator,
    unconditional: bool = False,
) -> tuple[SequenceState, DecodeTrace]:
    """Single-block generation: forward, score, select, commit until done.

    Every selector commits at least one token per forward call (unless the
    optional stochastic remasking mode is on), so NFE <= gen_len and the
    loop always terminates.
    """
    blocks = _blocks(len(prompt), gen_len, 0)
    return _run(denoiser, policy, prompt, gen_len, rng, blocks, unconditional)


def decode_blockwise(
    denoiser,
    policy: PolicyConfig,
    prompt: Sequence[int],
    gen_len: int,
    rng: np.random.Generator,
    unconditional: bool = False,
) -> tuple[SequenceState, DecodeTrace]:
    """Semi-autoregressive generation over left-to-right blocks.

    Positions are partitioned into blocks of ``policy.block_size`` (the last
    may be short); the inner policy runs restricted to the active block until
    it is fully unmasked. Scoring sees the whole sequence; only selection is
    confined to the block. ``block_size >= gen_len`` reduces to ``decode``.
    """
    if policy.block_size < 0:
        raise ValueError("block_size must be >= 0")
    blocks = _blocks(len(prompt), gen_len, policy.block_size)
    return _run(denoiser, policy, prompt, gen_len, rng, blocks, unconditional)
