"""Exact small joint models and brute-force analysis of unmasking schedules.

Everything here is enumeration-based on purpose: the joints are small enough
to tabulate, so conditionals, schedule-induced distributions, and dependency
scores are computed exactly rather than approximated. The dense table is
built once per model and cached.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DenoiserOutput, SequenceState, Vocabulary

DEFAULT_ENUM_LIMIT = 10**6


class ZeroSupportError(ValueError):
    """The conditioning event has probability zero."""


class EnumerationLimitError(RuntimeError):
    """The joint state space exceeds the configured enumeration limit."""


def _check_enum_limit(V: int, L: int, limit: int) -> None:
    if V**L > limit:
        raise EnumerationLimitError(
            f"joint space {V}^{L} exceeds enumeration limit {limit}"
        )


@dataclass
class TabularJoint:
    """Full probability table; ``table[v1-1, ..., vL-1]`` = p(v1, ..., vL)."""

    vocab: Vocabulary
    table: np.ndarray
    _cached_table: np.ndarray | None = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        self.table = np.asarray(self.table, dtype=float)
        if self.table.ndim < 1 or any(s != self.vocab.size for s in self.table.shape):
            raise ValueError("table needs one axis of size V per position")
        if np.any(self.table < 0) or abs(float(self.table.sum()) - 1.0) > 1e-12:
            raise ValueError("table entries must be >= 0 and sum to 1 within 1e-12")

    @property
    def L(self) -> int:
        return self.table.ndim


@dataclass
class FactorizedDAG:
    """Bayesian-network joint: a parent tuple and a CPT per node.

    ``cpts[i]`` has shape (V,) * len(parents[i]) + (V,); leading axes follow
    the listed parent order, the last axis is node i's own value. The parent
    relation must be acyclic and every CPT row must sum to 1.
    """

    vocab: Vocabulary
    parents: tuple[tuple[int, ...], ...]
    cpts: tuple[np.ndarray, ...]
    _cached_table: np.ndarray | None = field(
        default=None, init=False, repr=False, compare=False
    )
    _topo: tuple[int, ...] | None = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        V, L = self.vocab.size, len(self.parents)
        if len(self.cpts) != L:
            raise ValueError("need one CPT per node")
        self.parents = tuple(tuple(int(p) for p in ps) for ps in self.parents)
        cpts = []
        for i, (ps, cpt) in enumerate(zip(self.parents, self.cpts)):
            if any(not 0 <= p < L or p == i for p in ps):
                raise ValueError(f"node {i} has an invalid parent list {ps}")
            cpt = np.asarray(cpt, dtype=float)
            want = (V,) * len(ps) + (V,)
            if cpt.shape != want:
                raise ValueError(f"node {i} CPT shape {cpt.shape} != {want}")
            rows = cpt.reshape(-1, V)
            if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-12):
                raise ValueError(f"node {i} CPT rows must sum to 1 within 1e-12")
            cpts.append(cpt)
        self.cpts = tuple(cpts)
        self._topo = _topological_order(self.parents)

    @property
    def L(self) -> int:
        return len(self.parents)

    def topo_order(self) -> tuple[int, ...]:
        assert self._topo is not None
        return self._topo


JointModel = TabularJoint | FactorizedDAG


def _topological_order(parents: Sequence[Sequence[int]]) -> tuple[int, ...]:
    L = len(parents)
    children: list[list[int]] = [[] for _ in range(L)]
    indeg = [0] * L
    for i, ps in enumerate(parents):
        indeg[i] = len(ps)
        for p in ps:
            children[p].append(i)
    ready = sorted(i for i in range(L) if indeg[i] == 0)
    order: list[int] = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for c in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort()
    if len(order) != L:
        raise ValueError("parent relation contains a cycle")
    return tuple(order)


def joint_table(model: JointModel, enum_limit: int = DEFAULT_ENUM_LIMIT) -> np.ndarray:
    """Dense (V,)*L table of the joint, cached on the model."""
    if model._cached_table is not None:
        return model._cached_table
    if isinstance(model, TabularJoint):
        table = model.table
    else:
        V, L = model.vocab.size, model.L
        _check_enum_limit(V, L, enum_limit)
        table = np.ones((V,) * L)
        for i, (ps, cpt) in enumerate(zip(model.parents, model.cpts)):
            axes = list(ps) + [i]
            b = cpt.reshape(cpt.shape + (1,) * (L - cpt.ndim))
            b = np.moveaxis(b, range(cpt.ndim), axes)
            table = table * b
    model._cached_table = table
    return table


def _check_assignment(model: JointModel, assignment: Sequence[int]) -> tuple[int, ...]:
    a = tuple(int(v) for v in assignment)
    if len(a) != model.L:
        raise ValueError(f"assignment length {len(a)} != L={model.L}")
    if any(not model.vocab.is_content(v) for v in a):
        raise ValueError("assignment must be fully unmasked content tokens")
    return a


def joint_prob(model: JointModel, assignment: Sequence[int]) -> float:
    """Probability of a fully unmasked assignment (token ids 1..V)."""
    a = _check_assignment(model, assignment)
    if isinstance(model, TabularJoint):
        return float(model.table[tuple(v - 1 for v in a)])
    p = 1.0
    for i, (ps, cpt) in enumerate(zip(model.parents, model.cpts)):
        idx = tuple(a[q] - 1 for q in ps) + (a[i] - 1,)
        p *= float(cpt[idx])
    return p


def all_assignments(model: JointModel):
    """Iterate every full assignment as a token tuple."""
    return itertools.product(range(1, model.vocab.size + 1), repeat=model.L)


def model_distribution(model: JointModel) -> dict[tuple[int, ...], float]:
    """The target joint as a sequence -> probability map (zero entries kept out)."""
    table = joint_table(model)
    out: dict[tuple[int, ...], float] = {}
    for idx, p in np.ndenumerate(table):
        if p > 0:
            out[tuple(v + 1 for v in idx)] = float(p)
    return out


def _conditionals_given(
    table: np.ndarray,
    L: int,
    fixed: dict[int, int],
    positions: Sequence[int],
) -> dict[int, np.ndarray]:
    """Exact per-position conditionals given fixed token values.

    All unfixed positions other than the target are marginalized out.
    """
    idx = tuple(
        fixed[i] - 1 if i in fixed else slice(None) for i in range(L)
    )
    sub = table[idx]
    free = [i for i in range(L) if i not in fixed]
    total = float(sub.sum())
    if total <= 0.0:
        raise ZeroSupportError(f"conditioning event {fixed} has probability zero")
    out: dict[int, np.ndarray] = {}
    for pos in positions:
        axis = free.index(pos)
        other = tuple(a for a in range(sub.ndim) if a != axis)
        out[pos] = sub.sum(axis=other) / total
    return out


def conditional_marginal(
    model: JointModel, state: SequenceState, enum_limit: int = DEFAULT_ENUM_LIMIT
) -> dict[int, np.ndarray]:
    """Exact p(x_i = v | unmasked tokens) for every masked position i.

    This is the distribution the masked-diffusion training loss converges
    to, computed by summing the joint over all completions of the other
    masked positions. Raises ZeroSupportError if the observed context has
    probability zero.
    """
    if state.vocab.size != model.vocab.size or len(state) != model.L:
        raise ValueError("state does not match the model's vocabulary or length")
    masked = state.masked_positions()
    if not masked:
        raise ValueError("state has no masked position")
    table = joint_table(model, enum_limit)
    fixed = {i: state.tokens[i] for i in state.unmasked_positions()}
    return _conditionals_given(table, model.L, fixed, masked)


def sample_joint(model: JointModel, rng: np.random.Generator) -> tuple[int, ...]:
    """Draw one full sequence: table sampling or ancestral sampling."""
    if isinstance(model, TabularJoint):
        cum = getattr(model, "_flat_cumsum", None)
        if cum is None:
            cum = np.cumsum(model.table.ravel())
            model._flat_cumsum = cum
        k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        k = min(k, cum.size - 1)
        return tuple(int(v) + 1 for v in np.unravel_index(k, model.table.shape))
    cums = getattr(model, "_cpt_cumsum", None)
    if cums is None:
        cums = tuple(np.cumsum(c, axis=-1) for c in model.cpts)
        model._cpt_cumsum = cums
    toks = [0] * model.L
    for i in model.topo_order():
        row = cums[i][tuple(toks[q] - 1 for q in model.parents[i])]
        v = int(np.searchsorted(row, rng.random() * row[-1], side="right"))
        toks[i] = min(v, row.size - 1) + 1
    return tuple(toks)


@dataclass(frozen=True)
class GroupSchedule:
    """Ordered partition of the generated positions into parallel groups."""

    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        norm = tuple(tuple(sorted(int(p) for p in g)) for g in self.groups)
        object.__setattr__(self, "groups", norm)
        seen: set[int] = set()
        for g in norm:
            if not g:
                raise ValueError("schedule groups must be nonempty")
            if seen & set(g):
                raise ValueError("schedule groups must be disjoint")
            seen |= set(g)

    def positions(self) -> set[int]:
        return {p for g in self.groups for p in g}


def validate_schedule_cover(schedule: GroupSchedule, L: int, prompt_len: int) -> None:
    want = set(range(prompt_len, L))
    if schedule.positions() != want:
        raise ValueError(
            f"schedule covers {sorted(schedule.positions())}, "
            f"expected exactly the non-prompt positions {sorted(want)}"
        )


def exact_policy_distribution(
    model: JointModel,
    schedule: GroupSchedule,
    prompt_len: int = 0,
    enum_limit: int = DEFAULT_ENUM_LIMIT,
) -> dict[tuple[int, ...], float]:
    """Distribution over full sequences induced by a fixed group schedule.

    Each group is unmasked in one parallel step: every position in the group
    draws independently from its exact conditional given everything revealed
    so far, and later groups condition on the realized tokens. Prompt
    positions are drawn from their joint marginal first, so the result is a
    distribution over the whole sequence space (it matches the target joint
    exactly iff the schedule respects the dependency structure).
    """
    V, L = model.vocab.size, model.L
    _check_enum_limit(V, L, enum_limit)
    validate_schedule_cover(schedule, L, prompt_len)
    table = joint_table(model, enum_limit)

    out: dict[tuple[int, ...], float] = {}

    def walk(fixed: dict[int, int], gi: int, mass: float) -> None:
        if gi == len(schedule.groups):
            seq = tuple(fixed[i] for i in range(L))
            out[seq] = out.get(seq, 0.0) + mass
            return
        group = schedule.groups[gi]
        conds = _conditionals_given(table, L, fixed, group)
        supports = [
            [(v + 1, float(p)) for v, p in enumerate(conds[pos]) if p > 0]
            for pos in group
        ]
        for combo in itertools.product(*supports):
            p = mass
            for _, pv in combo:
                p *= pv
            nxt = dict(fixed)
            for pos, (tok, _) in zip(group, combo):
                nxt[pos] = tok
            walk(nxt, gi + 1, p)

    if prompt_len:
        pm = table.sum(axis=tuple(range(prompt_len, L)))
        for idx, p in np.ndenumerate(pm):
            if p > 0:
                fixed = {i: v + 1 for i, v in enumerate(idx)}
                walk(fixed, 0, float(p))
    else:
        walk({}, 0, 1.0)
    return out


def oracle_dependency(
    model: JointModel,
    state: SequenceState,
    position: int,
    enum_limit: int = DEFAULT_ENUM_LIMIT,
) -> float:
    """Mutual information between a masked position and the unmasked set.

    The other masked positions are marginalized out; only the mask pattern
    matters, not the observed values. Serves as the attention-free stand-in
    for dependency scoring when decoding against the exact denoiser: a high
    score means the position is strongly pinned down by the visible context.
    """
    if not state.is_masked(position):
        raise ValueError(f"position {position} is not masked")
    unmasked = state.unmasked_positions()
    if not unmasked:
        return 0.0
    table = joint_table(model, enum_limit)
    L, V = model.L, model.vocab.size
    keep = set(unmasked) | {position}
    drop = tuple(i for i in range(L) if i not in keep)
    joint = table.sum(axis=drop) if drop else table
    kept_order = sorted(keep)
    joint = np.moveaxis(joint, kept_order.index(position), 0).reshape(V, -1)
    pm = joint.sum(axis=1)
    pu = joint.sum(axis=0)
    prod = np.outer(pm, pu)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / prod[nz])).sum())
    return max(mi, 0.0)


class OracleDenoiser:
    """Exact denoiser backed by a joint model; no attentions are produced.

    Outputs are cached by token tuple and dependency scores by mask pattern,
    so repeated contexts during enumeration or sampling are cheap.
    """

    def __init__(self, model: JointModel, enum_limit: int = DEFAULT_ENUM_LIMIT):
        self.model = model
        self.vocab = model.vocab
        self.enum_limit = enum_limit
        self._out_cache: dict[tuple[int, ...], DenoiserOutput] = {}
        self._dep_cache: dict[tuple[bool, ...], np.ndarray] = {}

    def __call__(self, state: SequenceState) -> DenoiserOutput:
        key = state.tokens
        hit = self._out_cache.get(key)
        if hit is not None:
            return hit
        L, V = self.model.L, self.vocab.size
        probs = np.zeros((L, V))
        for i in state.unmasked_positions():
            probs[i, state.tokens[i] - 1] = 1.0
        if state.masked_positions():
            for i, p in conditional_marginal(self.model, state, self.enum_limit).items():
                probs[i] = p
        out = DenoiserOutput(probs=probs, attentions=None)
        self._out_cache[key] = out
        return out

    def dependency_scores(self, state: SequenceState) -> np.ndarray:
        pattern = tuple(state.is_masked(i) for i in range(len(state)))
        hit = self._dep_cache.get(pattern)
        if hit is not None:
            return hit
        scores = np.full(len(state), np.nan)
        for m in state.masked_positions():
            scores[m] = oracle_dependency(self.model, state, m, self.enum_limit)
        self._dep_cache[pattern] = scores
        return scores


# ---------------------------------------------------------------------------
# text file format: `joint <tabular|dag> V L` header, then one record per line
# ---------------------------------------------------------------------------

def save_joint_model(model: JointModel, path: str) -> None:
    V, L = model.vocab.size, model.L
    lines = []
    if isinstance(model, TabularJoint):
        lines.append(f"joint tabular {V} {L}")
        for idx, p in np.ndenumerate(model.table):
            toks = " ".join(str(v + 1) for v in idx)
            lines.append(f"{toks} {float(p)!r}")
    else:
        lines.append(f"joint dag {V} {L}")
        for i, (ps, cpt) in enumerate(zip(model.parents, model.cpts)):
            pstr = " ".join(str(p) for p in ps)
            cstr = " ".join(repr(float(x)) for x in cpt.ravel())
            lines.append(f"node {i} parents {pstr} cpt {cstr}".replace("  ", " "))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_joint_model(path: str) -> JointModel:
    """Load a joint model; probabilities are validated to 1e-9 then renormalized."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty joint model file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "joint" or head[1] not in ("tabular", "dag"):
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    variant, V, L = head[1], int(head[2]), int(head[3])
    vocab = Vocabulary(V)
    if variant == "tabular":
        table = np.zeros((V,) * L)
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != L + 1:
                raise ValueError(f"{path}: expected {L} tokens and a probability: {ln!r}")
            toks = tuple(int(x) for x in parts[:L])
            table[tuple(v - 1 for v in toks)] = float(parts[L])
        total = float(table.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"{path}: table sums to {total}, not 1 within 1e-9")
        return TabularJoint(vocab, table / total)
    parents: list[tuple[int, ...]] = [()] * L
    cpts: list[np.ndarray | None] = [None] * L
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] != "node" or "parents" not in parts or "cpt" not in parts:
            raise ValueError(f"{path}: bad node line {ln!r}")
        i = int(parts[1])
        pi, ci = parts.index("parents"), parts.index("cpt")
        ps = tuple(int(x) for x in parts[pi + 1 : ci])
        vals = np.array([float(x) for x in parts[ci + 1 :]])
        cpt = vals.reshape((V,) * len(ps) + (V,))
        rows = cpt.reshape(-1, V)
        if np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError(f"{path}: node {i} CPT rows do not sum to 1 within 1e-9")
        cpt = (rows / rows.sum(axis=1, keepdims=True)).reshape(cpt.shape)
        parents[i] = ps
        cpts[i] = cpt
    if any(c is None for c in cpts):
        raise ValueError(f"{path}: missing node lines (need {L})")
    return FactorizedDAG(vocab, tuple(parents), tuple(cpts))  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# random model generators used by tests and experiments
# ---------------------------------------------------------------------------

def random_tabular(rng: np.random.Generator, V: int, L: int) -> TabularJoint:
    """A random strictly positive full table (Dirichlet-style draw)."""
    raw = rng.gamma(1.0, 1.0, size=(V,) * L) + 0.05
    return TabularJoint(Vocabulary(V), raw / raw.sum())


def _random_cpt(rng: np.random.Generator, V: int, n_parents: int) -> np.ndarray:
    raw = rng.gamma(1.0, 1.0, size=(V,) * n_parents + (V,)) + 0.05
    return raw / raw.sum(axis=-1, keepdims=True)


def random_tree_dag(rng: np.random.Generator, V: int, L: int) -> FactorizedDAG:
    """A random tree-structured network: node 0 is the root, others pick one parent."""
    parents: list[tuple[int, ...]] = [()]
    for i in range(1, L):
        parents.append((int(rng.integers(0, i)),))
    cpts = tuple(_random_cpt(rng, V, len(ps)) for ps in parents)
    return FactorizedDAG(Vocabulary(V), tuple(parents), cpts)


def random_dag(
    rng: np.random.Generator, V: int, L: int, max_parents: int = 2
) -> FactorizedDAG:
    """A random DAG over positions 0..L-1 with edges pointing forward."""
    parents: list[tuple[int, ...]] = []
    for i in range(L):
        k = int(rng.integers(0, min(i, max_parents) + 1))
        ps = tuple(sorted(rng.choice(i, size=k, replace=False).tolist())) if k else ()
        parents.append(ps)
    cpts = tuple(_random_cpt(rng, V, len(ps)) for ps in parents)
    return FactorizedDAG(Vocabulary(V), tuple(parents), cpts)
