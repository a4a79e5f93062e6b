"""Experiment orchestration: induced distributions, metrics, sweeps, CSV.

The quality metric throughout is total variation distance between the
distribution a decoding policy induces over full sequences and the known
target joint. When the exact denoiser is configured and the space is
enumerable, the induced distribution is computed exactly by following every
outcome path of the decode loop; otherwise it is estimated by Monte Carlo.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import SequenceState, Vocabulary, forward_mask
from .decoding import (
    DecodeTrace,
    History,
    PolicyConfig,
    _block_step_budget,
    _blocks,
    decode_blockwise,
    plan_step,
    select_topk,
)
from .nn import TransformerDenoiser, load_checkpoint
from .oracle import (
    DEFAULT_ENUM_LIMIT,
    FactorizedDAG,
    GroupSchedule,
    JointModel,
    OracleDenoiser,
    conditional_marginal,
    exact_policy_distribution,
    joint_table,
    load_joint_model,
    model_distribution,
    oracle_dependency,
    sample_joint,
)
from . import scoring

Distribution = dict[tuple[int, ...], float]


# ---------------------------------------------------------------------------
# distributions and metrics
# ---------------------------------------------------------------------------

def empirical_distribution(samples: Sequence[tuple[int, ...]]) -> Distribution:
    """Normalized frequency table over observed sequences."""
    if not samples:
        raise ValueError("empirical_distribution needs at least one sample")
    counts: dict[tuple[int, ...], int] = {}
    for s in samples:
        key = tuple(int(v) for v in s)
        counts[key] = counts.get(key, 0) + 1
    n = len(samples)
    return {k: c / n for k, c in counts.items()}


def tv_distance(p: Distribution, q: Distribution) -> float:
    """(1/2) sum |p - q| over the union of supports."""
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def kl_target_induced(target: Distribution, induced: Distribution) -> float:
    """KL(target || induced) with the induced mass floored at 1e-12."""
    total = 0.0
    for k, pv in target.items():
        if pv > 0:
            total += pv * math.log(pv / max(induced.get(k, 0.0), 1e-12))
    return max(total, 0.0)


# ---------------------------------------------------------------------------
# exact induced distribution of a full decoding policy
# ---------------------------------------------------------------------------

def exact_induced_distribution(
    model: JointModel,
    policy: PolicyConfig,
    prompt_len: int,
    enum_limit: int = DEFAULT_ENUM_LIMIT,
) -> tuple[Distribution, float]:
    """Exact sequence distribution produced by a decoding policy.

    Replays the decode loop symbolically against the exact denoiser: each
    step's selection uses the same planning code as ``decode``, and instead
    of drawing the committed tokens, every value combination of the selected
    set is followed with its product probability (greedy temperature follows
    the single argmax branch). Prompt values are enumerated from their joint
    marginal. Returns the distribution and the probability-weighted mean
    number of forward calls.
    """
    if policy.scorer == "dos":
        raise ValueError("the dos scorer has no exact mode (needs attentions)")
    if policy.stochastic_remask:
        raise ValueError("stochastic remasking has no exact mode")
    denoiser = OracleDenoiser(model, enum_limit)
    L = model.L
    gen_len = L - prompt_len
    blocks = _blocks(prompt_len, gen_len, policy.block_size)
    total_steps = policy.steps if policy.steps else gen_len
    budgets = [_block_step_budget(total_steps, len(b), gen_len) for b in blocks]
    dist: Distribution = {}
    nfe_acc = [0.0]

    def walk(
        state: SequenceState,
        bi: int,
        steps_in_block: int,
        history: History,
        mass: float,
        forwards: int,
    ) -> None:
        while bi < len(blocks) and not any(state.is_masked(i) for i in blocks[bi]):
            bi += 1
            steps_in_block = 0
        if bi == len(blocks):
            dist[state.tokens] = dist.get(state.tokens, 0.0) + mass
            nfe_acc[0] += mass * forwards
            return
        out = denoiser(state)
        forwards += 1
        if policy.selector == "klass":
            history = history.copy()
            for i in state.masked_positions():
                history.record(i, out.probs[i])
        candidates = tuple(i for i in blocks[bi] if state.is_masked(i))
        steps_left = max(1, budgets[bi] - steps_in_block)
        _, selected = plan_step(
            policy, out, state, denoiser, candidates, steps_left, history
        )
        if policy.temperature == "greedy":
            combos = [tuple((i, int(np.argmax(out.probs[i])) + 1) for i in selected)]
            probs = [1.0]
        else:
            supports = [
                [(v + 1, float(p)) for v, p in enumerate(out.probs[i]) if p > 0]
                for i in selected
            ]
            combos, probs = [], []
            for combo in itertools.product(*supports):
                p = 1.0
                for _, pv in combo:
                    p *= pv
                combos.append(tuple((i, tok) for i, (tok, _) in zip(selected, combo)))
                probs.append(p)
        for combo, p in zip(combos, probs):
            child = state.with_tokens(dict(combo))
            if policy.selector == "klass":
                h = history.copy()
                for i, _ in combo:
                    h.clear(i)
            else:
                h = history
            walk(child, bi, steps_in_block + 1, h, mass * p, forwards)

    vocab = model.vocab
    if prompt_len:
        table = joint_table(model, enum_limit)
        pm = table.sum(axis=tuple(range(prompt_len, L)))
        for idx, p in np.ndenumerate(pm):
            if p <= 0:
                continue
            prompt = tuple(int(v) + 1 for v in idx)
            state = SequenceState(
                vocab, prompt + (vocab.mask_id,) * gen_len, prompt_len
            )
            walk(state, 0, 0, History(policy.n_history), float(p), 0)
    else:
        state = SequenceState(vocab, (vocab.mask_id,) * L, 0)
        walk(state, 0, 0, History(policy.n_history), 1.0, 0)
    return dist, nfe_acc[0]


# ---------------------------------------------------------------------------
# experiment configuration and runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    joint: str  # "file PATH" | "reference SEED" | "layered SEED"
    denoiser: str = "oracle"  # "oracle" | "checkpoint PATH"
    prompt_len: int = 0
    policies: tuple[PolicyConfig, ...] = ()
    samples: int = 10000
    seed: int = 42
    out: str | None = None
    mode: str = "auto"  # auto | exact | mc
    enum_limit: int = DEFAULT_ENUM_LIMIT
    unconditional: bool = False

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not self.policies:
            raise ValueError("an experiment needs at least one policy")
        if self.mode not in ("auto", "exact", "mc"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.prompt_len == 0 and not self.unconditional:
            raise ValueError("prompt_len=0 requires unconditional=true")


@dataclass
class MetricRow:
    policy_id: str
    scorer: str
    selector: str
    block_size: int
    layer: int
    tv_distance: float
    kl_divergence: float
    mean_nfe: float
    samples: int
    seed: int


METRIC_FIELDS = (
    "policy_id",
    "scorer",
    "selector",
    "block_size",
    "layer",
    "tv_distance",
    "kl_divergence",
    "mean_nfe",
    "samples",
    "seed",
)

CSV_SCHEMA_TAG = "mdlmlab-metrics-v1"


@dataclass
class ExperimentResult:
    rows: list[MetricRow]
    failures: list[tuple[str, str]]
    traces: dict[str, list[DecodeTrace]] = field(default_factory=dict)


def resolve_joint(spec: str) -> tuple[JointModel, int]:
    """Build the joint named by an experiment spec; returns (model, prompt_len hint)."""
    parts = spec.split()
    if parts[0] == "file" and len(parts) == 2:
        return load_joint_model(parts[1]), 0
    if parts[0] == "reference" and len(parts) == 2:
        return reference_dag_model(int(parts[1])), 1
    if parts[0] == "layered" and len(parts) == 2:
        return layered_suite_model(int(parts[1])), 1
    raise ValueError(f"bad joint spec {spec!r}")


def resolve_denoiser(spec: str, model: JointModel, enum_limit: int):
    parts = spec.split()
    if parts[0] == "oracle" and len(parts) == 1:
        return OracleDenoiser(model, enum_limit)
    if parts[0] == "checkpoint" and len(parts) == 2:
        return TransformerDenoiser(load_checkpoint(parts[1]))
    raise ValueError(f"bad denoiser spec {spec!r}")


def _exact_eligible(cfg: ExperimentConfig, denoiser, policy: PolicyConfig, model) -> bool:
    return (
        isinstance(denoiser, OracleDenoiser)
        and policy.scorer != "dos"
        and not policy.stochastic_remask
        and model.vocab.size ** model.L <= cfg.enum_limit
    )


def run_policy(
    model: JointModel,
    denoiser,
    policy: PolicyConfig,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
    keep_traces: bool = False,
) -> tuple[MetricRow, list[DecodeTrace]]:
    target = model_distribution(model)
    gen_len = model.L - cfg.prompt_len
    traces: list[DecodeTrace] = []
    if cfg.mode != "mc" and _exact_eligible(cfg, denoiser, policy, model):
        dist, mean_nfe = exact_induced_distribution(
            model, policy, cfg.prompt_len, cfg.enum_limit
        )
        samples_used = 0
    elif cfg.mode == "exact":
        raise ValueError(
            f"policy {policy.policy_id()} cannot run in exact mode with this setup"
        )
    else:
        seqs = []
        nfes = []
        for _ in range(cfg.samples):
            x = sample_joint(model, rng)
            prompt = x[: cfg.prompt_len]
            final, trace = decode_blockwise(
                denoiser, policy, prompt, gen_len, rng, unconditional=cfg.unconditional
            )
            seqs.append(final.tokens)
            nfes.append(trace.nfe)
            if keep_traces:
                traces.append(trace)
        dist = empirical_distribution(seqs)
        mean_nfe = float(np.mean(nfes))
        samples_used = cfg.samples
    row = MetricRow(
        policy_id=policy.policy_id(),
        scorer=policy.scorer,
        selector=policy.selector,
        block_size=policy.block_size,
        layer=policy.layer,
        tv_distance=tv_distance(target, dist),
        kl_divergence=kl_target_induced(target, dist),
        mean_nfe=mean_nfe,
        samples=samples_used,
        seed=cfg.seed,
    )
    return row, traces


def run_experiment(cfg: ExperimentConfig, keep_traces: bool = False) -> ExperimentResult:
    """Run every policy, compute metrics, and (optionally) write the CSV.

    Per-policy failures are recorded and the run continues; each policy gets
    an independent RNG stream derived from the global seed by its index.
    """
    model, _ = resolve_joint(cfg.joint)
    denoiser = resolve_denoiser(cfg.denoiser, model, cfg.enum_limit)
    result = ExperimentResult(rows=[], failures=[])
    streams = np.random.SeedSequence(cfg.seed).spawn(len(cfg.policies))
    for policy, ss in zip(cfg.policies, streams):
        rng = np.random.default_rng(ss)
        try:
            row, traces = run_policy(model, denoiser, policy, cfg, rng, keep_traces)
        except Exception as exc:  # noqa: BLE001 - recorded, run continues
            result.failures.append((policy.policy_id(), repr(exc)))
            continue
        result.rows.append(row)
        if keep_traces:
            result.traces[policy.policy_id()] = traces
    if cfg.out:
        write_metrics_csv(result.rows, cfg.out)
    return result


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv_text(rows: Sequence[MetricRow]) -> str:
    lines = [f"# schema={CSV_SCHEMA_TAG}", ",".join(METRIC_FIELDS)]
    for r in rows:
        lines.append(",".join(_format_cell(getattr(r, f)) for f in METRIC_FIELDS))
    return "\n".join(lines) + "\n"


def write_metrics_csv(rows: Sequence[MetricRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics_csv_text(rows))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def sweep_blocks(cfg: ExperimentConfig, sizes: Sequence[int]) -> ExperimentResult:
    """Re-run every policy at each block size; one row per (policy, size)."""
    policies = tuple(
        replace(p, block_size=size) for size in sizes for p in cfg.policies
    )
    return run_experiment(replace(cfg, policies=policies))


def sweep_layers(cfg: ExperimentConfig, layers: Sequence[int]) -> ExperimentResult:
    """Run the attention-dependency policy once per layer index.

    Needs a neural denoiser; layer indices are validated against its depth.
    """
    model, _ = resolve_joint(cfg.joint)
    denoiser = resolve_denoiser(cfg.denoiser, model, cfg.enum_limit)
    if not isinstance(denoiser, TransformerDenoiser):
        raise ValueError("layer sweeps need a checkpoint-backed denoiser")
    for l in layers:
        if not 0 <= l < denoiser.n_layers:
            raise ValueError(f"layer {l} out of range (model has {denoiser.n_layers})")
    template = next(
        (p for p in cfg.policies if p.scorer == "dos"),
        PolicyConfig(scorer="dos", selector="topk", temperature="sample"),
    )
    policies = tuple(replace(template, layer=l) for l in layers)
    return run_experiment(replace(cfg, policies=policies))


# ---------------------------------------------------------------------------
# learned-denoiser evaluation
# ---------------------------------------------------------------------------

def mean_conditional_kl(
    model: JointModel,
    denoiser,
    prompt_len: int,
    n_states: int,
    rng: np.random.Generator,
) -> float:
    """Mean KL(exact conditional || prediction) over random masked states.

    States are drawn by sampling a clean sequence and corrupting it at a
    uniform time, redrawing until at least one position is masked; the KL is
    averaged over every masked position of every state.
    """
    vocab = model.vocab
    total = 0.0
    count = 0
    for _ in range(n_states):
        x = sample_joint(model, rng)
        clean = SequenceState(vocab, x, prompt_len)
        state = clean
        while not state.masked_positions():
            state = forward_mask(clean, rng.uniform(0.0, 1.0), rng)
        exact = conditional_marginal(model, state)
        out = denoiser(state)
        for i, p in exact.items():
            total += scoring.kl_divergence(p, out.probs[i])
            count += 1
    return total / count


# ---------------------------------------------------------------------------
# seeded suites: the 5-node reference network and the layered family
# ---------------------------------------------------------------------------

def reference_schedules() -> dict[str, GroupSchedule]:
    """The four parallel schedules over X1..X4 (positions 1..4, prompt at 0)."""
    return {
        "all_at_once": GroupSchedule(((1, 2, 3, 4),)),
        "pair_13_then_24": GroupSchedule(((1, 3), (2, 4))),
        "pair_23_then_14": GroupSchedule(((2, 3), (1, 4))),
        "pair_12_then_34": GroupSchedule(((1, 2), (3, 4))),
    }


# Only the last schedule respects the reference network's dependencies, so it
# is the only one expected to reproduce the joint exactly.
REFERENCE_EXACT_SCHEDULE = "pair_12_then_34"


def _bern_row(p1: float) -> np.ndarray:
    return np.array([p1, 1.0 - p1])


def reference_dag_model(seed: int, max_attempts: int = 1000) -> FactorizedDAG:
    """Seeded binary 5-node network: prompt -> {X1, X2}, X1 -> X3, {X1, X2} -> X4.

    CPT draws are rejected until each of the three dependency-breaking
    schedules induces TV > 0.01 (the dependency-respecting schedule is exact
    for every draw, by construction of the graph).
    """
    rng = np.random.default_rng(seed)
    parents = ((), (0,), (0,), (1,), (1, 2))
    for _ in range(max_attempts):
        cpts = (
            _bern_row(rng.uniform(0.35, 0.65)),
            np.stack([_bern_row(rng.uniform(0.08, 0.92)) for _ in range(2)]),
            np.stack([_bern_row(rng.uniform(0.08, 0.92)) for _ in range(2)]),
            np.stack([_bern_row(rng.uniform(0.08, 0.92)) for _ in range(2)]),
            np.stack(
                [
                    np.stack([_bern_row(rng.uniform(0.08, 0.92)) for _ in range(2)])
                    for _ in range(2)
                ]
            ),
        )
        model = FactorizedDAG(Vocabulary(2), parents, cpts)
        target = model_distribution(model)
        tvs = {
            name: tv_distance(
                target, exact_policy_distribution(model, sched, prompt_len=1)
            )
            for name, sched in reference_schedules().items()
        }
        broken = [v for k, v in tvs.items() if k != REFERENCE_EXACT_SCHEDULE]
        if min(broken) > 0.01:
            return model
    raise RuntimeError(f"no acceptable CPT draw after {max_attempts} attempts")


def reference_schedule_report(seed: int) -> list[dict]:
    """TV of each reference schedule, with its expected outcome; CLI-facing."""
    model = reference_dag_model(seed)
    target = model_distribution(model)
    report = []
    for name, sched in reference_schedules().items():
        tv = tv_distance(target, exact_policy_distribution(model, sched, prompt_len=1))
        exact_expected = name == REFERENCE_EXACT_SCHEDULE
        ok = tv <= 1e-9 if exact_expected else tv > 0.01
        report.append(
            {
                "schedule": name,
                "tv": tv,
                "expected": "exact" if exact_expected else "mismatched",
                "ok": ok,
            }
        )
    return report


def _pattern_mi_vector(model: JointModel, masked: set[int]) -> np.ndarray:
    """Dependency scores for a mask pattern without building a state."""
    vocab = model.vocab
    tokens = tuple(
        vocab.mask_id if i in masked else 1 for i in range(model.L)
    )
    # Observed values do not enter the score, so any placeholder tokens work.
    state = SequenceState(vocab, tokens, prompt_len=0)
    scores = np.full(model.L, np.nan)
    for m in sorted(masked):
        scores[m] = oracle_dependency(model, state, m)
    return scores


def dependency_greedy_schedule(
    model: JointModel, prompt_len: int, steps: int
) -> GroupSchedule:
    """The fixed group schedule a dependency-ranked top-k decode follows.

    Pattern mutual information does not depend on observed values, so the
    selection sequence is one deterministic schedule.
    """
    masked = set(range(prompt_len, model.L))
    groups = []
    steps_left = steps
    while masked:
        k = math.ceil(len(masked) / max(1, steps_left))
        scores = _pattern_mi_vector(model, masked)
        group = select_topk(scores, sorted(masked), k)
        groups.append(group)
        masked -= set(group)
        steps_left = max(1, steps_left - 1)
    return GroupSchedule(tuple(groups))


def layered_suite_model(
    seed: int,
    n_roots: int = 4,
    n_children: int = 4,
    max_attempts: int = 500,
) -> FactorizedDAG:
    """One dependency-structured instance of the seeded layered family.

    Binary network over 1 + n_roots + n_children positions: position 0 is
    the prompt, the roots (next n_roots positions) couple directly to it,
    and each child couples strongly to two roots. Half the children carry
    asymmetric tables that inflate their marginal confidence; the other half
    carry parity-style tables with low prompt information. CPT draws are
    rejected until the instance is genuinely dependency-structured:

      * pattern mutual information separates the layers at the start,
      * for every prompt value at least one child outranks all but one root
        in confidence (so uncertainty ordering crosses the layers),
      * every child table has row spread >= 0.3 (strong parent coupling),
      * the dependency-greedy parallel schedule is mismatch-free.
    """
    rng = np.random.default_rng(seed)
    L = 1 + n_roots + n_children
    roots = list(range(1, 1 + n_roots))
    children = list(range(1 + n_roots, L))
    gen_len = L - 1
    steps = gen_len // 2
    for _ in range(max_attempts):
        parents: list[tuple[int, ...]] = [()]
        cpts: list[np.ndarray] = [_bern_row(rng.uniform(0.4, 0.6))]
        for _ in roots:
            hi = rng.uniform(0.70, 0.78)
            parents.append((0,))
            cpts.append(np.stack([_bern_row(hi), _bern_row(1.0 - hi)]))
        for j, _ in enumerate(children):
            pa, pb = sorted(rng.choice(roots, size=2, replace=False).tolist())
            parents.append((pa, pb))
            rows = np.zeros((2, 2, 2))
            # Both child types key on parent agreement, which carries almost no
            # prompt information (flipping the prompt flips both roots).
            if j % 2 == 0:  # confidence-inflating child: near-certain on agreement
                for va in range(2):
                    for vb in range(2):
                        p1 = (
                            rng.uniform(0.96, 0.995)
                            if va == vb
                            else rng.uniform(0.45, 0.55)
                        )
                        rows[va, vb] = _bern_row(p1)
            else:  # parity-style child: strong coupling, near-uniform marginal
                for va in range(2):
                    for vb in range(2):
                        hi = rng.uniform(0.86, 0.95)
                        rows[va, vb] = _bern_row(hi if va == vb else 1.0 - hi)
            cpts.append(rows)
        model = FactorizedDAG(Vocabulary(2), tuple(parents), tuple(cpts))

        # margin 1: mutual information separates the layers up front
        mi = _pattern_mi_vector(model, set(range(1, L)))
        if min(mi[r] for r in roots) < max(mi[c] for c in children) + 0.02:
            continue
        # margin 2: confidence ordering crosses the layers for every prompt value
        table = joint_table(model)
        crossed = True
        for c in (1, 2):
            state = SequenceState(
                model.vocab, (c,) + (model.vocab.mask_id,) * gen_len, 1
            )
            cm = conditional_marginal(model, state)
            root_conf = sorted(float(cm[r].max()) for r in roots)
            child_conf = max(float(cm[ch].max()) for ch in children)
            if child_conf <= root_conf[-2] + 0.02:
                crossed = False
                break
        if not crossed:
            continue
        # margin 3: every child strongly coupled to its parents
        spread_ok = all(
            float(cpts[ch][..., 0].max() - cpts[ch][..., 0].min()) >= 0.3
            for ch in children
        )
        if not spread_ok:
            continue
        # margin 4: the dependency-greedy schedule recovers the joint exactly
        sched = dependency_greedy_schedule(model, prompt_len=1, steps=steps)
        target = model_distribution(model)
        induced = exact_policy_distribution(model, sched, prompt_len=1)
        if tv_distance(target, induced) > 1e-9:
            continue
        return model
    raise RuntimeError(f"no acceptable layered draw after {max_attempts} attempts")
