"""A tiny bidirectional transformer denoiser with manual backpropagation.

Pre-norm encoder blocks, learned positional embeddings, exact (erf) GELU,
full bidirectional attention, no dropout. The output head covers the V
content tokens only, so the mask symbol always has probability zero. Every
attention matrix is returned from the forward pass; that tensor is the input
to attention-based dependency scoring.

All tensors are float64, which keeps finite-difference gradient checks tight.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .core import LINEAR, DenoiserOutput, Schedule, SequenceState, Vocabulary, forward_mask
from .oracle import JointModel, sample_joint


class CheckpointError(ValueError):
    """Malformed, truncated, or mismatched checkpoint file."""


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    max_len: int = 16
    vocab_size: int = 2
    seed: int = 0
    learning_rate: float = 0.1
    batch_size: int = 64
    train_steps: int = 4000
    t_min: float = 0.01

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 < self.t_min <= 0.5:
            raise ValueError("t_min must lie in (0, 0.5]")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.vocab_size)


def param_specs(config: TransformerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; checkpoints store tensors in this order."""
    d, dff, V = config.d_model, config.d_ff, config.vocab_size
    specs: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (V + 1, d)),  # rows 0..V-1 = content tokens, row V = mask
        ("pos_emb", (config.max_len, d)),
    ]
    for l in range(config.n_layers):
        specs += [
            (f"layer{l}.ln1.g", (d,)),
            (f"layer{l}.ln1.b", (d,)),
            (f"layer{l}.wq", (d, d)),
            (f"layer{l}.wk", (d, d)),
            (f"layer{l}.wv", (d, d)),
            (f"layer{l}.wo", (d, d)),
            (f"layer{l}.ln2.g", (d,)),
            (f"layer{l}.ln2.b", (d,)),
            (f"layer{l}.w1", (d, dff)),
            (f"layer{l}.b1", (dff,)),
            (f"layer{l}.w2", (dff, d)),
            (f"layer{l}.b2", (d,)),
        ]
    specs += [
        ("lnf.g", (d,)),
        ("lnf.b", (d,)),
        ("wout", (d, V)),
        ("bout", (V,)),
    ]
    return specs


@dataclass
class Params:
    """Parameter tensors keyed by name, together with their architecture."""

    config: TransformerConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "Params":
        return Params(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(config: TransformerConfig) -> Params:
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_specs(config):
        if name.endswith(".g") or name == "lnf.g":
            tensors[name] = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2", "bout")) or name == "bout":
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape)
    return Params(config, tensors)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

_LN_EPS = 1e-5


def _ln_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _ln_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxh = dy * g
    dx = inv * (
        dxh
        - dxh.mean(-1, keepdims=True)
        - xhat * (dxh * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(u):
    phi = 0.5 * (1.0 + erf(u / np.sqrt(2.0)))
    return u * phi, phi


def _gelu_grad(u, phi):
    return phi + u * np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _split_heads(x, H):
    B, L, d = x.shape
    return x.reshape(B, L, H, d // H).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def token_rows(config: TransformerConfig, tokens: np.ndarray) -> np.ndarray:
    """Map token ids (1..V, mask=V+1) to embedding rows (0..V-1, mask=V)."""
    toks = np.asarray(tokens, dtype=np.int64)
    if np.any(toks < 1) or np.any(toks > config.vocab_size + 1):
        raise ValueError("invalid token id in batch")
    return toks - 1


def _forward_batch(params: Params, tokens: np.ndarray):
    """Full forward pass; returns (log_probs, attentions, cache)."""
    cfg = params.config
    t = params.tensors
    B, L = tokens.shape
    if L > cfg.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    rows = token_rows(cfg, tokens)
    h = t["tok_emb"][rows] + t["pos_emb"][:L]
    scale = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)
    layer_caches = []
    attentions = []
    for l in range(cfg.n_layers):
        p = lambda s: t[f"layer{l}.{s}"]  # noqa: E731
        x1, c1 = _ln_forward(h, p("ln1.g"), p("ln1.b"))
        qh = _split_heads(x1 @ p("wq"), cfg.n_heads)
        kh = _split_heads(x1 @ p("wk"), cfg.n_heads)
        vh = _split_heads(x1 @ p("wv"), cfg.n_heads)
        scores = (qh @ kh.swapaxes(-1, -2)) * scale
        a = _softmax(scores)
        ctx = _merge_heads(a @ vh)
        h_mid = h + ctx @ p("wo")
        x2, c2 = _ln_forward(h_mid, p("ln2.g"), p("ln2.b"))
        u = x2 @ p("w1") + p("b1")
        gu, phi = _gelu(u)
        h_out = h_mid + gu @ p("w2") + p("b2")
        layer_caches.append((h, c1, x1, qh, kh, vh, a, ctx, h_mid, c2, x2, u, phi, gu))
        attentions.append(a)
        h = h_out
    hf, cf = _ln_forward(h, t["lnf.g"], t["lnf.b"])
    logits = hf @ t["wout"] + t["bout"]
    log_probs = _log_softmax(logits)
    cache = (rows, layer_caches, cf, hf, log_probs)
    return log_probs, attentions, cache


def _backward_batch(params: Params, dlogits: np.ndarray, cache) -> dict[str, np.ndarray]:
    cfg = params.config
    t = params.tensors
    rows, layer_caches, cf, hf, _ = cache
    B, L, _ = dlogits.shape
    scale = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)
    g = {name: np.zeros_like(arr) for name, arr in t.items()}

    flat = lambda x: x.reshape(-1, x.shape[-1])  # noqa: E731
    g["wout"] += flat(hf).T @ flat(dlogits)
    g["bout"] += dlogits.sum(axis=(0, 1))
    dhf = dlogits @ t["wout"].T
    dh, g["lnf.g"], g["lnf.b"] = _ln_backward(dhf, cf, t["lnf.g"])

    for l in reversed(range(cfg.n_layers)):
        p = lambda s: t[f"layer{l}.{s}"]  # noqa: E731
        h_in, c1, x1, qh, kh, vh, a, ctx, h_mid, c2, x2, u, phi, gu = layer_caches[l]
        # h_out = h_mid + gelu(x2 @ w1 + b1) @ w2 + b2
        df = dh
        g[f"layer{l}.w2"] += flat(gu).T @ flat(df)
        g[f"layer{l}.b2"] += df.sum(axis=(0, 1))
        dgu = df @ p("w2").T
        du = dgu * _gelu_grad(u, phi)
        g[f"layer{l}.w1"] += flat(x2).T @ flat(du)
        g[f"layer{l}.b1"] += du.sum(axis=(0, 1))
        dx2 = du @ p("w1").T
        dmid_ln, g[f"layer{l}.ln2.g"], g[f"layer{l}.ln2.b"] = _ln_backward(
            dx2, c2, p("ln2.g")
        )
        dh_mid = dh + dmid_ln
        # h_mid = h_in + merge(a @ vh) @ wo
        g[f"layer{l}.wo"] += flat(ctx).T @ flat(dh_mid)
        dctxh = _split_heads(dh_mid @ p("wo").T, cfg.n_heads)
        dA = dctxh @ vh.swapaxes(-1, -2)
        dvh = a.swapaxes(-1, -2) @ dctxh
        ds = a * (dA - (dA * a).sum(axis=-1, keepdims=True))
        dqh = (ds @ kh) * scale
        dkh = (ds.swapaxes(-1, -2) @ qh) * scale
        dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
        g[f"layer{l}.wq"] += flat(x1).T @ flat(dq)
        g[f"layer{l}.wk"] += flat(x1).T @ flat(dk)
        g[f"layer{l}.wv"] += flat(x1).T @ flat(dv)
        dx1 = dq @ p("wq").T + dk @ p("wk").T + dv @ p("wv").T
        din_ln, g[f"layer{l}.ln1.g"], g[f"layer{l}.ln1.b"] = _ln_backward(
            dx1, c1, p("ln1.g")
        )
        dh = dh_mid + din_ln

    g["pos_emb"][:L] += dh.sum(axis=0)
    np.add.at(g["tok_emb"], rows, dh)
    return g


def forward(params: Params, state: SequenceState) -> DenoiserOutput:
    """Denoise one state: per-position distributions plus all attention maps.

    Deterministic given (params, state); repeated calls are bit-identical.
    """
    if state.vocab.size != params.config.vocab_size:
        raise ValueError("state vocabulary does not match the model")
    tokens = np.asarray(state.tokens, dtype=np.int64)[None, :]
    log_probs, attentions, _ = _forward_batch(params, tokens)
    return DenoiserOutput(
        probs=np.exp(log_probs[0]),
        attentions=[a[0] for a in attentions],
    )


class TransformerDenoiser:
    """Callable wrapper giving the decode loop a uniform denoiser interface."""

    def __init__(self, params: Params):
        self.params = params
        self.vocab = params.config.vocab

    def __call__(self, state: SequenceState) -> DenoiserOutput:
        return forward(self.params, state)

    @property
    def n_layers(self) -> int:
        return self.params.config.n_layers


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------

def masked_cross_entropy(
    log_probs: np.ndarray,
    x0: np.ndarray,
    loss_mask: np.ndarray,
    weights: np.ndarray,
) -> float:
    """Weighted cross-entropy over masked positions, averaged over the batch.

    ``log_probs`` is (B, L, V); targets are token ids in x0; each example b
    contributes -weights[b] * sum_i log p(x0[b,i]) over its masked positions,
    and the total is divided by B.
    """
    B = log_probs.shape[0]
    target_lp = np.take_along_axis(log_probs, (x0 - 1)[:, :, None], axis=2)[:, :, 0]
    per_example = (target_lp * loss_mask).sum(axis=1)
    return float(-(weights * per_example).sum() / B)


def loss_on_corrupted(
    params: Params,
    corrupted: np.ndarray,
    x0: np.ndarray,
    loss_mask: np.ndarray,
    weights: np.ndarray,
) -> float:
    """Loss only (no gradient); the target for finite-difference checks."""
    log_probs, _, _ = _forward_batch(params, corrupted)
    return masked_cross_entropy(log_probs, x0, loss_mask, weights)


def loss_and_grad_on_corrupted(
    params: Params,
    corrupted: np.ndarray,
    x0: np.ndarray,
    loss_mask: np.ndarray,
    weights: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Deterministic loss and exact-backprop gradient on a corrupted batch."""
    log_probs, _, cache = _forward_batch(params, corrupted)
    loss = masked_cross_entropy(log_probs, x0, loss_mask, weights)
    B, L, V = log_probs.shape
    w = (weights / B)[:, None] * loss_mask  # (B, L) per-position weight
    dlogits = np.exp(log_probs) * w[:, :, None]
    np.subtract.at(
        dlogits,
        (np.arange(B)[:, None], np.arange(L)[None, :], x0 - 1),
        w,
    )
    grads = _backward_batch(params, dlogits, cache)
    return loss, grads


def corrupt_batch(
    config: TransformerConfig,
    x0_batch: np.ndarray,
    prompt_len: int,
    rng: np.random.Generator,
    schedule: Schedule = LINEAR,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Sample t per example and mask; returns (corrupted, loss_mask, weights, skipped).

    t ~ Uniform[t_min, 1]. An example that comes out with no masked position
    gets one fresh t; if the redraw also masks nothing the example is skipped
    (weight 0) and counted.
    """
    vocab = config.vocab
    B, L = x0_batch.shape
    corrupted = np.array(x0_batch, dtype=np.int64)
    loss_mask = np.zeros((B, L), dtype=bool)
    weights = np.zeros(B)
    skipped = 0
    for b in range(B):
        clean = SequenceState(vocab, tuple(int(v) for v in x0_batch[b]), prompt_len)
        t = None
        state = clean
        for _ in range(2):  # one resample allowed
            t = rng.uniform(config.t_min, 1.0)
            state = forward_mask(clean, t, rng, schedule)
            if state.masked_positions():
                break
        if not state.masked_positions():
            skipped += 1
            continue
        corrupted[b] = state.tokens
        for i in state.masked_positions():
            loss_mask[b, i] = True
        weights[b] = 1.0 / t
    return corrupted, loss_mask, weights, skipped


def mdlm_loss_and_grad(
    params: Params,
    x0_batch: np.ndarray,
    prompt_len: int,
    rng: np.random.Generator,
    schedule: Schedule = LINEAR,
    stats: dict | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """One masked-diffusion training objective evaluation on a clean batch.

    Each example is corrupted at its own t ~ Uniform[t_min, 1] and the
    masked-position cross-entropy is weighted by 1/t; the gradient comes
    from exact backpropagation through the forward pass.
    """
    x0 = np.asarray(x0_batch, dtype=np.int64)
    if x0.ndim != 2 or x0.shape[0] < 1:
        raise ValueError("x0 batch must be a nonempty (B, L) array")
    corrupted, loss_mask, weights, skipped = corrupt_batch(
        params.config, x0, prompt_len, rng, schedule
    )
    if stats is not None:
        stats["skipped"] = skipped
    return loss_and_grad_on_corrupted(params, corrupted, x0, loss_mask, weights)


def train(
    config: TransformerConfig,
    model: JointModel,
    prompt_len: int = 0,
    rng: np.random.Generator | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> Params:
    """Plain fixed-step SGD on batches sampled from the joint.

    Emits the loss curve through ``on_step(step, loss)``. Aborts with a
    diagnostic if the loss stops being finite.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    params = init_params(config)
    lr = config.learning_rate
    for step in range(config.train_steps):
        batch = np.array(
            [sample_joint(model, rng) for _ in range(config.batch_size)],
            dtype=np.int64,
        )
        loss, grads = mdlm_loss_and_grad(params, batch, prompt_len, rng)
        if not np.isfinite(loss):
            raise RuntimeError(f"training diverged at step {step}: loss={loss}")
        for name, grad in grads.items():
            params.tensors[name] -= lr * grad
        if on_step is not None:
            on_step(step, loss)
    return params


# ---------------------------------------------------------------------------
# checkpoint format: little-endian binary
#   magic "MDLMLABC" | u32 version | u32 x5 arch ints | u32 tensor count |
#   per tensor (canonical param_specs order): u32 ndim, u32 dims..., f64 data
# ---------------------------------------------------------------------------

_MAGIC = b"MDLMLABC"
_VERSION = 1
_ARCH_FIELDS = ("n_layers", "n_heads", "d_model", "max_len", "vocab_size")


def save_checkpoint(params: Params, path: str) -> None:
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<5I", *(getattr(cfg, f) for f in _ARCH_FIELDS)))
        specs = param_specs(cfg)
        fh.write(struct.pack("<I", len(specs)))
        for name, shape in specs:
            arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
            if arr.shape != shape:
                raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {shape}")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def load_checkpoint(path: str, expected_config: TransformerConfig | None = None) -> Params:
    """Load a checkpoint; the round trip with save_checkpoint is bit-exact.

    With ``expected_config`` given, every architecture field is compared and
    a mismatch error names the offending field.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path}: wrong magic header")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        arch = struct.unpack("<5I", _read_exact(fh, 20))
        config = TransformerConfig(
            **dict(zip(_ARCH_FIELDS, arch)),
            seed=0,
            learning_rate=0.0,
            batch_size=1,
            train_steps=0,
        )
        if expected_config is not None:
            for f in _ARCH_FIELDS:
                if getattr(expected_config, f) != getattr(config, f):
                    raise CheckpointError(
                        f"{path}: config mismatch in field {f!r}: "
                        f"checkpoint has {getattr(config, f)}, "
                        f"expected {getattr(expected_config, f)}"
                    )
        specs = param_specs(config)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        if count != len(specs):
            raise CheckpointError(
                f"{path}: tensor count {count} does not match architecture ({len(specs)})"
            )
        tensors: dict[str, np.ndarray] = {}
        for name, shape in specs:
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            if dims != shape:
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {dims}, expected {shape}"
                )
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8")
            tensors[name] = data.reshape(dims).astype(np.float64)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after parameter tensors")
    return Params(config, tensors)
