"""Small decoder-only causal transformer with hybrid discrete/continuous inputs.

Architecture: pre-RMSNorm blocks, rotary positions applied inside attention
(injected continuous rows need no explicit position add), ReLU feed-forward,
untied unembedding. Low-rank adapters attach to the attention query/value
projections and the feed-forward up-projection; the adapted projection is
computed as x@W + scale*((x@A)@B) so gradients reach only the factors.

forward_hybrid works on a single sequence (T, d) built from a mixed list of
token ids and d_model vectors, or on a pre-built batched (B, T, d) input via
run_layers. decode_greedy is a numpy-only incremental decoder with per-layer
KV caches, checked token-for-token against a naive re-forward reference in
the tests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import tasks
from .autodiff import Tensor
from .checkpoint import load_archive, save_archive
from .errors import ContractViolation, ShapeMismatch, TrainingDiverged

NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int = tasks.VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 512
    rope_base: float = 10000.0
    pad_id: int = tasks.PAD_ID
    bos_id: int = tasks.BOS_ID
    eos_id: int = tasks.EOS_ID
    eot_id: int = tasks.EOT_ID
    draft_id: int = tasks.DRAFT_ID
    sep_id: int = tasks.SEP_ID

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractViolation("d_model must be divisible by n_heads")
        specials = [self.pad_id, self.bos_id, self.eos_id, self.eot_id, self.draft_id, self.sep_id]
        if len(set(specials)) != len(specials):
            raise ContractViolation("special token ids must be pairwise distinct")
        if max(specials) >= self.vocab_size:
            raise ContractViolation("special token ids must be < vocab_size")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"embed": (cfg.vocab_size, cfg.d_model)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn_norm"] = (cfg.d_model,)
        shapes[f"{p}.wq"] = (cfg.d_model, cfg.d_model)
        shapes[f"{p}.wk"] = (cfg.d_model, cfg.d_model)
        shapes[f"{p}.wv"] = (cfg.d_model, cfg.d_model)
        shapes[f"{p}.wo"] = (cfg.d_model, cfg.d_model)
        shapes[f"{p}.ffn_norm"] = (cfg.d_model,)
        shapes[f"{p}.w_up"] = (cfg.d_model, cfg.d_ff)
        shapes[f"{p}.w_down"] = (cfg.d_ff, cfg.d_model)
    shapes["final_norm"] = (cfg.d_model,)
    shapes["unembed"] = (cfg.d_model, cfg.vocab_size)
    return shapes


class TransformerParams:
    """Frozen-by-default named parameter set."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "TransformerParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        out_scale = 0.02 / np.sqrt(2 * config.n_layers)
        for name, shape in _param_shapes(config).items():
            if name.endswith("_norm"):
                data = np.ones(shape, dtype=dtype)
            elif name.endswith(".wo") or name.endswith(".w_down"):
                data = rng.normal(0.0, out_scale, size=shape).astype(dtype)
            else:
                data = rng.normal(0.0, 0.02, size=shape).astype(dtype)
            tensors[name] = Tensor(data)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            t = self.tensors[name]
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


@dataclass
class AdapterConfig:
    rank: int = 8
    alpha: float = 32.0

    def __post_init__(self):
        if self.rank < 1:
            raise ContractViolation("adapter rank must be >= 1")


ADAPTER_TARGETS = ("wq", "wv", "w_up")


class AdapterSet:
    """Rank-r factors per adapted weight; effective delta = (alpha/r) * A@B."""

    def __init__(self, config: AdapterConfig, tensors: dict[str, Tensor], enabled: bool = True):
        self.config = config
        self.tensors = tensors
        self.enabled = enabled

    @classmethod
    def init(cls, model_config: ModelConfig, config: AdapterConfig | None = None,
             seed: int = 0, dtype=np.float32) -> "AdapterSet":
        config = config or AdapterConfig()
        rng = np.random.default_rng(seed)
        tensors = {}
        for i in range(model_config.n_layers):
            for target in ADAPTER_TARGETS:
                base_shape = _param_shapes(model_config)[f"layers.{i}.{target}"]
                d_in, d_out = base_shape
                tensors[f"layers.{i}.{target}.lora_a"] = Tensor(
                    rng.normal(0.0, 0.02, size=(d_in, config.rank)).astype(dtype))
                tensors[f"layers.{i}.{target}.lora_b"] = Tensor(
                    np.zeros((config.rank, d_out), dtype=dtype))
        return cls(config, tensors)

    @property
    def scale(self) -> float:
        return self.config.alpha / self.config.rank

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def named(self) -> dict[str, Tensor]:
        return self.tensors


@dataclass
class HiddenStates:
    """Per-layer block outputs (1..L), post-norm final states, and logits.

    Every matrix is seq_len x d_model (batched: B x T x d_model); row t is
    causal, depending only on positions <= t.
    """

    layers: list[Tensor]
    final: Tensor
    logits: Tensor


# rotary tables --------------------------------------------------------------

_rope_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def rope_tables(cfg: ModelConfig, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    key = (cfg.max_seq_len, cfg.head_dim, cfg.rope_base, np.dtype(dtype).name)
    if key not in _rope_cache:
        half = cfg.head_dim // 2
        freqs = cfg.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / cfg.head_dim)
        angles = np.arange(cfg.max_seq_len, dtype=np.float64)[:, None] * freqs[None, :]
        _rope_cache[key] = (np.cos(angles).astype(dtype), np.sin(angles).astype(dtype))
    return _rope_cache[key]


def _apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    # x: (..., T, head_dim); cos/sin: (T, head_dim/2) broadcast over leading axes
    half = x.shape[-1] // 2
    ndim = len(x.shape)
    sl1 = (slice(None),) * (ndim - 1) + (slice(0, half),)
    sl2 = (slice(None),) * (ndim - 1) + (slice(half, None),)
    x1, x2 = x[sl1], x[sl2]
    return ad.concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _proj(h: Tensor, params: TransformerParams, layer: int, target: str,
          adapters: AdapterSet | None) -> Tensor:
    y = h @ params[f"layers.{layer}.{target}"]
    if adapters is not None and adapters.enabled:
        a = adapters.tensors[f"layers.{layer}.{target}.lora_a"]
        b = adapters.tensors[f"layers.{layer}.{target}.lora_b"]
        y = y + ((h @ a) @ b) * adapters.scale
    return y


def run_layers(params: TransformerParams, x: Tensor, adapters: AdapterSet | None = None,
               position_offset: int = 0) -> HiddenStates:
    """Core stack over a (T, d) or (B, T, d) input already in embedding space."""
    cfg = params.config
    seq_axis = len(x.shape) - 2
    t = x.shape[seq_axis]
    if position_offset + t > cfg.max_seq_len:
        raise ContractViolation(f"sequence length {position_offset + t} exceeds max_seq_len {cfg.max_seq_len}")
    cos_full, sin_full = rope_tables(cfg, x.dtype)
    cos = cos_full[position_offset:position_offset + t]
    sin = sin_full[position_offset:position_offset + t]
    causal = np.triu(np.full((t, t), NEG_INF, dtype=x.dtype), k=1)
    inv_sqrt_hd = 1.0 / np.sqrt(cfg.head_dim)

    batched = len(x.shape) == 3
    if batched:
        to_heads = lambda y, n: ad.transpose(ad.reshape(y, (y.shape[0], t, cfg.n_heads, n)), (0, 2, 1, 3))
        from_heads = lambda y: ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (y.shape[0], t, cfg.d_model))
    else:
        to_heads = lambda y, n: ad.transpose(ad.reshape(y, (t, cfg.n_heads, n)), (1, 0, 2))
        from_heads = lambda y: ad.reshape(ad.transpose(y, (1, 0, 2)), (t, cfg.d_model))

    layer_outputs = []
    for i in range(cfg.n_layers):
        h = ad.rmsnorm(x, params[f"layers.{i}.attn_norm"])
        q = to_heads(_proj(h, params, i, "wq", adapters), cfg.head_dim)
        k = to_heads(h @ params[f"layers.{i}.wk"], cfg.head_dim)
        v = to_heads(_proj(h, params, i, "wv", adapters), cfg.head_dim)
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)
        scores = (q @ ad.transpose(k, tuple(range(len(k.shape) - 2)) + (len(k.shape) - 1, len(k.shape) - 2))) * inv_sqrt_hd
        attn = ad.softmax(scores + causal, axis=-1)
        ctx = from_heads(attn @ v)
        x = x + ctx @ params[f"layers.{i}.wo"]
        h2 = ad.rmsnorm(x, params[f"layers.{i}.ffn_norm"])
        f = ad.relu(_proj(h2, params, i, "w_up", adapters)) @ params[f"layers.{i}.w_down"]
        x = x + f
        layer_outputs.append(x)

    final = ad.rmsnorm(x, params["final_norm"])
    logits = final @ params["unembed"]
    return HiddenStates(layers=layer_outputs, final=final, logits=logits)


def embed(params: TransformerParams, token_ids) -> Tensor:
    """Embedding-table rows for token_ids; no position information."""
    ids = np.asarray(token_ids, dtype=np.int64)
    return ad.embedding(params["embed"], ids)


def build_hybrid_input(params: TransformerParams, items) -> Tensor:
    """Mixed token ids / d-vectors / (k, d) blocks -> (T, d) in embedding space."""
    cfg = params.config
    segments: list[Tensor] = []
    run: list[int] = []

    def flush():
        if run:
            segments.append(embed(params, list(run)))
            run.clear()

    for item in items:
        if isinstance(item, (int, np.integer)):
            run.append(int(item))
        else:
            flush()
            t = item if isinstance(item, Tensor) else Tensor(np.asarray(item, dtype=np.float32))
            if len(t.shape) == 1:
                t = ad.reshape(t, (1, t.shape[0]))
            if len(t.shape) != 2 or t.shape[1] != cfg.d_model:
                raise ShapeMismatch(f"continuous input must be (k, {cfg.d_model}), got {t.shape}")
            segments.append(t)
    flush()
    if not segments:
        raise ContractViolation("empty hybrid input")
    return segments[0] if len(segments) == 1 else ad.concat(segments, axis=0)


def forward_hybrid(params: TransformerParams, items, adapters: AdapterSet | None = None) -> HiddenStates:
    return run_layers(params, build_hybrid_input(params, items), adapters)


# incremental greedy decoding -------------------------------------------------


class _InferenceSession:
    """numpy-only forward with per-layer KV caches; weights are materialized
    (adapter deltas folded in) once per session."""

    def __init__(self, params: TransformerParams, adapters: AdapterSet | None):
        self.cfg = params.config
        cfg = self.cfg
        self.w = {name: t.data for name, t in params.tensors.items()}
        if adapters is not None and adapters.enabled:
            self.w = dict(self.w)
            for i in range(cfg.n_layers):
                for target in ADAPTER_TARGETS:
                    a = adapters.tensors[f"layers.{i}.{target}.lora_a"].data
                    b = adapters.tensors[f"layers.{i}.{target}.lora_b"].data
                    self.w[f"layers.{i}.{target}"] = (
                        self.w[f"layers.{i}.{target}"] + adapters.scale * (a @ b))
        self.cos, self.sin = rope_tables(cfg, np.float32)
        self.k_cache = [np.zeros((cfg.n_heads, 0, cfg.head_dim), np.float32) for _ in range(cfg.n_layers)]
        self.v_cache = [np.zeros((cfg.n_heads, 0, cfg.head_dim), np.float32) for _ in range(cfg.n_layers)]
        self.pos = 0

    def _rmsnorm(self, x, wname):
        ms = (x * x).mean(axis=-1, keepdims=True) + 1e-5
        return x * (ms ** -0.5) * self.w[wname]

    def _rope(self, x, p0):
        # x: (H, T, hd)
        half = self.cfg.head_dim // 2
        t = x.shape[1]
        c = self.cos[p0:p0 + t, :]
        s = self.sin[p0:p0 + t, :]
        x1, x2 = x[..., :half], x[..., half:]
        return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)

    def append(self, x: np.ndarray) -> np.ndarray:
        """Run T new rows (T, d) through the stack, extending the caches.
        Returns post-norm final states (T, d)."""
        cfg = self.cfg
        t = x.shape[0]
        if self.pos + t > cfg.max_seq_len:
            raise ContractViolation(f"sequence length {self.pos + t} exceeds max_seq_len {cfg.max_seq_len}")
        p0 = self.pos
        heads = lambda y: y.reshape(t, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)
        for i in range(cfg.n_layers):
            h = self._rmsnorm(x, f"layers.{i}.attn_norm")
            q = self._rope(heads(h @ self.w[f"layers.{i}.wq"]), p0)
            k = self._rope(heads(h @ self.w[f"layers.{i}.wk"]), p0)
            v = heads(h @ self.w[f"layers.{i}.wv"])
            self.k_cache[i] = np.concatenate([self.k_cache[i], k], axis=1)
            self.v_cache[i] = np.concatenate([self.v_cache[i], v], axis=1)
            scores = q @ self.k_cache[i].transpose(0, 2, 1) / np.sqrt(cfg.head_dim)
            if t > 1:
                total = self.k_cache[i].shape[1]
                mask = np.triu(np.full((t, total), NEG_INF, np.float32), k=1 + (total - t))
                scores = scores + mask
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            ctx = (attn @ self.v_cache[i]).transpose(1, 0, 2).reshape(t, cfg.d_model)
            x = x + ctx @ self.w[f"layers.{i}.wo"]
            h2 = self._rmsnorm(x, f"layers.{i}.ffn_norm")
            x = x + np.maximum(h2 @ self.w[f"layers.{i}.w_up"], 0.0) @ self.w[f"layers.{i}.w_down"]
        self.pos += t
        return self._rmsnorm(x, "final_norm")

    def embed_items(self, items) -> np.ndarray:
        rows = []
        for item in items:
            if isinstance(item, (int, np.integer)):
                rows.append(self.w["embed"][int(item)][None, :])
            else:
                arr = np.asarray(item.data if isinstance(item, Tensor) else item, dtype=np.float32)
                rows.append(arr[None, :] if arr.ndim == 1 else arr)
        return np.concatenate(rows, axis=0)


def decode_greedy(params: TransformerParams, prefix_items, max_new: int,
                  adapters: AdapterSet | None = None) -> list[int]:
    """Greedy continuation of a hybrid prefix. Deterministic; ties resolve to
    the lowest token id; stops after emitting eos or at max_new tokens; an
    emitted eos is always the final element."""
    if max_new < 0:
        raise ContractViolation("max_new must be >= 0")
    cfg = params.config
    session = _InferenceSession(params, adapters)
    x = session.embed_items(prefix_items)
    final = session.append(x)
    out: list[int] = []
    logits = final[-1] @ session.w["unembed"]
    for _ in range(max_new):
        token = int(np.argmax(logits))
        out.append(token)
        if token == cfg.eos_id or session.pos >= cfg.max_seq_len:
            break
        final = session.append(session.w["embed"][token][None, :])
        logits = final[-1] @ session.w["unembed"]
    return out


# checkpointing ---------------------------------------------------------------


def save_checkpoint(path, params: TransformerParams, adapters: AdapterSet | None = None) -> None:
    tensors = {f"model.{name}": t.data for name, t in params.tensors.items()}
    if adapters is not None:
        tensors.update({f"adapter.{name}": t.data for name, t in adapters.tensors.items()})
    save_archive(path, tensors)
    meta = {"model": asdict(params.config)}
    if adapters is not None:
        meta["adapter"] = {"rank": adapters.config.rank, "alpha": adapters.config.alpha}
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)


def load_checkpoint(path) -> tuple[TransformerParams, AdapterSet | None]:
    tensors = load_archive(path)
    with open(f"{path}.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    config = ModelConfig(**meta["model"])
    model_tensors = {}
    adapter_tensors = {}
    for name, arr in tensors.items():
        if name.startswith("model."):
            model_tensors[name[len("model."):]] = Tensor(arr)
        elif name.startswith("adapter."):
            adapter_tensors[name[len("adapter."):]] = Tensor(arr)
    params = TransformerParams(config, model_tensors)
    adapters = None
    if adapter_tensors:
        adapters = AdapterSet(AdapterConfig(**meta["adapter"]), adapter_tensors)
    return params, adapters


# pretraining ------------------------------------------------------------------


@dataclass
class PretrainSchedule:
    steps: int = 14000
    batch_size: int = 16
    lr: float = 1e-3
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.15
    seed: int = 0
    log_every: int = 200
    mask_question: bool = True  # score the trace region only
    disguised_repeat: int = 4  # sampling weight for disguised items in the step mix


def training_sequence(cfg: ModelConfig, sample: tasks.ReasoningSample) -> list[int]:
    """[Q, think_sep, DCoT, eot, A, eos] — the raw-model pretraining format."""
    return (sample.q_tokens() + [cfg.sep_id] + sample.dcot_tokens()
            + [cfg.eot_id] + sample.a_tokens() + [cfg.eos_id])


def _lm_loss(params: TransformerParams, batch_ids: np.ndarray, pad_id: int,
             sep_id: int | None = None) -> Tensor:
    """Next-token loss over the batch. With sep_id given, only the trace
    region is scored (targets from the sep position onward): the question's
    random literals and letters are unpredictable and would only soak up
    capacity."""
    x = ad.embedding(params["embed"], batch_ids[:, :-1])
    states = run_layers(params, x)
    targets = batch_ids[:, 1:]
    mask = (targets != pad_id).astype(np.float32)
    if sep_id is not None:
        reached_sep = np.cumsum(batch_ids == sep_id, axis=1) >= 1
        mask = mask * reached_sep[:, 1:].astype(np.float32)
    return ad.cross_entropy(states.logits, targets, mask)


def _pad_batch(seqs: list[list[int]], pad_id: int) -> np.ndarray:
    t = max(len(s) for s in seqs)
    arr = np.full((len(seqs), t), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        arr[i, :len(s)] = s
    return arr


def heldout_loss(params: TransformerParams, samples: list[tasks.ReasoningSample],
                 batch_size: int = 32, mask_question: bool = True) -> float:
    cfg = params.config
    sep = cfg.sep_id if mask_question else None
    total, count = 0.0, 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        batch = _pad_batch([training_sequence(cfg, s) for s in chunk], cfg.pad_id)
        mask = (batch[:, 1:] != cfg.pad_id)
        if mask_question:
            mask = mask & (np.cumsum(batch == cfg.sep_id, axis=1) >= 1)[:, 1:]
        n_tok = int(mask.sum())
        total += _lm_loss(params, batch, cfg.pad_id, sep).item() * n_tok
        count += n_tok
    return total / max(count, 1)


def pretrain_raw(config: ModelConfig, corpus: tasks.CorpusSplits,
                 schedule: PretrainSchedule) -> tuple[TransformerParams, dict]:
    """Next-token training on [Q, sep, DCoT, eot, A, eos] sequences."""
    if not corpus.train:
        raise ContractViolation("pretrain_raw needs a nonempty corpus")
    params = TransformerParams.init(config, seed=schedule.seed)
    params.set_trainable(True)
    opt = ad.OptimizerState(lr=schedule.lr)
    rng = np.random.default_rng(schedule.seed)
    seqs = [training_sequence(config, s) for s in corpus.train]
    # the early-stop-at-query skill only gets gradient from disguised traces;
    # repeating them in the step mix sharpens that signal without touching
    # the corpus itself
    weights = [schedule.disguised_repeat if s.disguised else 1 for s in corpus.train]
    order = np.repeat(np.arange(len(seqs)), weights)
    losses = []
    warmup = max(1, int(schedule.steps * schedule.warmup_frac))
    cursor = len(seqs)
    for step in range(schedule.steps):
        if cursor + schedule.batch_size > len(seqs):
            rng.shuffle(order)
            cursor = 0
        idx = order[cursor:cursor + schedule.batch_size]
        cursor += schedule.batch_size
        batch = _pad_batch([seqs[i] for i in idx], config.pad_id)
        loss = _lm_loss(params, batch, config.pad_id,
                        config.sep_id if schedule.mask_question else None)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite pretraining loss at step {step}")
        losses.append(value)
        if step < warmup:
            lr = schedule.lr * (step + 1) / warmup
        else:
            frac = (step - warmup) / max(1, schedule.steps - warmup)
            lr = schedule.lr * (schedule.min_lr_frac
                                + (1 - schedule.min_lr_frac) * 0.5 * (1 + np.cos(np.pi * frac)))
        opt.lr = float(lr)
        grads = ad.backward(loss)
        named_grads = {name: grads[t] for name, t in params.tensors.items() if t in grads}
        ad.adam_update(opt, params.tensors, named_grads)
    params.set_trainable(False)
    log = {
        "steps": schedule.steps,
        "final_train_loss": losses[-1] if losses else None,
        "mean_last_100": float(np.mean(losses[-100:])) if losses else None,
        "heldout_loss": heldout_loss(params, corpus.val) if corpus.val else None,
    }
    return params, log
