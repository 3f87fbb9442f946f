"""Adapter fine-tuning that turns a meaningless draft into a usable
continuous thought by k refinement passes.

One refinement pass runs the adapter-equipped model over [Q, Z_prev] and reads
back the post-norm final states at the continuous slots. Training minimizes a
per-element L1 alignment to the per-sample synthetic target plus the answer
NLL of the frozen base model conditioned on the refined sequence; gradients
reach only the adapter factors. The two ablation switches drop the alignment
term and force k=1 respectively.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, MissingArtifact, ShapeMismatch, TrainingDiverged
from .model import AdapterConfig, AdapterSet, TransformerParams, embed, forward_hybrid
from .syngen import ContinuousSequence, loss_ans
from .tasks import ReasoningSample


@dataclass
class RefineConfig:
    m: int = 16
    k: int = 4
    epochs: int = 3
    lr: float = 3e-3
    rank: int = 8
    alpha: float = 32.0
    no_synthetic_align: bool = False
    no_iterative_refine: bool = False
    backprop_window: int | None = None  # None = full unroll through all k passes
    micro_batch: int = 2

    def effective_k(self) -> int:
        return 1 if self.no_iterative_refine else self.k


@dataclass
class LossBreakdown:
    l_align: float
    l_ans_prime: float
    l_refine: float
    total: Tensor  # the differentiable sum actually trained on


def init_draft(params: TransformerParams, m: int) -> ContinuousSequence:
    """m copies of the placeholder token's embedding."""
    if m < 1:
        raise ContractViolation("m must be >= 1")
    rows = embed(params, [params.config.draft_id] * m)
    return ContinuousSequence(rows, role="draft", iteration=0)


def refine_once(params: TransformerParams, adapters: AdapterSet, q_tokens: list[int],
                z_prev: Tensor) -> Tensor:
    """One pass with adapters enabled; the refined sequence is the last
    block's output rows (pre final-norm residual stream) at the continuous
    slots [L_q : L_q + m]. The post-norm states are unusable here: the frozen
    final norm pins their row scale, which the alignment target does not
    share."""
    m = z_prev.shape[0]
    states = forward_hybrid(params, list(q_tokens) + [z_prev], adapters=adapters)
    return states.layers[-1][len(q_tokens):len(q_tokens) + m]


def refine_k(params: TransformerParams, adapters: AdapterSet, q_tokens: list[int],
             cfg: RefineConfig) -> ContinuousSequence:
    """k-fold composition of refine_once starting from the draft."""
    if cfg.k < 1:
        raise ContractViolation("k must be >= 1")
    k = cfg.effective_k()
    z = init_draft(params, cfg.m).tensor
    for i in range(k):
        z = refine_once(params, adapters, q_tokens, z)
        if cfg.backprop_window is not None and (k - 1 - i) >= cfg.backprop_window:
            z = z.detach()
    return ContinuousSequence(z, role="final", iteration=k)


def loss_refine(params: TransformerParams, z_final: Tensor, z_syn,
                q_tokens: list[int], a_tokens: list[int],
                include_align: bool = True) -> LossBreakdown:
    """Alignment (per-element mean |diff|) plus the base-model answer NLL.
    z_syn is a constant target; the answer pass runs without adapters, so its
    gradient reaches the adapters only through z_final."""
    z_syn_arr = z_syn.data if isinstance(z_syn, Tensor) else np.asarray(z_syn)
    l_ans_t = loss_ans(params, q_tokens, z_final, a_tokens)
    if include_align:
        if z_syn_arr.shape != tuple(z_final.shape):
            raise ShapeMismatch(f"z_syn {z_syn_arr.shape} vs z_final {tuple(z_final.shape)}")
        l_align_t = ad.mean_abs(z_final - Tensor(z_syn_arr.astype(z_final.data.dtype)))
        total = l_align_t + l_ans_t
        return LossBreakdown(l_align_t.item(), l_ans_t.item(), total.item(), total)
    return LossBreakdown(0.0, l_ans_t.item(), l_ans_t.item(), l_ans_t)


def mean_alignment(params: TransformerParams, adapters: AdapterSet,
                   samples: list[ReasoningSample], syn_store: dict[str, np.ndarray],
                   cfg: RefineConfig) -> float:
    """Mean per-element |Z_final - Z_syn| over a sample set (no training)."""
    vals = []
    for s in samples:
        z = refine_k(params, adapters, s.q_tokens(), cfg).tensor
        vals.append(float(np.abs(z.data - syn_store[s.id]).mean()))
    return float(np.mean(vals))


def finetune(params: TransformerParams, train_samples: list[ReasoningSample],
             syn_store: dict[str, np.ndarray] | None, cfg: RefineConfig,
             seed: int = 0, log_path=None) -> tuple[AdapterSet, list[dict]]:
    """Train adapter factors only; the base checksum is verified unchanged."""
    if not cfg.no_synthetic_align:
        if syn_store is None:
            raise MissingArtifact("fine-tuning needs the synthetic-thought archive "
                                  "(or the no_synthetic_align switch)")
        for s in train_samples:
            if s.id not in syn_store:
                raise MissingArtifact(f"no synthetic thought for sample {s.id!r}")
    params.set_trainable(False)
    checksum_before = params.checksum()
    adapters = AdapterSet.init(params.config, AdapterConfig(rank=cfg.rank, alpha=cfg.alpha),
                               seed=seed)
    adapters.set_trainable(True)
    opt = ad.OptimizerState(lr=cfg.lr)
    rng = np.random.default_rng(seed)
    order = np.arange(len(train_samples))
    log: list[dict] = []

    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        sums = {"l_align": 0.0, "l_ans_prime": 0.0, "l_refine": 0.0}
        accum: dict[str, np.ndarray] = {}
        n_accum = 0
        for step, idx in enumerate(order):
            sample = train_samples[int(idx)]
            q = sample.q_tokens()
            a = sample.a_tokens() + [params.config.eos_id]  # train the stop too
            z_final = refine_k(params, adapters, q, cfg).tensor
            breakdown = loss_refine(
                params, z_final,
                syn_store[sample.id] if not cfg.no_synthetic_align else None,
                q, a, include_align=not cfg.no_synthetic_align)
            if not np.isfinite(breakdown.l_refine):
                raise TrainingDiverged(f"non-finite refine loss at epoch {epoch}, step {step}")
            sums["l_align"] += breakdown.l_align
            sums["l_ans_prime"] += breakdown.l_ans_prime
            sums["l_refine"] += breakdown.l_refine
            grads = ad.backward(breakdown.total)
            for name, t in adapters.named().items():
                g = grads.get(t)
                if g is None:
                    continue
                if name in accum:
                    accum[name] += g
                else:
                    accum[name] = g.copy()
            n_accum += 1
            if n_accum == cfg.micro_batch or step == len(order) - 1:
                scaled = {k: v / n_accum for k, v in accum.items()}
                ad.adam_update(opt, adapters.named(), scaled)
                accum.clear()
                n_accum = 0
        n = len(order)
        log.append({"epoch": epoch,
                    "l_align": sums["l_align"] / n,
                    "l_ans_prime": sums["l_ans_prime"] / n,
                    "l_refine": sums["l_refine"] / n})

    adapters.set_trainable(False)
    if params.checksum() != checksum_before:
        raise ContractViolation("base parameters changed during fine-tuning")
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            json.dump(log, fh, indent=2)
    return adapters, log
