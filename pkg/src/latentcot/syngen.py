"""Per-sample synthetic continuous-thought optimization.

For one sample: start from a random length-m continuous sequence, freeze the
base model, and run Adam on the sequence against two objectives — the
teacher-forced answer NLL of [Q, Z, eot, A], and the per-layer L1 distance
between the eot hidden states of [Q, Z, eot] and of the discrete-trace pass
[Q, sep, DCoT, eot]. The discrete-pass states are constants; gradients flow
only into Z.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_archive
from .errors import ContractViolation, TrainingDiverged
from .model import TransformerParams, forward_hybrid
from .tasks import ReasoningSample


@dataclass
class SyngenConfig:
    m: int = 16
    steps: int = 32
    lr: float = 1e-3
    lambda_dcot: float = 1.0


@dataclass
class ContinuousSequence:
    tensor: Tensor  # (m, d_model)
    role: str = "synthetic"  # synthetic | draft | final
    iteration: int = 0

    @property
    def m(self) -> int:
        return self.tensor.shape[0]


@dataclass
class SyntheticCCoTRecord:
    sample_id: str
    z_syn: np.ndarray
    trace: list[tuple[int, float, float]]  # (step, l_ans, l_dcot) before each update
    final_l_ans: float
    final_l_dcot: float
    settings: dict


def sample_rng(base_seed: int, sample_id: str) -> np.random.Generator:
    """Every sample starts from the same seeded random draft: the optimization
    drift is then the only per-sample content, which is what the refinement
    model has to learn to reproduce."""
    return np.random.default_rng([base_seed & 0xFFFFFFFF, 0x5EED])


def init_synthetic(rng: np.random.Generator, m: int, embed_table: np.ndarray,
                   dtype=np.float32) -> ContinuousSequence:
    """Gaussian init matched to the trained embedding table's per-dimension std."""
    if m < 1:
        raise ContractViolation("m must be >= 1")
    std = embed_table.std(axis=0)
    z = rng.normal(0.0, 1.0, size=(m, embed_table.shape[1])) * std[None, :]
    return ContinuousSequence(Tensor(z.astype(dtype), requires_grad=True), role="synthetic")


def loss_ans(params: TransformerParams, q_tokens: list[int], z: Tensor,
             a_tokens: list[int]) -> Tensor:
    """Mean answer-token NLL of [Q, Z, eot, A], teacher forced, base model only."""
    if not a_tokens:
        raise ContractViolation("loss_ans needs a nonempty answer")
    cfg = params.config
    states = forward_hybrid(params, list(q_tokens) + [z, cfg.eot_id] + list(a_tokens))
    start = len(q_tokens) + z.shape[0]  # eot position predicts A_1
    logits = states.logits[start:start + len(a_tokens)]
    return ad.cross_entropy(logits, np.asarray(a_tokens, dtype=np.int64))


def dcot_eot_states(params: TransformerParams, q_tokens: list[int],
                    dcot_tokens: list[int]) -> list[np.ndarray]:
    """Per-layer eot hidden states of the discrete pass [Q, sep, DCoT, eot],
    returned as plain arrays (constants for alignment)."""
    cfg = params.config
    items = list(q_tokens) + [cfg.sep_id] + list(dcot_tokens) + [cfg.eot_id]
    states = forward_hybrid(params, items)
    pos = len(items) - 1
    return [layer.data[pos].copy() for layer in states.layers]


def _align_to_states(params: TransformerParams, q_tokens: list[int], z: Tensor,
                     target_states: list[np.ndarray]) -> Tensor:
    cfg = params.config
    states = forward_hybrid(params, list(q_tokens) + [z, cfg.eot_id])
    pos = len(q_tokens) + z.shape[0]
    per_layer = []
    for layer, target in zip(states.layers, target_states):
        per_layer.append(ad.tsum(ad.absolute(layer[pos] - Tensor(target))))
    total = per_layer[0]
    for term in per_layer[1:]:
        total = total + term
    return total / len(per_layer)


def loss_dcot(params: TransformerParams, q_tokens: list[int], z: Tensor,
              dcot_tokens: list[int]) -> Tensor:
    """Layer-mean L1 between the eot states of the continuous pass and the
    discrete pass. Raw per-vector L1 (sum over coordinates), no per-coordinate
    normalization; the discrete pass receives no gradient."""
    return _align_to_states(params, q_tokens, z, dcot_eot_states(params, q_tokens, dcot_tokens))


def optimize_synthetic(params: TransformerParams, sample: ReasoningSample,
                       cfg: SyngenConfig, seed: int = 0) -> SyntheticCCoTRecord:
    """Adam on Z only; the base model stays frozen (asserted by the caller via
    checksum; no parameter is marked trainable here)."""
    if cfg.steps < 1:
        raise ContractViolation("steps must be >= 1")
    q = sample.q_tokens()
    # score the terminator too: greedy decoding must stop after the answer
    a = sample.a_tokens() + [params.config.eos_id]
    rng = sample_rng(seed, sample.id)
    z_seq = init_synthetic(rng, cfg.m, params["embed"].data)
    z = z_seq.tensor
    targets = dcot_eot_states(params, q, sample.dcot_tokens())
    opt = ad.OptimizerState(lr=cfg.lr)
    trace: list[tuple[int, float, float]] = []

    def losses() -> tuple[Tensor, Tensor, Tensor]:
        l_ans = loss_ans(params, q, z, a)
        l_dcot = _align_to_states(params, q, z, targets)
        return l_ans, l_dcot, l_ans + l_dcot * cfg.lambda_dcot

    for step in range(cfg.steps):
        l_ans, l_dcot, total = losses()
        va, vd = l_ans.item(), l_dcot.item()
        if not (np.isfinite(va) and np.isfinite(vd)):
            raise TrainingDiverged(f"non-finite synthetic-thought loss at step {step} for {sample.id}")
        trace.append((step, va, vd))
        grads = ad.backward(total)
        ad.adam_update(opt, {"z": z}, {"z": grads[z]})

    final_ans, final_dcot, _ = losses()
    return SyntheticCCoTRecord(
        sample_id=sample.id,
        z_syn=z.data.copy(),
        trace=trace,
        final_l_ans=final_ans.item(),
        final_l_dcot=final_dcot.item(),
        settings=asdict(cfg),
    )


def syngen_corpus(params: TransformerParams, samples: list[ReasoningSample],
                  cfg: SyngenConfig, seed: int = 0,
                  archive_path=None, trace_path=None) -> dict[str, SyntheticCCoTRecord]:
    """Optimize every sample independently; optionally persist the sidecar
    archive (tensors keyed by sample id) and the per-sample loss traces."""
    records = {}
    for sample in samples:
        records[sample.id] = optimize_synthetic(params, sample, cfg, seed=seed)
    if archive_path is not None:
        save_archive(archive_path, {sid: rec.z_syn for sid, rec in records.items()})
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8") as fh:
            json.dump({
                sid: {
                    "trace": rec.trace,
                    "final_l_ans": rec.final_l_ans,
                    "final_l_dcot": rec.final_l_dcot,
                    "settings": rec.settings,
                } for sid, rec in records.items()
            }, fh, sort_keys=True, indent=2)
    return records
