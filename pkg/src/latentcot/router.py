"""Adaptive inference: refine the draft, score difficulty, then either answer
directly from the continuous thought (easy) or discard it and regenerate an
explicit step-by-step trace (hard).

Accounting: the continuous slots are fixed-compute latent positions, not
generated tokens, so the easy path's generation length counts answer tokens
only; the hard path counts cot + eot + answer. A terminating eos is never
counted. The refined sequence is computed exactly once per solve — it feeds
the difficulty scorer even when the hard path discards it for answering.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .autodiff import Tensor
from .difficulty import DifficultyClassifier, classifier_forward, eot_state
from .errors import ContractViolation
from .model import AdapterSet, TransformerParams, decode_greedy
from .refine import RefineConfig, refine_k
from .tasks import ReasoningSample, detokenize


@dataclass
class RoutingDecision:
    sample_id: str
    score: float
    tau: float
    path: str  # "easy" | "hard"; hard iff score >= tau


@dataclass
class SolveRecord:
    sample_id: str
    score: float
    tau: float
    path: str
    answer: str
    gold: str
    correct: bool
    gen_len: int
    refine_iterations: int
    truncated: bool

    def to_json_line(self) -> str:
        obj = asdict(self)
        obj["id"] = obj.pop("sample_id")
        return json.dumps(obj, sort_keys=True)


def decide(score: float, tau: float) -> str:
    if not 0.0 <= tau <= 1.0:
        raise ContractViolation(f"tau must be in [0, 1], got {tau}")
    return "hard" if score >= tau else "easy"


def route(params: TransformerParams, adapters: AdapterSet, clf: DifficultyClassifier,
          sample: ReasoningSample, tau: float, refine_cfg: RefineConfig) -> RoutingDecision:
    decision, _ = _route_with_state(params, adapters, clf, sample, tau, refine_cfg)
    return decision


def _route_with_state(params, adapters, clf, sample, tau, refine_cfg):
    z_final = refine_k(params, adapters, sample.q_tokens(), refine_cfg).tensor
    score = classifier_forward(clf, eot_state(params, sample.q_tokens(), z_final)).value
    return RoutingDecision(sample.id, score, tau, decide(score, tau)), z_final


def _split_generated(generated: list[int], eot_id: int, eos_id: int):
    """(cot, answer, truncated): split at the first eot; truncated when the
    model never emitted eot."""
    body = generated[:-1] if generated and generated[-1] == eos_id else list(generated)
    if eot_id in body:
        at = body.index(eot_id)
        return body[:at], body[at + 1:], False
    return body, [], True


def answer_easy(params: TransformerParams, q_tokens: list[int], z_final: Tensor,
                max_new: int) -> tuple[list[int], bool]:
    """Greedy answer from [Q, Z_final, eot] under the base model. Returns
    (answer tokens, truncated = no eos within max_new)."""
    cfg = params.config
    generated = decode_greedy(params, list(q_tokens) + [z_final, cfg.eot_id], max_new)
    if generated and generated[-1] == cfg.eos_id:
        return generated[:-1], False
    return generated, True


def answer_hard(params: TransformerParams, q_tokens: list[int],
                max_new: int) -> tuple[list[int], list[int], bool]:
    """Greedy re-think from [Q, sep]: the model emits its step trace, eot,
    then the answer. Returns (cot tokens, answer tokens, truncated)."""
    cfg = params.config
    generated = decode_greedy(params, list(q_tokens) + [cfg.sep_id], max_new)
    return _split_generated(generated, cfg.eot_id, cfg.eos_id)


def solve(params: TransformerParams, adapters: AdapterSet, clf: DifficultyClassifier,
          sample: ReasoningSample, tau: float, refine_cfg: RefineConfig,
          max_new: int = 160) -> SolveRecord:
    decision, z_final = _route_with_state(params, adapters, clf, sample, tau, refine_cfg)
    if decision.path == "easy":
        answer_tokens, truncated = answer_easy(params, sample.q_tokens(), z_final, max_new)
        gen_len = len(answer_tokens)
    else:
        cot, answer_tokens, truncated = answer_hard(params, sample.q_tokens(), max_new)
        gen_len = len(cot) + len(answer_tokens) + (0 if truncated else 1)
    answer = detokenize(answer_tokens, strict=False).strip()
    gold = sample.answer.strip()
    return SolveRecord(
        sample_id=sample.id,
        score=decision.score,
        tau=tau,
        path=decision.path,
        answer=answer,
        gold=gold,
        correct=answer == gold,
        gen_len=gen_len,
        refine_iterations=refine_cfg.effective_k(),
        truncated=truncated,
    )


def raw_solve(params: TransformerParams, sample: ReasoningSample,
              max_new: int = 160) -> SolveRecord:
    """The raw-model discrete-trace path: used for the baseline anchors."""
    cot, answer_tokens, truncated = answer_hard(params, sample.q_tokens(), max_new)
    answer = detokenize(answer_tokens, strict=False).strip()
    gold = sample.answer.strip()
    return SolveRecord(
        sample_id=sample.id, score=1.0, tau=0.0, path="hard",
        answer=answer, gold=gold, correct=answer == gold,
        gen_len=len(cot) + len(answer_tokens) + (0 if truncated else 1),
        refine_iterations=0, truncated=truncated,
    )


def write_records(path, records: list[SolveRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json_line() + "\n")
