"""Metrics and machine-readable reports.

Accuracy is exact match after detokenization and whitespace trim; relative
gain is (acc/acc_raw)/(len/len_raw) against the raw discrete-trace anchors;
hard-question identification is macro precision/recall/F1 over the two
classes (empty-class precision/recall are 0 by convention).

A tau sweep evaluates each sample once (score per method, both answer paths,
both deterministic) and derives every row from that cache; rows are asserted
in tests to match per-tau solve() runs exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .difficulty import (DifficultyClassifier, baseline_seq_ppl, classifier_forward,
                         eot_state, question_state, rescale_to_unit)
from .errors import ContractViolation
from .model import AdapterSet, TransformerParams
from .refine import RefineConfig, refine_k
from .router import SolveRecord, answer_easy, answer_hard, decide, raw_solve
from .tasks import ReasoningSample, detokenize


def accuracy(records: list[SolveRecord]) -> float:
    if not records:
        raise ContractViolation("accuracy needs at least one record")
    return sum(1 for r in records if r.answer.strip() == r.gold.strip()) / len(records)


def mean_gen_len(records: list[SolveRecord]) -> float:
    if not records:
        raise ContractViolation("mean_gen_len needs at least one record")
    return float(np.mean([r.gen_len for r in records]))


def rel_g(acc: float, gen_len: float, acc_raw: float, len_raw: float) -> float:
    """(acc/acc_raw) / (len/len_raw); > 1 beats the raw trade-off."""
    for name, v in (("acc", acc), ("len", gen_len), ("acc_raw", acc_raw), ("len_raw", len_raw)):
        if v <= 0:
            raise ContractViolation(f"rel_g needs positive inputs, got {name}={v}")
    return (acc / acc_raw) / (gen_len / len_raw)


def macro_prf(predicted_hard: list[bool], gold_hard: list[bool]) -> tuple[float, float, float]:
    """Unweighted mean of per-class precision/recall/F1 over {hard, easy}."""
    if not predicted_hard or len(predicted_hard) != len(gold_hard):
        raise ContractViolation("macro_prf needs matching nonempty label lists")
    pres, recs, f1s = [], [], []
    for cls in (True, False):
        tp = sum(1 for p, g in zip(predicted_hard, gold_hard) if p == cls and g == cls)
        fp = sum(1 for p, g in zip(predicted_hard, gold_hard) if p == cls and g != cls)
        fn = sum(1 for p, g in zip(predicted_hard, gold_hard) if p != cls and g == cls)
        pre = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * pre * rec / (pre + rec) if pre + rec else 0.0
        pres.append(pre)
        recs.append(rec)
        f1s.append(f1)
    return float(np.mean(pres)), float(np.mean(recs)), float(np.mean(f1s))


# pipeline evaluation ---------------------------------------------------------


@dataclass
class PipelineBundle:
    params: TransformerParams
    adapters: AdapterSet
    classifier: DifficultyClassifier
    refine_cfg: RefineConfig
    probe: DifficultyClassifier | None = None
    max_new: int = 160
    hard_threshold: int = 5


@dataclass
class SampleEval:
    """Everything decided once per sample during evaluation."""
    sample: ReasoningSample
    scores: dict[str, float]
    easy_answer: str
    easy_len: int
    easy_truncated: bool
    hard_answer: str
    hard_len: int
    hard_truncated: bool


def evaluate_samples(bundle: PipelineBundle, samples: list[ReasoningSample],
                     methods: tuple[str, ...] = ("synadapt",)) -> list[SampleEval]:
    """Per-sample cache: difficulty score(s) plus both deterministic paths."""
    raw_ppls = None
    if "seq_ppl" in methods:
        raw_ppls = [baseline_seq_ppl(bundle.params, s.q_tokens()) for s in samples]
        ppl_scores = rescale_to_unit(raw_ppls)
    evals = []
    for i, sample in enumerate(samples):
        q = sample.q_tokens()
        z_final = refine_k(bundle.params, bundle.adapters, q, bundle.refine_cfg).tensor
        scores: dict[str, float] = {}
        if "synadapt" in methods:
            scores["synadapt"] = classifier_forward(
                bundle.classifier, eot_state(bundle.params, q, z_final)).value
        if "probe_q" in methods:
            if bundle.probe is None:
                raise ContractViolation("probe_q scoring needs a trained probe in the bundle")
            scores["probe_q"] = classifier_forward(
                bundle.probe, question_state(bundle.params, q)).value
        if "seq_ppl" in methods:
            scores["seq_ppl"] = float(ppl_scores[i])
        easy_tokens, easy_trunc = answer_easy(bundle.params, q, z_final, bundle.max_new)
        cot, hard_tokens, hard_trunc = answer_hard(bundle.params, q, bundle.max_new)
        evals.append(SampleEval(
            sample=sample,
            scores=scores,
            easy_answer=detokenize(easy_tokens, strict=False).strip(),
            easy_len=len(easy_tokens),
            easy_truncated=easy_trunc,
            hard_answer=detokenize(hard_tokens, strict=False).strip(),
            hard_len=len(cot) + len(hard_tokens) + (0 if hard_trunc else 1),
            hard_truncated=hard_trunc,
        ))
    return evals


def records_at_tau(evals: list[SampleEval], tau: float, method: str,
                   refine_iterations: int) -> list[SolveRecord]:
    records = []
    for ev in evals:
        score = ev.scores[method]
        path = decide(score, tau)
        if path == "easy":
            answer, gen_len, truncated = ev.easy_answer, ev.easy_len, ev.easy_truncated
        else:
            answer, gen_len, truncated = ev.hard_answer, ev.hard_len, ev.hard_truncated
        gold = ev.sample.answer.strip()
        records.append(SolveRecord(
            sample_id=ev.sample.id, score=score, tau=tau, path=path,
            answer=answer, gold=gold, correct=answer == gold,
            gen_len=gen_len, refine_iterations=refine_iterations, truncated=truncated))
    return records


@dataclass
class EvalReport:
    acc: float
    len: float
    rel_g: float
    acc_raw: float
    len_raw: float
    tau: float
    method: str
    n_samples: int
    hard_ratio: float
    macro_pre: float | None = None
    macro_rec: float | None = None
    macro_f1: float | None = None
    records: list[dict] = field(default_factory=list)
    config_fingerprint: str = ""
    tool_version: str = __version__


def compute_raw_anchor(params: TransformerParams, samples: list[ReasoningSample],
                       max_new: int = 160) -> tuple[float, float, list[SolveRecord]]:
    """Raw-model discrete-trace evaluation: the rel_g anchors."""
    records = [raw_solve(params, s, max_new) for s in samples]
    return accuracy(records), mean_gen_len(records), records


def build_report(evals: list[SampleEval], tau: float, method: str, acc_raw: float,
                 len_raw: float, refine_iterations: int, hard_threshold: int,
                 config_fingerprint: str = "") -> EvalReport:
    records = records_at_tau(evals, tau, method, refine_iterations)
    acc = accuracy(records)
    length = mean_gen_len(records)
    gold_hard = [ev.sample.difficulty >= hard_threshold for ev in evals]
    pred_hard = [r.path == "hard" for r in records]
    pre, rec, f1 = macro_prf(pred_hard, gold_hard)
    return EvalReport(
        acc=acc, len=length,
        rel_g=rel_g(acc, length, acc_raw, len_raw) if acc > 0 else 0.0,
        acc_raw=acc_raw, len_raw=len_raw, tau=tau, method=method,
        n_samples=len(records),
        hard_ratio=sum(pred_hard) / len(pred_hard),
        macro_pre=pre, macro_rec=rec, macro_f1=f1,
        records=[json.loads(r.to_json_line()) for r in records],
        config_fingerprint=config_fingerprint,
    )


def sweep_tau(bundle: PipelineBundle, samples: list[ReasoningSample], taus: list[float],
              method: str = "synadapt", anchors: tuple[float, float] | None = None,
              evals: list[SampleEval] | None = None,
              config_fingerprint: str = "") -> tuple[list[dict], str]:
    """One row per tau (input order): acc, len, rel_g, hard_ratio. Returns the
    rows plus the CSV text (columns: tau, acc, len, rel_g, hard_ratio)."""
    if not taus:
        raise ContractViolation("sweep_tau needs at least one tau")
    for t in taus:
        if not 0.0 <= t <= 1.0:
            raise ContractViolation(f"tau {t} outside [0, 1]")
    if evals is None:
        evals = evaluate_samples(bundle, samples, methods=(method,))
    if anchors is None:
        acc_raw, len_raw, _ = compute_raw_anchor(bundle.params, samples, bundle.max_new)
    else:
        acc_raw, len_raw = anchors
    rows = []
    for tau in taus:
        records = records_at_tau(evals, tau, method, bundle.refine_cfg.effective_k())
        acc = accuracy(records)
        length = mean_gen_len(records)
        rows.append({
            "tau": tau, "acc": acc, "len": length,
            "rel_g": rel_g(acc, length, acc_raw, len_raw) if acc > 0 else 0.0,
            "hard_ratio": sum(1 for r in records if r.path == "hard") / len(records),
        })
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["tau", "acc", "len", "rel_g", "hard_ratio"])
    for row in rows:
        writer.writerow([f"{row['tau']:.6f}", f"{row['acc']:.6f}", f"{row['len']:.6f}",
                         f"{row['rel_g']:.6f}", f"{row['hard_ratio']:.6f}"])
    return rows, buf.getvalue()


def config_fingerprint(config_obj) -> str:
    blob = json.dumps(config_obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def emit_report(report: EvalReport, path, curves: str | None = None) -> None:
    """JSON document with every report field; optional CSV sidecar for curves."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(report), fh, sort_keys=True, indent=2)
    if curves is not None:
        with open(f"{path}.curves.csv", "w", encoding="utf-8") as fh:
            fh.write(curves)
