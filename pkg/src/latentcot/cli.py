"""Command-line pipeline: gen-data, pretrain, syngen, finetune,
train-classifier, evaluate, sweep, solve.

Stages communicate through a run directory (corpus/, checkpoints/, syn_ccot/,
states/, reports/). Every artifact-producing stage writes a manifest with the
resolved config hash, the seed, the tool version, and sha256 checksums of its
outputs, so a rerun with the same seed can be diffed file by file.

Config precedence: CLI flags > config file (JSON, strict keys) > defaults.
Exit codes: 0 success, 1 domain error (message names the failing contract),
2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__, evalkit, router, tasks
from .checkpoint import load_archive, save_archive
from .difficulty import (ClassifierConfig, DifficultyClassifier, baseline_probe_q,
                         cache_ccot_states, cache_question_states, train_classifier)
from .errors import DomainError, InfeasibleConfig, MissingArtifact
from .evalkit import PipelineBundle, build_report, compute_raw_anchor, emit_report, sweep_tau
from .model import (AdapterConfig, AdapterSet, ModelConfig, PretrainSchedule,
                    TransformerParams, load_checkpoint, pretrain_raw, save_checkpoint)
from .refine import RefineConfig, finetune
from .syngen import SyngenConfig, syngen_corpus
from .tasks import CorpusConfig, derive_seed, gen_corpus, load_jsonl, save_jsonl

RUN_DIR_ENV = "LATENTCOT_RUN_DIR"


@dataclass
class RouterSection:
    tau: float = 0.5
    max_new: int = 160
    method: str = "synadapt"
    taus: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class SyngenSection(SyngenConfig):
    train_items: int = 1400  # leading slice of the train split to optimize
    val_items: int = 50  # held-out items that also get synthetic targets


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pretrain: PretrainSchedule = field(default_factory=PretrainSchedule)
    syngen: SyngenSection = field(default_factory=SyngenSection)
    refine: RefineConfig = field(default_factory=RefineConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    router: RouterSection = field(default_factory=RouterSection)

    def fingerprint(self) -> str:
        return evalkit.config_fingerprint(asdict(self))


_SECTIONS = ("model", "corpus", "pretrain", "syngen", "refine", "classifier", "router")


def resolve_config(file_path: str | None, overrides: dict | None = None) -> RunConfig:
    """defaults <- env run-dir <- file <- overrides; unknown keys are errors."""
    cfg = RunConfig()
    env_run_dir = os.environ.get(RUN_DIR_ENV)
    if env_run_dir:
        cfg.run_dir = env_run_dir
    if file_path:
        with open(file_path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InfeasibleConfig(f"malformed config file {file_path}: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise InfeasibleConfig("config file must hold a JSON object")
        for key, value in doc.items():
            if key in ("seed", "run_dir"):
                setattr(cfg, key, value)
            elif key in _SECTIONS:
                section = getattr(cfg, key)
                names = {f.name for f in dataclasses.fields(section)}
                for k, v in value.items():
                    if k not in names:
                        raise InfeasibleConfig(f"unknown config key {key}.{k!r}")
                    if isinstance(getattr(section, k), tuple):
                        v = tuple(v)
                    setattr(section, k, v)
                if key == "model":
                    section.__post_init__()
            else:
                raise InfeasibleConfig(f"unknown config key {key!r}")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        head, _, tail = dotted.partition(".")
        if tail:
            setattr(getattr(cfg, head), tail, value)
        else:
            setattr(cfg, head, value)
    return cfg


# run-dir helpers -------------------------------------------------------------


def _paths(cfg: RunConfig) -> dict[str, Path]:
    root = Path(cfg.run_dir)
    return {
        "root": root,
        "config": root / "config.json",
        "corpus": root / "corpus",
        "checkpoints": root / "checkpoints",
        "syn_ccot": root / "syn_ccot",
        "states": root / "states",
        "reports": root / "reports",
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_stage_outputs(cfg: RunConfig, stage: str, outputs: list[Path]) -> None:
    paths = _paths(cfg)
    paths["root"].mkdir(parents=True, exist_ok=True)
    with open(paths["config"], "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, sort_keys=True, indent=2)
    manifest = {
        "stage": stage,
        "seed": cfg.seed,
        "tool_version": __version__,
        "config_hash": cfg.fingerprint(),
        "outputs": {str(p.relative_to(paths["root"])): _sha256(p) for p in outputs},
    }
    with open(paths["root"] / f"{stage}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)


def _load_corpus(cfg: RunConfig) -> tasks.CorpusSplits:
    paths = _paths(cfg)
    files = {s: paths["corpus"] / f"{s}.jsonl" for s in ("train", "val", "test")}
    for split, p in files.items():
        if not p.exists():
            raise MissingArtifact(f"corpus split {split} not found at {p}; run gen-data first")
    return tasks.CorpusSplits(
        train=load_jsonl(files["train"]), val=load_jsonl(files["val"]),
        test=load_jsonl(files["test"]), seed=cfg.seed, depths=tuple(cfg.corpus.depths))


def _load_base(cfg: RunConfig) -> TransformerParams:
    path = _paths(cfg)["checkpoints"] / "base.ckpt"
    if not path.exists():
        raise MissingArtifact(f"base checkpoint not found at {path}; run pretrain first")
    params, _ = load_checkpoint(path)
    return params


def _load_adapters(cfg: RunConfig) -> tuple[TransformerParams, AdapterSet]:
    path = _paths(cfg)["checkpoints"] / "adapter.ckpt"
    if not path.exists():
        raise MissingArtifact(f"adapter checkpoint not found at {path}; run finetune first")
    params, adapters = load_checkpoint(path)
    if adapters is None:
        raise MissingArtifact(f"{path} holds no adapter tensors")
    return params, adapters


def _syngen_samples(cfg: RunConfig, corpus: tasks.CorpusSplits) -> list[tasks.ReasoningSample]:
    return (corpus.train[:cfg.syngen.train_items]
            + corpus.val[:cfg.syngen.val_items])


def _load_classifier(cfg: RunConfig, name: str, method: str) -> DifficultyClassifier:
    path = _paths(cfg)["checkpoints"] / f"{name}.ckpt"
    if not path.exists():
        raise MissingArtifact(f"classifier checkpoint not found at {path}; run train-classifier first")
    from .autodiff import Tensor
    tensors = {k: Tensor(v) for k, v in load_archive(path).items()}
    return DifficultyClassifier(tensors, method)


# subcommands ------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    corpus_cfg = dataclasses.replace(cfg.corpus, seed=cfg.seed)
    splits = gen_corpus(corpus_cfg)
    paths = _paths(cfg)
    paths["corpus"].mkdir(parents=True, exist_ok=True)
    outputs = []
    for split in ("train", "val", "test"):
        p = paths["corpus"] / f"{split}.jsonl"
        save_jsonl(p, getattr(splits, split))
        outputs.append(p)
    _write_stage_outputs(cfg, "gen-data", outputs)
    print(f"gen-data: wrote {len(splits.train)}/{len(splits.val)}/{len(splits.test)} samples")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    schedule = dataclasses.replace(cfg.pretrain, seed=derive_seed(cfg.seed, "pretrain"))
    params, log = pretrain_raw(cfg.model, corpus, schedule)
    paths = _paths(cfg)
    paths["checkpoints"].mkdir(parents=True, exist_ok=True)
    ckpt = paths["checkpoints"] / "base.ckpt"
    save_checkpoint(ckpt, params)
    log_path = paths["checkpoints"] / "pretrain_log.json"
    with open(log_path, "w", encoding="utf-8") as fh:
        json.dump(log, fh, sort_keys=True, indent=2)
    _write_stage_outputs(cfg, "pretrain", [ckpt, Path(f"{ckpt}.json"), log_path])
    print(f"pretrain: heldout loss {log['heldout_loss']:.4f}")
    return 0


def cmd_syngen(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    params = _load_base(cfg)
    samples = _syngen_samples(cfg, corpus)
    paths = _paths(cfg)
    paths["syn_ccot"].mkdir(parents=True, exist_ok=True)
    archive = paths["syn_ccot"] / "zsyn.ckpt"
    trace = paths["syn_ccot"] / "traces.json"
    records = syngen_corpus(params, samples,
                            SyngenConfig(m=cfg.syngen.m, steps=cfg.syngen.steps,
                                         lr=cfg.syngen.lr, lambda_dcot=cfg.syngen.lambda_dcot),
                            seed=derive_seed(cfg.seed, "syngen"),
                            archive_path=archive, trace_path=trace)
    improved = sum(1 for r in records.values() if r.final_l_ans < r.trace[0][1])
    _write_stage_outputs(cfg, "syngen", [archive, trace])
    print(f"syngen: {len(records)} sequences, answer loss improved on {improved}")
    return 0


def cmd_finetune(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    params = _load_base(cfg)
    syn_store = None
    if not cfg.refine.no_synthetic_align:
        archive = _paths(cfg)["syn_ccot"] / "zsyn.ckpt"
        if not archive.exists():
            raise MissingArtifact(
                f"synthetic-thought archive not found at {archive}; run syngen first "
                "or pass --no-synthetic-align")
        syn_store = load_archive(archive)
    train_items = corpus.train[:cfg.syngen.train_items]
    paths = _paths(cfg)
    paths["checkpoints"].mkdir(parents=True, exist_ok=True)
    log_path = paths["checkpoints"] / "refine_log.json"
    adapters, _ = finetune(params, train_items, syn_store, cfg.refine,
                           seed=derive_seed(cfg.seed, "refine"), log_path=log_path)
    ckpt = paths["checkpoints"] / "adapter.ckpt"
    save_checkpoint(ckpt, params, adapters)
    _write_stage_outputs(cfg, "finetune", [ckpt, Path(f"{ckpt}.json"), log_path])
    print("finetune: adapter checkpoint written")
    return 0


def cmd_train_classifier(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    params, adapters = _load_adapters(cfg)
    paths = _paths(cfg)
    paths["states"].mkdir(parents=True, exist_ok=True)
    paths["checkpoints"].mkdir(parents=True, exist_ok=True)
    clf_cfg = dataclasses.replace(cfg.classifier, hard_threshold=cfg.corpus.hard_threshold)

    ccot_states = cache_ccot_states(params, adapters, corpus.train, cfg.refine)
    q_states = cache_question_states(params, corpus.train)
    ccot_path = paths["states"] / "ccot_train.ckpt"
    q_path = paths["states"] / "question_train.ckpt"
    save_archive(ccot_path, ccot_states)
    save_archive(q_path, q_states)

    clf, log = train_classifier(params, adapters, corpus.train, cfg.refine, clf_cfg,
                                seed=derive_seed(cfg.seed, "classifier"), states=ccot_states)
    probe, plog = baseline_probe_q(params, corpus.train, clf_cfg,
                                   seed=derive_seed(cfg.seed, "probe"), states=q_states)
    clf_path = paths["checkpoints"] / "classifier.ckpt"
    probe_path = paths["checkpoints"] / "probe.ckpt"
    save_archive(clf_path, {k: t.data for k, t in clf.tensors.items()})
    save_archive(probe_path, {k: t.data for k, t in probe.tensors.items()})
    _write_stage_outputs(cfg, "train-classifier", [ccot_path, q_path, clf_path, probe_path])
    print(f"train-classifier: {log['pairs']} pairs, final loss {log['final_loss']:.4f} "
          f"(probe {plog['final_loss']:.4f})")
    return 0


def _bundle(cfg: RunConfig) -> tuple[PipelineBundle, tasks.CorpusSplits]:
    corpus = _load_corpus(cfg)
    params, adapters = _load_adapters(cfg)
    clf = _load_classifier(cfg, "classifier", "synadapt")
    probe_path = _paths(cfg)["checkpoints"] / "probe.ckpt"
    probe = _load_classifier(cfg, "probe", "probe_q") if probe_path.exists() else None
    return PipelineBundle(params=params, adapters=adapters, classifier=clf,
                          refine_cfg=cfg.refine, probe=probe, max_new=cfg.router.max_new,
                          hard_threshold=cfg.corpus.hard_threshold), corpus


def cmd_evaluate(cfg: RunConfig) -> int:
    bundle, corpus = _bundle(cfg)
    method = cfg.router.method
    evals = evalkit.evaluate_samples(bundle, corpus.test, methods=(method,))
    acc_raw, len_raw, _ = compute_raw_anchor(bundle.params, corpus.test, bundle.max_new)
    report = build_report(evals, cfg.router.tau, method, acc_raw, len_raw,
                          bundle.refine_cfg.effective_k(), bundle.hard_threshold,
                          config_fingerprint=cfg.fingerprint())
    paths = _paths(cfg)
    paths["reports"].mkdir(parents=True, exist_ok=True)
    tag = f"tau{cfg.router.tau:g}_{method}"
    report_path = paths["reports"] / f"eval_{tag}.json"
    emit_report(report, report_path)
    records_path = paths["reports"] / f"records_{tag}.jsonl"
    records = evalkit.records_at_tau(evals, cfg.router.tau, method,
                                     bundle.refine_cfg.effective_k())
    router.write_records(records_path, records)
    _write_stage_outputs(cfg, "evaluate", [report_path, records_path])
    print(f"evaluate: acc {report.acc:.3f} len {report.len:.1f} rel_g {report.rel_g:.2f} "
          f"hard_ratio {report.hard_ratio:.2f}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    bundle, corpus = _bundle(cfg)
    method = cfg.router.method
    evals = evalkit.evaluate_samples(bundle, corpus.test, methods=(method,))
    acc_raw, len_raw, _ = compute_raw_anchor(bundle.params, corpus.test, bundle.max_new)
    rows, csv_text = sweep_tau(bundle, corpus.test, list(cfg.router.taus), method,
                               anchors=(acc_raw, len_raw), evals=evals,
                               config_fingerprint=cfg.fingerprint())
    paths = _paths(cfg)
    paths["reports"].mkdir(parents=True, exist_ok=True)
    csv_path = paths["reports"] / f"sweep_{method}.csv"
    csv_path.write_text(csv_text, encoding="utf-8")
    json_path = paths["reports"] / f"sweep_{method}.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({"rows": rows, "acc_raw": acc_raw, "len_raw": len_raw,
                   "config_hash": cfg.fingerprint(), "tool_version": __version__},
                  fh, sort_keys=True, indent=2)
    _write_stage_outputs(cfg, "sweep", [csv_path, json_path])
    for row in rows:
        print(f"tau {row['tau']:.2f}: acc {row['acc']:.3f} len {row['len']:.1f} "
              f"rel_g {row['rel_g']:.2f} hard_ratio {row['hard_ratio']:.2f}")
    return 0


def cmd_solve(cfg: RunConfig, question: str, gold: str | None) -> int:
    bundle, _ = _bundle(cfg)
    sample = tasks.ReasoningSample(id="adhoc", question=question, dcot="",
                                   answer=gold or "", difficulty=0)
    record = router.solve(bundle.params, bundle.adapters, bundle.classifier, sample,
                          cfg.router.tau, bundle.refine_cfg, bundle.max_new)
    print(record.to_json_line())
    return 0


# argument parsing --------------------------------------------------------------


def _tau_type(text: str) -> float:
    try:
        v = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"tau must be a number, got {text!r}") from exc
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"tau must be in [0, 1], got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentcot",
        description="Continuous-thought training and adaptive routing pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="global seed (fans out per stage)")
        p.add_argument("--run-dir", help=f"run directory (env {RUN_DIR_ENV})")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p)

    p = sub.add_parser("pretrain", help="train the raw discrete-trace model")
    common(p)
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--lr", type=float, help="peak learning rate")

    p = sub.add_parser("syngen", help="optimize per-sample synthetic thoughts")
    common(p)
    p.add_argument("--m", type=int, help="continuous-thought length")
    p.add_argument("--steps", type=int, help="optimization steps per sample")
    p.add_argument("--lr", type=float, help="learning rate")

    p = sub.add_parser("finetune", help="train the refinement adapters")
    common(p)
    p.add_argument("--m", type=int, help="continuous-thought length")
    p.add_argument("--k", type=int, help="refinement iterations")
    p.add_argument("--lr", type=float, help="adapter learning rate")
    p.add_argument("--no-synthetic-align", action="store_true", default=None,
                   help="ablation: drop the alignment term")
    p.add_argument("--no-iterative-refine", action="store_true", default=None,
                   help="ablation: force k=1")

    p = sub.add_parser("train-classifier", help="cache states and train difficulty scorers")
    common(p)

    p = sub.add_parser("evaluate", help="evaluate the routed pipeline on the test split")
    common(p)
    p.add_argument("--tau", type=_tau_type, help="routing threshold")
    p.add_argument("--method", choices=["synadapt", "probe_q", "seq_ppl"],
                   help="difficulty scoring method")
    p.add_argument("--max-new", type=int, help="generation budget per question")

    p = sub.add_parser("sweep", help="tau sweep over the test split")
    common(p)
    p.add_argument("--method", choices=["synadapt", "probe_q", "seq_ppl"])
    p.add_argument("--max-new", type=int)

    p = sub.add_parser("solve", help="solve one question")
    common(p)
    p.add_argument("--question", required=True, help="question text, e.g. 'a=2;b=a+3;b?'")
    p.add_argument("--gold", help="optional gold answer for the record")
    p.add_argument("--tau", type=_tau_type)
    p.add_argument("--max-new", type=int)
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    mapping = {
        "seed": "seed",
        "run_dir": "run_dir",
        "tau": "router.tau",
        "method": "router.method",
        "max_new": "router.max_new",
        "m": None,  # fans out to syngen.m and refine.m below
        "k": "refine.k",
        "no_synthetic_align": "refine.no_synthetic_align",
        "no_iterative_refine": "refine.no_iterative_refine",
    }
    stage_scoped = {
        "pretrain": {"steps": "pretrain.steps", "lr": "pretrain.lr"},
        "syngen": {"steps": "syngen.steps", "lr": "syngen.lr"},
        "finetune": {"lr": "refine.lr"},
    }
    overrides: dict = {}
    for attr, dotted in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if attr == "m":
            overrides["syngen.m"] = value
            overrides["refine.m"] = value
        else:
            overrides[dotted] = value
    for attr, dotted in stage_scoped.get(args.command, {}).items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[dotted] = value
    return overrides


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(getattr(args, "config", None), _overrides_from_args(args))
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "syngen":
            return cmd_syngen(cfg)
        if args.command == "finetune":
            return cmd_finetune(cfg)
        if args.command == "train-classifier":
            return cmd_train_classifier(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "solve":
            return cmd_solve(cfg, args.question, args.gold)
        parser.error(f"unknown command {args.command!r}")
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
