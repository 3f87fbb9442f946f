"""Shared fixtures. The trained-pipeline fixture builds every artifact the
acceptance criteria need (pretrained base, synthetic-thought archive, full and
ablated adapters, difficulty scorers) once per session, cached on disk under
.acceptance_cache/<config-hash>/ so iterating on tests does not retrain.
Delete the cache directory to force a cold rebuild.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from latentcot import tasks
from latentcot.checkpoint import load_archive, save_archive
from latentcot.cli import RunConfig, SyngenSection
from latentcot.difficulty import (ClassifierConfig, DifficultyClassifier, baseline_probe_q,
                                  cache_ccot_states, cache_question_states, train_classifier)
from latentcot.evalkit import PipelineBundle, config_fingerprint
from latentcot.model import (AdapterConfig, AdapterSet, ModelConfig, PretrainSchedule,
                             TransformerParams, load_checkpoint, pretrain_raw, save_checkpoint)
from latentcot.refine import RefineConfig, finetune
from latentcot.syngen import SyngenConfig, syngen_corpus
from latentcot.tasks import CorpusConfig, derive_seed, gen_corpus

CACHE_ROOT = Path(__file__).resolve().parents[1] / ".acceptance_cache"


def acceptance_config() -> RunConfig:
    """The seeded desk-scale recipe the acceptance criteria run against."""
    return RunConfig(
        seed=0,
        run_dir="unused",
        model=ModelConfig(),
        corpus=CorpusConfig(seed=0, n_train=4800, n_val=400, n_test=480),
        pretrain=PretrainSchedule(steps=14000, batch_size=16, lr=1e-3, seed=0,
                                  min_lr_frac=0.15, disguised_repeat=4),
        syngen=SyngenSection(m=16, steps=32, lr=1e-3, lambda_dcot=1.0,
                             train_items=1400, val_items=50),
        refine=RefineConfig(m=16, k=4, epochs=3, lr=3e-3, rank=8, alpha=32.0,
                            micro_batch=2),
        classifier=ClassifierConfig(hidden=64, lr=3e-3, epochs=12, pair_margin=2,
                                    pair_cap=6000, hard_threshold=5),
    )


class PipelineArtifacts:
    def __init__(self, cfg: RunConfig, cache: Path):
        self.cfg = cfg
        self.cache = cache
        self.corpus = gen_corpus(dataclasses.replace(cfg.corpus, seed=cfg.seed))
        self.syngen_samples = (self.corpus.train[:cfg.syngen.train_items]
                               + self.corpus.val[:cfg.syngen.val_items])

        self.params = self._cached_model("base", self._build_base)
        self.syn_store, self.syn_traces = self._cached_syngen()
        self.adapters = self._cached_adapters("adapter_full", cfg.refine)
        self.adapters_no_align = self._cached_adapters(
            "adapter_no_align", dataclasses.replace(cfg.refine, no_synthetic_align=True))
        self.adapters_no_iter = self._cached_adapters(
            "adapter_no_iter", dataclasses.replace(cfg.refine, no_iterative_refine=True))
        self.classifier, self.probe = self._cached_classifiers()

    # builders ---------------------------------------------------------------

    def _build_base(self) -> TransformerParams:
        sched = dataclasses.replace(self.cfg.pretrain, seed=derive_seed(self.cfg.seed, "pretrain"))
        params, log = pretrain_raw(self.cfg.model, self.corpus, sched)
        (self.cache / "pretrain_log.json").write_text(json.dumps(log, indent=2))
        return params

    def _cached_model(self, name: str, builder) -> TransformerParams:
        path = self.cache / f"{name}.ckpt"
        if path.exists():
            params, _ = load_checkpoint(path)
            return params
        params = builder()
        save_checkpoint(path, params)
        return params

    def _cached_syngen(self):
        archive = self.cache / "zsyn.ckpt"
        trace = self.cache / "zsyn_traces.json"
        if not archive.exists():
            syngen_corpus(self.params, self.syngen_samples,
                          SyngenConfig(m=self.cfg.syngen.m, steps=self.cfg.syngen.steps,
                                       lr=self.cfg.syngen.lr,
                                       lambda_dcot=self.cfg.syngen.lambda_dcot),
                          seed=derive_seed(self.cfg.seed, "syngen"),
                          archive_path=archive, trace_path=trace)
        return load_archive(archive), json.loads(trace.read_text())

    def _cached_adapters(self, name: str, rcfg: RefineConfig) -> AdapterSet:
        path = self.cache / f"{name}.ckpt"
        if path.exists():
            _, adapters = load_checkpoint(path)
            return adapters
        store = None if rcfg.no_synthetic_align else self.syn_store
        adapters, log = finetune(self.params, self.corpus.train[:self.cfg.syngen.train_items],
                                 store, rcfg, seed=derive_seed(self.cfg.seed, "refine"),
                                 log_path=self.cache / f"{name}_log.json")
        save_checkpoint(path, self.params, adapters)
        return adapters

    def _cached_classifiers(self):
        clf_path = self.cache / "classifier.ckpt"
        probe_path = self.cache / "probe.ckpt"
        ccfg = dataclasses.replace(self.cfg.classifier,
                                   hard_threshold=self.cfg.corpus.hard_threshold)
        if clf_path.exists() and probe_path.exists():
            from latentcot.autodiff import Tensor
            clf = DifficultyClassifier(
                {k: Tensor(v) for k, v in load_archive(clf_path).items()}, "synadapt")
            probe = DifficultyClassifier(
                {k: Tensor(v) for k, v in load_archive(probe_path).items()}, "probe_q")
            return clf, probe
        ccot_states = cache_ccot_states(self.params, self.adapters, self.corpus.train,
                                        self.cfg.refine)
        save_archive(self.cache / "ccot_train_states.ckpt", ccot_states)
        q_states = cache_question_states(self.params, self.corpus.train)
        clf, _ = train_classifier(self.params, self.adapters, self.corpus.train,
                                  self.cfg.refine, ccfg,
                                  seed=derive_seed(self.cfg.seed, "classifier"),
                                  states=ccot_states)
        probe, _ = baseline_probe_q(self.params, self.corpus.train, ccfg,
                                    seed=derive_seed(self.cfg.seed, "probe"),
                                    states=q_states)
        save_archive(clf_path, {k: t.data for k, t in clf.tensors.items()})
        save_archive(probe_path, {k: t.data for k, t in probe.tensors.items()})
        return clf, probe

    def bundle(self, adapters: AdapterSet | None = None) -> PipelineBundle:
        return PipelineBundle(params=self.params,
                              adapters=adapters or self.adapters,
                              classifier=self.classifier,
                              refine_cfg=self.cfg.refine,
                              probe=self.probe,
                              max_new=self.cfg.router.max_new,
                              hard_threshold=self.cfg.corpus.hard_threshold)


@pytest.fixture(scope="session")
def pipeline():
    cfg = acceptance_config()
    fingerprint = config_fingerprint(dataclasses.asdict(cfg))[:16]
    cache = CACHE_ROOT / fingerprint
    cache.mkdir(parents=True, exist_ok=True)
    return PipelineArtifacts(cfg, cache)
