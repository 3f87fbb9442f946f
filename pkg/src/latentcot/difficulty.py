"""Question-difficulty scoring from the end-of-think hidden state.

The scorer is a two-layer perceptron over the base model's post-norm state at
the eot position of [Q, Z_final, eot], trained with a pairwise ranking loss
(-log sigmoid of the logit gap) on (harder, easier) sample pairs. Ranking
losses are translation invariant, so after training the output bias is
recentred: the midpoint between the mean hard-class and mean easy-class
training logits maps to score 0.5. The question-only probe and the
question-perplexity baselines share the scoring interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, InfeasibleConfig, ShapeMismatch
from .model import AdapterSet, TransformerParams, forward_hybrid
from .refine import RefineConfig, refine_k
from .tasks import ReasoningSample, SplitMix64


@dataclass
class ClassifierConfig:
    hidden: int = 64
    lr: float = 3e-3
    epochs: int = 12
    batch: int = 64
    pair_margin: int = 2
    pair_cap: int = 6000
    hard_threshold: int = 5


@dataclass
class DifficultyPair:
    hard_id: str
    easy_id: str
    hard_difficulty: int
    easy_difficulty: int


@dataclass
class DifficultyScore:
    value: float  # in the open interval (0, 1)
    method: str  # synadapt | probe_q | seq_ppl


class DifficultyClassifier:
    """Two affine layers with a rectifier between; scalar logit out."""

    def __init__(self, tensors: dict[str, Tensor], method: str = "synadapt"):
        self.tensors = tensors
        self.method = method

    @classmethod
    def init(cls, d_model: int, hidden: int, seed: int = 0, method: str = "synadapt"):
        rng = np.random.default_rng(seed)
        tensors = {
            "w1": Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(d_model, hidden)).astype(np.float32)),
            "b1": Tensor(np.zeros((hidden,), np.float32)),
            "w2": Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, 1)).astype(np.float32)),
            "b2": Tensor(np.zeros((1,), np.float32)),
        }
        return cls(tensors, method)

    def logits(self, states: Tensor) -> Tensor:
        """states: (n, d_model) -> (n,) raw logits."""
        if len(states.shape) == 1:
            states = ad.reshape(states, (1, states.shape[0]))
        h = ad.relu(states @ self.tensors["w1"] + self.tensors["b1"])
        out = h @ self.tensors["w2"] + self.tensors["b2"]
        return ad.reshape(out, (out.shape[0],))

    def logit_values(self, states: np.ndarray) -> np.ndarray:
        return self.logits(Tensor(np.asarray(states, np.float32))).data

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag


def eot_state(params: TransformerParams, q_tokens: list[int], z_final: Tensor) -> Tensor:
    """Post-norm final state at the eot position of [Q, Z_final, eot], base
    model only (adapters never see this pass)."""
    cfg = params.config
    states = forward_hybrid(params, list(q_tokens) + [z_final, cfg.eot_id])
    return states.final[len(q_tokens) + z_final.shape[0]]


def question_state(params: TransformerParams, q_tokens: list[int]) -> Tensor:
    """Post-norm final state at the question's last token (no continuous input)."""
    states = forward_hybrid(params, list(q_tokens))
    return states.final[len(q_tokens) - 1]


def classifier_forward(clf: DifficultyClassifier, state) -> DifficultyScore:
    arr = state.data if isinstance(state, Tensor) else np.asarray(state, np.float32)
    if arr.ndim != 1:
        raise ShapeMismatch(f"expected a single d_model vector, got {arr.shape}")
    logit = float(clf.logit_values(arr[None, :])[0])
    return DifficultyScore(value=float(1.0 / (1.0 + np.exp(-logit))), method=clf.method)


def loss_diff(clf: DifficultyClassifier, h_hard, h_easy) -> Tensor:
    """-log sigmoid(logit_hard - logit_easy) on raw logits."""
    lh = clf.logits(h_hard if isinstance(h_hard, Tensor) else Tensor(np.asarray(h_hard, np.float32)))
    le = clf.logits(h_easy if isinstance(h_easy, Tensor) else Tensor(np.asarray(h_easy, np.float32)))
    gap = lh - le
    return -ad.tmean(ad.log(ad.sigmoid(gap)))


def build_pairs(samples: list[ReasoningSample], margin: int, seed: int = 0,
                cap: int = 6000) -> list[DifficultyPair]:
    """All (harder, easier) pairs with difficulty gap >= margin, deterministically
    shuffled; if more than cap exist, a deterministic uniform subset of cap."""
    by_difficulty: dict[int, list[ReasoningSample]] = {}
    for s in samples:
        by_difficulty.setdefault(s.difficulty, []).append(s)
    levels = sorted(by_difficulty)
    total = 0
    for dh in levels:
        for de in levels:
            if dh - de >= margin:
                total += len(by_difficulty[dh]) * len(by_difficulty[de])
    if total == 0:
        raise InfeasibleConfig(f"no sample pairs with difficulty gap >= {margin}")
    rng = SplitMix64(seed)
    pairs: list[DifficultyPair] = []
    if total <= cap:
        for dh in levels:
            for de in levels:
                if dh - de < margin:
                    continue
                for hard in by_difficulty[dh]:
                    for easy in by_difficulty[de]:
                        pairs.append(DifficultyPair(hard.id, easy.id, dh, de))
        rng.shuffle(pairs)
    else:
        eligible_hard = [s for s in samples
                         if any(s.difficulty - de >= margin for de in levels)]
        seen = set()
        while len(pairs) < cap:
            hard = eligible_hard[rng.randint(0, len(eligible_hard) - 1)]
            easy_levels = [de for de in levels if hard.difficulty - de >= margin]
            easy_pool = by_difficulty[easy_levels[rng.randint(0, len(easy_levels) - 1)]]
            easy = easy_pool[rng.randint(0, len(easy_pool) - 1)]
            key = (hard.id, easy.id)
            if key in seen:
                continue
            seen.add(key)
            pairs.append(DifficultyPair(hard.id, easy.id, hard.difficulty, easy.difficulty))
    return pairs


def cache_ccot_states(params: TransformerParams, adapters: AdapterSet,
                      samples: list[ReasoningSample], refine_cfg: RefineConfig) -> dict[str, np.ndarray]:
    """Refined-thought eot state per sample id (the classifier's input feature)."""
    out = {}
    for s in samples:
        z = refine_k(params, adapters, s.q_tokens(), refine_cfg).tensor
        out[s.id] = eot_state(params, s.q_tokens(), z).data.copy()
    return out


def cache_question_states(params: TransformerParams,
                          samples: list[ReasoningSample]) -> dict[str, np.ndarray]:
    return {s.id: question_state(params, s.q_tokens()).data.copy() for s in samples}


def _train_on_states(states: dict[str, np.ndarray], samples: list[ReasoningSample],
                     cfg: ClassifierConfig, seed: int, method: str) -> tuple[DifficultyClassifier, dict]:
    d_model = next(iter(states.values())).shape[0]
    clf = DifficultyClassifier.init(d_model, cfg.hidden, seed=seed, method=method)
    clf.set_trainable(True)
    pairs = build_pairs(samples, cfg.pair_margin, seed=seed, cap=cfg.pair_cap)
    h_hard = np.stack([states[p.hard_id] for p in pairs]).astype(np.float32)
    h_easy = np.stack([states[p.easy_id] for p in pairs]).astype(np.float32)
    opt = ad.OptimizerState(lr=cfg.lr)
    rng = np.random.default_rng(seed)
    order = np.arange(len(pairs))
    losses = []
    for _ in range(cfg.epochs):
        rng.shuffle(order)
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            loss = loss_diff(clf, Tensor(h_hard[idx]), Tensor(h_easy[idx]))
            losses.append(loss.item())
            grads = ad.backward(loss)
            named = {n: grads[t] for n, t in clf.tensors.items() if t in grads}
            ad.adam_update(opt, clf.tensors, named)
    clf.set_trainable(False)

    # recentre: ranking loss fixes only logit gaps, not the zero point
    difficulties = {s.id: s.difficulty for s in samples}
    all_states = np.stack([states[s.id] for s in samples]).astype(np.float32)
    logits = clf.logit_values(all_states)
    hard_mask = np.array([difficulties[s.id] >= cfg.hard_threshold for s in samples])
    if hard_mask.any() and (~hard_mask).any():
        midpoint = (logits[hard_mask].mean() + logits[~hard_mask].mean()) / 2.0
        clf.tensors["b2"].data -= np.float32(midpoint)
    log = {"pairs": len(pairs), "final_loss": losses[-1] if losses else None,
           "mean_last_20": float(np.mean(losses[-20:])) if losses else None}
    return clf, log


def train_classifier(params: TransformerParams, adapters: AdapterSet,
                     samples: list[ReasoningSample], refine_cfg: RefineConfig,
                     cfg: ClassifierConfig, seed: int = 0,
                     states: dict[str, np.ndarray] | None = None) -> tuple[DifficultyClassifier, dict]:
    """Train the refined-thought difficulty scorer; base and adapters untouched."""
    if states is None:
        states = cache_ccot_states(params, adapters, samples, refine_cfg)
    return _train_on_states(states, samples, cfg, seed, "synadapt")


def baseline_probe_q(params: TransformerParams, samples: list[ReasoningSample],
                     cfg: ClassifierConfig, seed: int = 0,
                     states: dict[str, np.ndarray] | None = None) -> tuple[DifficultyClassifier, dict]:
    """Same trainer, but the probed feature is the question's last-token state."""
    if states is None:
        states = cache_question_states(params, samples)
    return _train_on_states(states, samples, cfg, seed, "probe_q")


def baseline_seq_ppl(params: TransformerParams, q_tokens: list[int]) -> float:
    """Raw question perplexity: exp(mean next-token NLL over Q[1:])."""
    if len(q_tokens) < 2:
        raise ContractViolation("seq_ppl needs a question of at least two tokens")
    states = forward_hybrid(params, list(q_tokens))
    logits = states.logits.data[:-1]
    targets = np.asarray(q_tokens[1:])
    m = logits.max(axis=-1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(logits - m).sum(axis=-1))
    nll = logz - logits[np.arange(len(targets)), targets]
    return float(np.exp(nll.mean()))


def rescale_to_unit(values: list[float], eps: float = 1e-6) -> list[float]:
    """Min-max rescale into the open interval (0, 1); higher stays harder."""
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    return list((arr - lo + eps) / (hi - lo + 2 * eps))


def rank_accuracy(clf: DifficultyClassifier, states: dict[str, np.ndarray],
                  pairs: list[DifficultyPair]) -> float:
    """Fraction of pairs where the harder sample gets the strictly higher logit."""
    if not pairs:
        raise ContractViolation("rank_accuracy needs at least one pair")
    h = clf.logit_values(np.stack([states[p.hard_id] for p in pairs]))
    e = clf.logit_values(np.stack([states[p.easy_id] for p in pairs]))
    return float(np.mean(h > e))
