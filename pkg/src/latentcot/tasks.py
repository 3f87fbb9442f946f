"""Synthetic chained-arithmetic reasoning corpus.

A sample is a chain of variable assignments over values 0..99 (mod 100),
queried at its last chain variable:

    q="k=07;f=k+3;f?"   dcot="k=07|f=07+3=10"   answer="10"

Values are two-digit zero-padded everywhere (start literals, step results,
answers); step operands are single digits 2..9, operators {+, *}. Difficulty
is the dependency depth (number of dcot steps). Disguised samples append
distractor assignments after the chain so the question surface length matches
a maximum-depth chain while the true depth stays small; distractors may read
earlier variables but never the queried one, so they never feed the queried
chain and the trace's stop position equals the true dependency depth.

The generator RNG is a pinned splitmix64 (documented below) so golden samples
are stable across implementations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import AlphabetError, InfeasibleConfig, TaskFormatError

# token ids: specials first, then the task alphabet in this exact order
ALPHABET = "0123456789abcdefghijklmnopqrstuvwxyz;=+*?|"

PAD_ID = 0
BOS_ID = 1  # reserved, never emitted in sequences
EOS_ID = 2
EOT_ID = 3
DRAFT_ID = 4
SEP_ID = 5  # think separator between question and discrete trace
N_SPECIALS = 6

_CHAR_TO_ID = {ch: N_SPECIALS + i for i, ch in enumerate(ALPHABET)}
_ID_TO_CHAR = {i: ch for ch, i in _CHAR_TO_ID.items()}
_SPECIAL_NAMES = {
    PAD_ID: "<pad>",
    BOS_ID: "<bos>",
    EOS_ID: "<eos>",
    EOT_ID: "<eot>",
    DRAFT_ID: "<draft>",
    SEP_ID: "<sep>",
}

VOCAB_SIZE = 64  # N_SPECIALS + len(ALPHABET) = 48 used, rest spare


def tokenize(text: str) -> list[int]:
    ids = []
    for ch in text:
        if ch not in _CHAR_TO_ID:
            raise AlphabetError(f"character {ch!r} is outside the task alphabet")
        ids.append(_CHAR_TO_ID[ch])
    return ids


def detokenize(ids, strict: bool = True) -> str:
    """Inverse of tokenize. strict=False renders special ids as <name> tags
    instead of raising (used when displaying raw model output)."""
    chars = []
    for i in ids:
        i = int(i)
        if i in _ID_TO_CHAR:
            chars.append(_ID_TO_CHAR[i])
        elif not strict:
            chars.append(_SPECIAL_NAMES.get(i, f"<{i}>"))
        else:
            raise AlphabetError(f"id {i} is not a text token")
    return "".join(chars)


# pinned RNG ----------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """splitmix64 (Steele et al.): state += 0x9E3779B97F4A7C15;
    z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB; return z ^ (z >> 31).

    randint uses modulo reduction (bias < 2^-57 for our tiny ranges);
    shuffle is a Fisher-Yates descent. Both are part of the pinned contract.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return (z ^ (z >> 31)) & _MASK64

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + self.next_u64() % (hi - lo + 1)

    def choice(self, seq):
        return seq[self.randint(0, len(seq) - 1)]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]


def derive_seed(seed: int, stage: str) -> int:
    """Global seed -> per-stage seed by a fixed documented offset table."""
    offsets = {
        "data": 11,
        "pretrain": 23,
        "syngen": 37,
        "refine": 53,
        "classifier": 71,
        "probe": 89,
        "eval": 97,
    }
    if stage not in offsets:
        raise InfeasibleConfig(f"unknown stage {stage!r} for seed derivation")
    return (seed * 1_000_003 + offsets[stage]) & _MASK64


# samples -------------------------------------------------------------------


@dataclass
class ReasoningSample:
    id: str
    question: str
    dcot: str
    answer: str
    difficulty: int
    disguised: bool = False

    def q_tokens(self) -> list[int]:
        return tokenize(self.question)

    def dcot_tokens(self) -> list[int]:
        return tokenize(self.dcot)

    def a_tokens(self) -> list[int]:
        return tokenize(self.answer)


@dataclass
class CorpusConfig:
    seed: int = 0
    depths: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    n_train: int = 4800
    n_val: int = 400
    n_test: int = 480
    disguised_frac: float = 0.2
    hard_threshold: int = 5  # difficulty >= this is a hard question


@dataclass
class CorpusSplits:
    train: list[ReasoningSample]
    val: list[ReasoningSample]
    test: list[ReasoningSample]
    seed: int = 0
    depths: tuple[int, ...] = ()

    def all_samples(self) -> list[ReasoningSample]:
        return self.train + self.val + self.test


MAX_DEPTH = 8
_OPS = "+*"


def _fmt(value: int) -> str:
    return f"{value:02d}"


def gen_chain_sample(rng: SplitMix64, depth: int, disguised: bool, sample_id: str = "s0",
                     pad_to_depth: int = MAX_DEPTH) -> ReasoningSample:
    """One sample. Chain assignments first, then (if disguised) distractors,
    then the query for the last chain variable."""
    if not 1 <= depth <= MAX_DEPTH:
        raise InfeasibleConfig(f"depth {depth} outside 1..{MAX_DEPTH}")
    n_distr = (pad_to_depth - depth) if disguised else 0
    letters = list("abcdefghijklmnopqrstuvwxyz")
    rng.shuffle(letters)
    names = letters[: depth + n_distr]

    parts = []
    dcot_steps = []
    value = rng.randint(0, 99)
    parts.append(f"{names[0]}={_fmt(value)}")
    dcot_steps.append(f"{names[0]}={_fmt(value)}")
    for i in range(1, depth):
        op = _OPS[rng.randint(0, 1)]
        lit = rng.randint(2, 9)
        prev_value = value
        value = (value + lit) % 100 if op == "+" else (value * lit) % 100
        parts.append(f"{names[i]}={names[i - 1]}{op}{lit}")
        dcot_steps.append(f"{names[i]}={_fmt(prev_value)}{op}{lit}={_fmt(value)}")
    queried = names[depth - 1]
    for j in range(n_distr):
        candidates = [n for n in names[:depth + j] if n != queried]
        if candidates:
            ref = candidates[rng.randint(0, len(candidates) - 1)]
            op = _OPS[rng.randint(0, 1)]
            lit = rng.randint(2, 9)
            parts.append(f"{names[depth + j]}={ref}{op}{lit}")
        else:
            # depth-1 disguise has no referencable variable besides the
            # queried one; fall back to a literal assignment
            parts.append(f"{names[depth + j]}={_fmt(rng.randint(0, 99))}")

    question = ";".join(parts) + f";{names[depth - 1]}?"
    return ReasoningSample(
        id=sample_id,
        question=question,
        dcot="|".join(dcot_steps),
        answer=_fmt(value),
        difficulty=depth,
        disguised=disguised,
    )


def eval_chain(question: str) -> int:
    """Independent brute-force evaluator: run every assignment in order,
    return the queried variable's value. Accepts padded and unpadded digits."""
    env: dict[str, int] = {}
    entries = question.split(";")
    if not entries or not entries[-1].endswith("?"):
        raise TaskFormatError("question does not end with a query")
    for entry in entries[:-1]:
        name, _, expr = entry.partition("=")
        if not name or not expr:
            raise TaskFormatError(f"malformed assignment {entry!r}")
        for op in _OPS:
            if op in expr:
                lhs, rhs = expr.split(op, 1)
                a = env[lhs] if lhs in env else int(lhs)
                b = env[rhs] if rhs in env else int(rhs)
                env[name] = (a + b) % 100 if op == "+" else (a * b) % 100
                break
        else:
            env[name] = int(expr) % 100
    query = entries[-1][:-1]
    if query not in env:
        raise TaskFormatError(f"query variable {query!r} never assigned")
    return env[query]


def gen_corpus(config: CorpusConfig) -> CorpusSplits:
    """Deterministic splits, uniform over depths, disguised_frac per depth bucket."""
    rng = SplitMix64(derive_seed(config.seed, "data"))
    splits = {}
    for split_name, n in (("train", config.n_train), ("val", config.n_val), ("test", config.n_test)):
        if n % len(config.depths) != 0:
            raise InfeasibleConfig(
                f"{split_name} size {n} not divisible by {len(config.depths)} depths")
        per_depth = n // len(config.depths)
        if per_depth < 10:
            raise InfeasibleConfig(f"{split_name}: need >= 10 samples per depth, got {per_depth}")
        n_disguised = round(per_depth * config.disguised_frac)
        samples = []
        for depth in config.depths:
            for i in range(per_depth):
                sid = f"{split_name}-{len(samples):05d}"
                samples.append(gen_chain_sample(rng, depth, i < n_disguised, sid,
                                                pad_to_depth=max(config.depths)))
        rng.shuffle(samples)
        splits[split_name] = samples
    return CorpusSplits(splits["train"], splits["val"], splits["test"],
                        seed=config.seed, depths=tuple(config.depths))


# JSONL ---------------------------------------------------------------------

_REQUIRED_KEYS = ("id", "question", "dcot", "answer", "difficulty")


def save_jsonl(path, samples: list[ReasoningSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "id": s.id,
                "question": s.question,
                "dcot": s.dcot,
                "answer": s.answer,
                "difficulty": s.difficulty,
                "disguised": s.disguised,
            }, sort_keys=True) + "\n")


def load_jsonl(path) -> list[ReasoningSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TaskFormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            for key in _REQUIRED_KEYS:
                if key not in obj:
                    raise TaskFormatError(f"{path}: line {lineno}: missing required key {key!r}")
            samples.append(ReasoningSample(
                id=str(obj["id"]),
                question=obj["question"],
                dcot=obj["dcot"],
                answer=obj["answer"],
                difficulty=int(obj["difficulty"]),
                disguised=bool(obj.get("disguised", False)),
            ))
    return samples
