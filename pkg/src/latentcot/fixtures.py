"""Golden fixtures: frozen seeded samples and reference values.

Each fixture file is one JSON document:
    {"name": ..., "tag": "TRIVIAL" | "PAPER" | "DERIVED", "inputs": {...},
     "expected": {...}, "tolerance": float, "oracle": "<regeneration command>"}

DERIVED fixtures are rewritten by regenerate_fixtures() from their oracles
(the pinned-RNG generator, hand-evaluated optimizer recurrences, the naive
reference forward). TRIVIAL and PAPER fixtures are hand-written and never
regenerated; PAPER ones are flagged read_only. Small tensors are embedded as
little-endian float32 hex strings.

Run `python -m latentcot.fixtures` to regenerate (refuses to overwrite a
DERIVED fixture whose oracle now disagrees beyond tolerance).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from . import tasks
from .errors import DomainError
from .model import ModelConfig, TransformerParams
from .naive_reference import naive_forward

DEFAULT_DIR = Path(__file__).resolve().parents[2] / "fixtures"


def encode_f32(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(a.shape), "hex": a.tobytes().hex()}


def decode_f32(obj: dict) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(obj["hex"]), dtype="<f4").reshape(obj["shape"]).copy()


# oracles --------------------------------------------------------------------


def _golden_sample() -> dict:
    rng = tasks.SplitMix64(7)
    s = tasks.gen_chain_sample(rng, 3, False, "golden-0")
    assert tasks.eval_chain(s.question) == int(s.answer)
    return {
        "name": "golden_chain_sample",
        "tag": "DERIVED",
        "inputs": {"rng": "splitmix64(7)", "depth": 3, "disguised": False},
        "expected": {"question": s.question, "dcot": s.dcot, "answer": s.answer,
                     "difficulty": s.difficulty},
        "tolerance": 0.0,
        "oracle": "python -m latentcot.fixtures",
    }


def _adam_two_steps() -> dict:
    # hand-evaluated recurrences, not the production optimizer
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    g = 4.0
    theta, m, v = 1.0, 0.0, 0.0
    trajectory = []
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        trajectory.append(theta)
    return {
        "name": "adam_two_identical_steps",
        "tag": "DERIVED",
        "inputs": {"theta0": 1.0, "grad": g, "lr": lr, "beta1": b1, "beta2": b2, "eps": eps},
        "expected": {"theta_after_step": trajectory},
        "tolerance": 1e-12,
        "oracle": "python -m latentcot.fixtures",
    }


def _tiny_forward() -> dict:
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=32)
    params = TransformerParams.init(cfg, seed=11)
    items = tasks.tokenize("a=2;b=a+3;b?")
    logits = naive_forward(params, items)["logits"].astype(np.float32)
    return {
        "name": "tiny_model_logits",
        "tag": "DERIVED",
        "inputs": {"config": {"d_model": 16, "n_layers": 2, "n_heads": 2,
                              "d_ff": 32, "max_seq_len": 32},
                   "init_seed": 11, "text": "a=2;b=a+3;b?"},
        "expected": {"logits": encode_f32(logits)},
        "tolerance": 1e-5,
        "oracle": "python -m latentcot.fixtures",
    }


_DERIVED_BUILDERS = {
    "golden_chain_sample": _golden_sample,
    "adam_two_identical_steps": _adam_two_steps,
    "tiny_model_logits": _tiny_forward,
}

_HAND_WRITTEN = {
    "closed_form_losses": {
        "name": "closed_form_losses",
        "tag": "TRIVIAL",
        "inputs": {"vocab": 64, "logit_gap": 2.0,
                   "two_token_gold_probs": [0.5, 0.25]},
        "expected": {
            "uniform_answer_nll": 4.1588830833596715,  # ln 64
            "equal_logit_pair_loss": 0.6931471805599453,  # ln 2
            "gap2_pair_loss": 0.12692801104297263,  # ln(1 + e^-2)
            "sigmoid_of_2": 0.8807970779778823,
            "two_token_answer_nll": 1.0397207708399179,  # (ln2 + ln4)/2
        },
        "tolerance": 1e-9,
        "oracle": None,
    },
    "rel_g_reference_rows": {
        "name": "rel_g_reference_rows",
        "tag": "PAPER",
        "read_only": True,
        "inputs": {"anchors": {"acc_raw": 73.3, "len_raw": 7786.84}},
        "expected": {"rows": [
            {"acc": 50.3, "len": 584.9, "rel_g": 9.14},
            {"acc": 68.5, "len": 4751.6, "rel_g": 1.53},
        ]},
        "tolerance": 0.01,
        "oracle": None,
    },
    "archive_header": {
        "name": "archive_header",
        "tag": "TRIVIAL",
        "inputs": {},
        "expected": {"magic": "53594e41", "version": 1},  # b"SYNA".hex()
        "tolerance": 0.0,
        "oracle": None,
    },
}


def _deep_close(a, b, tol: float) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_deep_close(a[k], b[k], tol) for k in a)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(_deep_close(x, y, tol) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        return abs(float(a) - float(b)) <= tol
    return a == b


def regenerate_fixtures(fixture_dir: Path | str | None = None) -> list[Path]:
    """Rewrite DERIVED fixtures from their oracles. An existing DERIVED fixture
    that disagrees with its oracle beyond tolerance is reported, not
    overwritten. Hand-written (TRIVIAL/PAPER) fixtures are created when absent
    and never regenerated."""
    fixture_dir = Path(fixture_dir) if fixture_dir else DEFAULT_DIR
    fixture_dir.mkdir(parents=True, exist_ok=True)
    written = []
    conflicts = []
    for name, builder in _DERIVED_BUILDERS.items():
        doc = builder()
        path = fixture_dir / f"{name}.json"
        if path.exists():
            existing = json.loads(path.read_text())
            if existing.get("tag") == "DERIVED" and not _deep_close(
                    existing["expected"], doc["expected"], float(existing.get("tolerance", 0.0))):
                conflicts.append(name)
                continue
        path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        written.append(path)
    for name, doc in _HAND_WRITTEN.items():
        path = fixture_dir / f"{name}.json"
        if not path.exists():
            path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
            written.append(path)
    if conflicts:
        raise DomainError(
            "oracle disagreement; refusing to overwrite DERIVED fixtures: "
            + ", ".join(conflicts))
    return written


def load_fixture(name: str, fixture_dir: Path | str | None = None) -> dict:
    fixture_dir = Path(fixture_dir) if fixture_dir else DEFAULT_DIR
    return json.loads((fixture_dir / f"{name}.json").read_text())


def main() -> None:
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_DIR
    try:
        written = regenerate_fixtures(target)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)
    for p in written:
        print(f"wrote {p}")


if __name__ == "__main__":
    main()
