"""Deliberately slow, independent re-implementation of the forward pass.

Test oracle only: plain Python loops over positions and heads, no shared code
with the graph-based forward beyond the parameter container. Kept simple
enough to audit by eye.
"""

from __future__ import annotations

import math

import numpy as np

from .model import AdapterSet, ModelConfig, TransformerParams


def _norm_row(row: np.ndarray, weight: np.ndarray) -> np.ndarray:
    ms = sum(float(v) * float(v) for v in row) / len(row) + 1e-5
    return row / math.sqrt(ms) * weight


def _rope_row(vec: np.ndarray, pos: int, cfg: ModelConfig) -> np.ndarray:
    """Rotate each head's block independently (first half paired with second)."""
    half = cfg.head_dim // 2
    out = vec.copy()
    for head in range(cfg.n_heads):
        base = head * cfg.head_dim
        for i in range(half):
            freq = cfg.rope_base ** (-2.0 * i / cfg.head_dim)
            c, s = math.cos(pos * freq), math.sin(pos * freq)
            a, b = float(vec[base + i]), float(vec[base + half + i])
            out[base + i] = a * c - b * s
            out[base + half + i] = a * s + b * c
    return out


def _mat(params: TransformerParams, adapters: AdapterSet | None, name: str) -> np.ndarray:
    w = params[name].data.astype(np.float64)
    if adapters is not None and adapters.enabled:
        key = f"{name}.lora_a"
        if key in adapters.tensors:
            a = adapters.tensors[key].data.astype(np.float64)
            b = adapters.tensors[name + ".lora_b"].data.astype(np.float64)
            w = w + adapters.scale * (a @ b)
    return w


def naive_forward(params: TransformerParams, items,
                  adapters: AdapterSet | None = None) -> dict[str, np.ndarray]:
    """Returns {"layers": (L, T, d), "final": (T, d), "logits": (T, V)} in float64."""
    cfg = params.config
    rows = []
    for item in items:
        if isinstance(item, (int, np.integer)):
            rows.append(params["embed"].data[int(item)].astype(np.float64))
        else:
            arr = np.asarray(getattr(item, "data", item), dtype=np.float64)
            if arr.ndim == 1:
                rows.append(arr)
            else:
                rows.extend(arr[j] for j in range(arr.shape[0]))
    x = np.stack(rows)
    t = x.shape[0]
    layer_outs = []
    for li in range(cfg.n_layers):
        wq = _mat(params, adapters, f"layers.{li}.wq")
        wk = params[f"layers.{li}.wk"].data.astype(np.float64)
        wv = _mat(params, adapters, f"layers.{li}.wv")
        wo = params[f"layers.{li}.wo"].data.astype(np.float64)
        attn_norm = params[f"layers.{li}.attn_norm"].data.astype(np.float64)
        ffn_norm = params[f"layers.{li}.ffn_norm"].data.astype(np.float64)
        w_up = _mat(params, adapters, f"layers.{li}.w_up")
        w_down = params[f"layers.{li}.w_down"].data.astype(np.float64)

        h = np.stack([_norm_row(x[p], attn_norm) for p in range(t)])
        q_all = np.stack([_rope_row(h[p] @ wq, p, cfg) for p in range(t)])
        k_all = np.stack([_rope_row(h[p] @ wk, p, cfg) for p in range(t)])
        v_all = h @ wv
        ctx = np.zeros_like(x)
        for p in range(t):
            for head in range(cfg.n_heads):
                lo, hi = head * cfg.head_dim, (head + 1) * cfg.head_dim
                scores = []
                for j in range(p + 1):
                    scores.append(float(q_all[p, lo:hi] @ k_all[j, lo:hi]) / math.sqrt(cfg.head_dim))
                mx = max(scores)
                weights = [math.exp(s - mx) for s in scores]
                z = sum(weights)
                for j in range(p + 1):
                    ctx[p, lo:hi] += (weights[j] / z) * v_all[j, lo:hi]
        x = x + ctx @ wo
        h2 = np.stack([_norm_row(x[p], ffn_norm) for p in range(t)])
        x = x + np.maximum(h2 @ w_up, 0.0) @ w_down
        layer_outs.append(x.copy())

    final = np.stack([_norm_row(x[p], params["final_norm"].data.astype(np.float64)) for p in range(t)])
    logits = final @ params["unembed"].data.astype(np.float64)
    return {"layers": np.stack(layer_outs), "final": final, "logits": logits}


def naive_decode(params: TransformerParams, prefix_items, max_new: int) -> list[int]:
    """Reference greedy decoder: full re-forward per emitted token."""
    items = list(prefix_items)
    out: list[int] = []
    for _ in range(max_new):
        logits = naive_forward(params, items)["logits"][-1]
        token = int(np.argmax(logits))
        out.append(token)
        if token == params.config.eos_id:
            break
        items.append(token)
    return out
