#!/usr/bin/env python3
"""Independent numpy trace of a one-layer steered model.

Builds every tensor from a closed-form formula, ingests a three-token
context token by token, then runs a two-token prompt from the resulting
state and prints the state and logits as JSON. The Rust test
`crates/core/tests/micro_trace.rs` rebuilds the same weights and compares.

    python3 tools/micro_trace.py > crates/core/tests/fixtures/micro_trace.json
"""

import json
import math

import numpy as np

D, HEADS, VOCAB, MAXLEN, R, ALPHA = 4, 2, 6, 8, 2, 3.0
CONTEXT = [2, 3, 4]
PROMPT = [5, 1]

SHAPES = [
    ("tok_emb", (VOCAB, D)),
    ("pos_emb", (MAXLEN, D)),
    ("ln1.gain", (D,)),
    ("ln1.bias", (D,)),
    ("attn.wq", (D, D)),
    ("attn.wk", (D, D)),
    ("attn.wv", (D, D)),
    ("attn.wo", (D, D)),
    ("ln2.gain", (D,)),
    ("ln2.bias", (D,)),
    ("mlp.w_up", (4 * D, D)),
    ("mlp.b_up", (4 * D,)),
    ("mlp.w_down", (D, 4 * D)),
    ("mlp.b_down", (D,)),
    ("ln_f.gain", (D,)),
    ("ln_f.bias", (D,)),
    ("mem.wq", (R, D)),
    ("mem.wk", (R, D)),
    ("mem.wv", (R, D)),
    ("mem.wbeta", (R, D)),
    ("mem.b", (R,)),
    ("steer.wq", (D, R)),
    ("steer.wk", (D, R)),
    ("steer.wv", (D, R)),
    ("steer.wo", (D, R)),
]


def formula(tid, n, gain):
    vals = [math.sin(0.3 + 1.7 * tid + 0.61 * i) for i in range(n)]
    if gain:
        return [1.0 + 0.2 * v for v in vals]
    return [0.5 * v for v in vals]


W = {}
for tid, (name, shape) in enumerate(SHAPES):
    n = int(np.prod(shape))
    W[name] = np.array(formula(tid, n, name.endswith("gain")), dtype=np.float64).reshape(shape)


def layer_norm(x, g, b):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + 1e-5) * g + b


def gelu(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def unit(x):
    return x / (math.sqrt(float(x @ x)) + 1e-6)


def run(tokens, S):
    """Returns logits per position and the state after writing every token."""
    scale = ALPHA / R
    hd = D // HEADS
    keys, vals, logits = [], [], []
    for t, tok in enumerate(tokens):
        h = W["tok_emb"][tok] + W["pos_emb"][t]
        x = layer_norm(h, W["ln1.gain"], W["ln1.bias"])
        qm = unit(np.tanh(W["mem.wq"] @ x))
        km = unit(np.tanh(W["mem.wk"] @ x))
        vm = W["mem.wv"] @ x
        beta = 1.0 / (1.0 + np.exp(-(W["mem.wbeta"] @ x + W["mem.b"])))
        read = S @ qm
        # gated delta write, row by row
        err = vm - S @ km
        S = np.array([(1.0 - beta[i]) * S[i] + beta[i] * err[i] * km for i in range(R)])
        q = W["attn.wq"] @ x + scale * (W["steer.wq"] @ read)
        k = W["attn.wk"] @ x + scale * (W["steer.wk"] @ read)
        v = W["attn.wv"] @ x + scale * (W["steer.wv"] @ read)
        keys.append(k)
        vals.append(v)
        heads = []
        for hh in range(HEADS):
            sl = slice(hh * hd, (hh + 1) * hd)
            sc = np.array([q[sl] @ kk[sl] for kk in keys]) / math.sqrt(hd)
            w = np.exp(sc - sc.max())
            w /= w.sum()
            heads.append(sum(wi * vv[sl] for wi, vv in zip(w, vals)))
        a = W["attn.wo"] @ np.concatenate(heads) + scale * (W["steer.wo"] @ read)
        h = h + a
        m = layer_norm(h, W["ln2.gain"], W["ln2.bias"])
        h = h + W["mlp.w_down"] @ gelu(W["mlp.w_up"] @ m + W["mlp.b_up"]) + W["mlp.b_down"]
        f = layer_norm(h, W["ln_f.gain"], W["ln_f.bias"])
        logits.append(W["tok_emb"] @ f)
    return np.array(logits), S


S0 = np.zeros((R, R))
_, SC = run(CONTEXT, S0)
LOGITS, SQ = run(PROMPT, SC)
print(
    json.dumps(
        {
            "context": CONTEXT,
            "prompt": PROMPT,
            "state_after_context": [float(x) for x in SC.ravel()],
            "prompt_logits": [float(x) for x in LOGITS.ravel()],
            "state_after_prompt": [float(x) for x in SQ.ravel()],
        },
        indent=1,
    )
)
