"""Reference forward pass for the frozen values in tests/forward_oracle.rs.

Run with numpy: python3 backbone_forward.py
"""
import numpy as np

D, LAYERS, HEADS, FF, VOCAB, MAX_SEQ = 4, 2, 2, 6, 7, 6
EPS = 1e-6


def manifest():
    out = [("tok_emb", (VOCAB, D)), ("pos_emb", (MAX_SEQ, D))]
    for i in range(LAYERS):
        out += [
            ("attn_norm", (D,)), ("wq", (D, D)), ("wk", (D, D)), ("wv", (D, D)), ("wo", (D, D)),
            ("mlp_norm", (D,)), ("w1", (D, FF)), ("b1", (FF,)), ("w2", (FF, D)), ("b2", (D,)),
        ]
    out += [("final_norm", (D,)), ("unembed", (D, VOCAB))]
    return out


def params():
    ps = []
    for j, (name, shape) in enumerate(manifest()):
        k = np.arange(int(np.prod(shape)), dtype=np.float64)
        v = 0.3 * np.sin(0.7 * j + 0.37 * k + 0.1)
        if name.endswith("norm"):
            v = 1.0 + v
        ps.append(v.reshape(shape))
    return ps


def rms(x, g):
    return x / np.sqrt((x * x).mean(axis=1, keepdims=True) + EPS) * g


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def forward(tokens, anchors, context_len):
    ps = iter(params())
    tok, pos = next(ps), next(ps)
    n = len(tokens)
    x = tok[tokens] + pos[np.arange(n)]
    allow = np.array([[c <= r or (r < anchors and c < context_len) for c in range(n)] for r in range(n)])
    hd = D // HEADS
    for _ in range(LAYERS):
        g1, wq, wk, wv, wo, g2, w1, b1, w2, b2 = (next(ps) for _ in range(10))
        h = rms(x, g1)
        q, k, v = h @ wq, h @ wk, h @ wv
        heads = []
        for i in range(HEADS):
            s = slice(i * hd, (i + 1) * hd)
            sc = q[:, s] @ k[:, s].T / np.sqrt(hd)
            sc = np.where(allow, sc, -np.inf)
            p = np.exp(sc - sc.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            heads.append(p @ v[:, s])
        x = x + np.concatenate(heads, axis=1) @ wo
        x = x + gelu(rms(x, g2) @ w1 + b1) @ w2 + b2
    gf, un = next(ps), next(ps)
    return rms(x, gf) @ un


np.set_printoptions(precision=17)
for label, tokens, anchors, ctx in [("causal", [1, 4, 2, 6, 0], 0, 0), ("context", [3, 3, 5, 1, 2], 2, 4)]:
    logits = forward(tokens, anchors, ctx)
    print(label)
    for row in logits:
        print("    [" + ", ".join(repr(float(v)) for v in row) + "],")
