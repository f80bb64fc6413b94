"""Straight-line dense reference implementation in plain Python floats.

Deliberately shares nothing with :mod:`convgap.engine` beyond reading the
checkpoint's tensors: no numpy arithmetic, explicit loops, float64 throughout.
It is slow and only meant to cross-check the engine on small models.
"""

from __future__ import annotations

import math
from operator import mul


def _dot(a, b):
    return sum(map(mul, a, b))


def _vecmat(x, m_cols):
    # m_cols: list of columns
    return [_dot(x, col) for col in m_cols]


def _columns(arr):
    rows = arr.tolist()
    return [list(c) for c in zip(*rows)]


class DenseOracle:
    def __init__(self, model):
        cfg = model.config
        self.cfg = cfg
        t = model.tensors
        self.embed = t["embed.weight"].tolist()
        self.pos = t["pos_embed.weight"].tolist() if cfg.positional_kind == "learned" else None
        self.layers = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            layer = {
                "attn_norm": self._norm_params(t, f"{p}.attn_norm"),
                "mlp_norm": self._norm_params(t, f"{p}.mlp_norm"),
                "q": _columns(t[f"{p}.attn.q.weight"]),
                "k": _columns(t[f"{p}.attn.k.weight"]),
                "v": _columns(t[f"{p}.attn.v.weight"]),
                "o": _columns(t[f"{p}.attn.o.weight"]),
                "up": _columns(t[f"{p}.mlp.up.weight"]),
                "down": _columns(t[f"{p}.mlp.down.weight"]),
            }
            if cfg.gated_mlp:
                layer["gate"] = _columns(t[f"{p}.mlp.gate.weight"])
            self.layers.append(layer)
        self.final_norm = self._norm_params(t, "final_norm")
        if cfg.tied_unembedding:
            self.unembed_cols = [list(r) for r in self.embed]
        else:
            self.unembed_cols = _columns(t["unembed.weight"])

    def _norm_params(self, t, prefix):
        w = t[f"{prefix}.weight"].tolist()
        b = t[f"{prefix}.bias"].tolist() if self.cfg.norm_kind == "layernorm" else None
        return w, b

    def norm(self, x, params):
        w, b = params
        n = len(x)
        eps = self.cfg.norm_eps
        if self.cfg.norm_kind == "rmsnorm":
            r = 1.0 / math.sqrt(sum(v * v for v in x) / n + eps)
            return [x[i] * r * w[i] for i in range(n)]
        mu = sum(x) / n
        var = sum((v - mu) ** 2 for v in x) / n
        r = 1.0 / math.sqrt(var + eps)
        return [(x[i] - mu) * r * w[i] + b[i] for i in range(n)]

    def _rotate(self, vec, pos):
        dh = len(vec)
        half = dh // 2
        out = [0.0] * dh
        for i in range(half):
            theta = pos * self.cfg.rope_base ** (-2.0 * i / dh)
            c, s = math.cos(theta), math.sin(theta)
            out[i] = vec[i] * c - vec[i + half] * s
            out[i + half] = vec[i + half] * c + vec[i] * s
        return out

    def _attn(self, hs, layer):
        cfg = self.cfg
        nh, dh = cfg.n_heads, cfg.head_dim
        qs = [_vecmat(h, layer["q"]) for h in hs]
        ks = [_vecmat(h, layer["k"]) for h in hs]
        vs = [_vecmat(h, layer["v"]) for h in hs]
        t = len(hs)
        outs = []
        for i in range(t):
            concat = []
            for head in range(nh):
                sl = slice(head * dh, (head + 1) * dh)
                q = qs[i][sl]
                if cfg.positional_kind == "rotary":
                    q = self._rotate(q, i)
                scores = []
                for j in range(i + 1):
                    k = ks[j][sl]
                    if cfg.positional_kind == "rotary":
                        k = self._rotate(k, j)
                    scores.append(_dot(q, k) / math.sqrt(dh))
                mx = max(scores)
                ex = [math.exp(s - mx) for s in scores]
                tot = sum(ex)
                head_out = [0.0] * dh
                for j in range(i + 1):
                    a = ex[j] / tot
                    vj = vs[j][sl]
                    for c in range(dh):
                        head_out[c] += a * vj[c]
                concat.extend(head_out)
            outs.append(_vecmat(concat, layer["o"]))
        return outs

    def _mlp(self, h, layer):
        up = _vecmat(h, layer["up"])
        if self.cfg.gated_mlp:
            gate = _vecmat(h, layer["gate"])
            act = [g / (1.0 + math.exp(-g)) * u for g, u in zip(gate, up)]
        else:
            c = math.sqrt(2.0 / math.pi)
            act = [0.5 * u * (1.0 + math.tanh(c * (u + 0.044715 * u ** 3))) for u in up]
        return _vecmat(act, layer["down"])

    def residuals(self, tokens):
        """Post-block residuals, indexed [layer][position]."""
        xs = [list(self.embed[t]) for t in tokens]
        if self.pos is not None:
            xs = [[a + b for a, b in zip(x, self.pos[i])] for i, x in enumerate(xs)]
        out = []
        for layer in self.layers:
            hs = [self.norm(x, layer["attn_norm"]) for x in xs]
            att = self._attn(hs, layer)
            xs = [[a + b for a, b in zip(x, o)] for x, o in zip(xs, att)]
            mo = [self._mlp(self.norm(x, layer["mlp_norm"]), layer) for x in xs]
            xs = [[a + b for a, b in zip(x, o)] for x, o in zip(xs, mo)]
            out.append([list(x) for x in xs])
        return out

    def logits(self, residual):
        y = self.norm(residual, self.final_norm)
        return _vecmat(y, self.unembed_cols)

    def final_logits(self, tokens):
        return [self.logits(x) for x in self.residuals(tokens)[-1]]

    def greedy(self, context, max_tokens):
        seq = list(context)
        out = []
        for _ in range(max_tokens):
            logits = self.final_logits(seq)[-1]
            best = 0
            for i, v in enumerate(logits):
                if v > logits[best]:
                    best = i
            out.append(best)
            seq.append(best)
        return out


def probs(logits):
    mx = max(logits)
    ex = [math.exp(v - mx) for v in logits]
    tot = sum(ex)
    return [e / tot for e in ex]


def kl(p, q, floor=1e-12):
    if any(v < floor for v in q):
        q = [max(v, floor) for v in q]
        tot = sum(q)
        q = [v / tot for v in q]
    total = 0.0
    for a, b in zip(p, q):
        if a > 0.0:
            total += a * (math.log(a) - math.log(b))
    return max(total, 0.0)


def convergence_curves(oracle: DenseOracle, tokens):
    """Raw-lens KL(layer || final) per position: list [position][layer]."""
    res = oracle.residuals(tokens)
    n_layers = len(res)
    finals = [probs(oracle.logits(x)) for x in res[-1]]
    curves = []
    for pos in range(len(tokens)):
        curves.append([kl(probs(oracle.logits(res[l][pos])), finals[pos]) for l in range(n_layers)])
    return curves


def late_gap(curve, fraction=0.2):
    n = len(curve)
    k = max(1, math.ceil(round(fraction * n, 9)))
    tail = curve[n - k :]
    return sum(tail) / len(tail)
