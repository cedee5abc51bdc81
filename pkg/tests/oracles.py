"""Independent double-precision reference implementations (explicit loops)."""

import math

import numpy as np


def softplus(v):
    return math.log1p(math.exp(v)) if v < 30 else v


def silu(v):
    return v / (1.0 + math.exp(-v))


def layer_norm_rows(x, eps=1e-5):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        mu = sum(x[i]) / x.shape[1]
        var = sum((v - mu) ** 2 for v in x[i]) / x.shape[1]
        out[i] = [(v - mu) / math.sqrt(var + eps) for v in x[i]]
    return out


def ssm_directional_loop(x, p, direction="forward"):
    """Per-step loop of the selective mixer on one sequence ``x: [L, d]``."""
    x = np.asarray(x, dtype=np.float64)
    L, d = x.shape
    w_in, b_in = np.asarray(p["w_in"], np.float64), np.asarray(p["b_in"], np.float64)
    a_log, w_out = np.asarray(p["a_log"], np.float64), np.asarray(p["w_out"], np.float64)
    N = (w_in.shape[1] - 3 * d) // 2
    order = range(L) if direction == "forward" else range(L - 1, -1, -1)
    h = np.zeros((d, N))
    y = np.zeros((L, d))
    for i in order:
        proj = [sum(x[i, r] * w_in[r, j] for r in range(d)) + b_in[j] for j in range(3 * d + 2 * N)]
        xs, z, dt = proj[:d], proj[d:2 * d], proj[2 * d:3 * d]
        Bv, Cv = proj[3 * d:3 * d + N], proj[3 * d + N:]
        gated = np.zeros(d)
        for c in range(d):
            delta = softplus(dt[c])
            decay = math.exp(-delta * math.exp(a_log[c]))
            acc = 0.0
            for n in range(N):
                h[c, n] = decay * h[c, n] + delta * xs[c] * Bv[n]
                acc += h[c, n] * Cv[n]
            gated[c] = acc * silu(z[c])
        for j in range(d):
            y[i, j] = sum(gated[c] * w_out[c, j] for c in range(d))
    return y


def attention_dense(x, w_qkv, w_out, d_head, base=10000.0, rotary=True):
    """Explicit L x L score matrix per head for one sequence ``x: [L, d]``."""
    x = np.asarray(x, dtype=np.float64)
    L, d = x.shape
    H = d // d_head
    half = d_head // 2
    qkv = x @ np.asarray(w_qkv, np.float64)
    out = np.zeros((L, d))
    for hd in range(H):
        sl = slice(hd * d_head, (hd + 1) * d_head)
        q, k, v = qkv[:, sl].copy(), qkv[:, d:][:, sl].copy(), qkv[:, 2 * d:][:, sl].copy()
        if rotary:
            for m in (q, k):
                for pos in range(L):
                    for j in range(half):
                        ang = pos * base ** (-j / half)
                        a, b = m[pos, j], m[pos, j + half]
                        m[pos, j] = a * math.cos(ang) - b * math.sin(ang)
                        m[pos, j + half] = a * math.sin(ang) + b * math.cos(ang)
        scores = np.zeros((L, L))
        for i in range(L):
            for j in range(L):
                scores[i, j] = sum(q[i, c] * k[j, c] for c in range(d_head)) / math.sqrt(d_head)
        for i in range(L):
            m = max(scores[i])
            w = [math.exp(s - m) for s in scores[i]]
            tot = sum(w)
            for c in range(d_head):
                out[i, hd * d_head + c] = sum(w[j] * v[j, c] for j in range(L)) / tot
    return out @ np.asarray(w_out, np.float64)


def reverse_chain_distribution(probs, L, S, mask_id):
    """Exact law of the final sequence of the S-step reverse chain.

    ``probs`` is the constant per-position token distribution. Enumerates
    every stay/unmask pattern and token choice step by step.
    """
    V = len(probs)
    states = {tuple([mask_id] * L): 1.0}
    for k in range(S, 0, -1):
        t, s = k / S, (k - 1) / S
        stay = s / t
        nxt: dict = {}
        for state, pr in states.items():
            options = []
            for tok in state:
                if tok != mask_id:
                    options.append([(tok, 1.0)])
                else:
                    opts = [(mask_id, stay)] if stay > 0 else []
                    opts += [(v, (1 - stay) * probs[v]) for v in range(V)]
                    options.append(opts)
            combos = [((), pr)]
            for opts in options:
                combos = [(c + (tok,), q * w) for c, q in combos for tok, w in opts]
            for c, q in combos:
                nxt[c] = nxt.get(c, 0.0) + q
        states = nxt
    return states
