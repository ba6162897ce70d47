"""Independent scalar-loop reference implementations used by the tests."""

import math

import numpy as np


def micro_loop(z, tokens, params, bias=None):
    """Per-pixel scalar evaluation of the micro denoiser."""
    H, W, C = z.shape
    E = tokens.embeddings
    N, dk = E.shape
    d_f = params.W_lift.shape[1]
    d_v = params.W_V.shape[1]
    keys = [[sum(E[j, a] * params.W_K[a, b] for a in range(dk)) for b in range(dk)] for j in range(N)]
    vals = [[sum(E[j, a] * params.W_V[a, b] for a in range(dk)) for b in range(d_v)] for j in range(N)]
    eps = np.zeros((H, W, C))
    attn = np.zeros((H, W, N))
    for r in range(H):
        for c in range(W):
            x = list(z[r, c]) + [(c + 0.5) / W, (r + 0.5) / H]
            f = [sum(x[i] * params.W_lift[i, a] for i in range(C + 2)) for a in range(d_f)]
            q = [sum(f[a] * params.W_Q[a, b] for a in range(d_f)) for b in range(dk)]
            logits = [sum(q[b] * keys[j][b] for b in range(dk)) / math.sqrt(dk) for j in range(N)]
            if bias is not None:
                logits = [logits[j] + bias[r, c, j] for j in range(N)]
            m = max(logits)
            ex = [math.exp(v - m) for v in logits]
            tot = sum(ex)
            p = [e / tot for e in ex]
            mixed = [sum(p[j] * vals[j][b] for j in range(N)) for b in range(d_v)]
            for ch in range(C):
                eps[r, c, ch] = sum(mixed[b] * params.W_head[b, ch] for b in range(d_v)) + sum(
                    z[r, c, i] * params.W_res[i, ch] for i in range(C)
                )
            attn[r, c] = p
    return eps, attn


def mixture_posterior_loop(z, t, spec, sched):
    """Responsibilities and eps by literal summation (no log-sum-exp)."""
    ab = sched.alpha_bar[t]
    s, v = math.sqrt(ab), 1 - ab
    lik = []
    for k in range(len(spec)):
        d2 = float(np.sum((z - s * spec.means[k]) ** 2))
        lik.append(spec.weights[k] * math.exp(-d2 / (2 * v)))
    tot = sum(lik)
    r = np.array([w / tot for w in lik])
    x0 = sum(r[k] * spec.means[k] for k in range(len(spec)))
    return r, (z - s * x0) / math.sqrt(v)


def box_ratio_loop(A, mask, j):
    num = den = 0.0
    for r in range(A.shape[0]):
        for c in range(A.shape[1]):
            den += A[r, c, j]
            num += A[r, c, j] * mask[r, c]
    return num / den


def alignment_loss_loop(A_text, A_spat, masks):
    total = 0.0
    for A in (A_text, A_spat):
        for mask, j in masks:
            total += 1.0 - box_ratio_loop(A, mask, j)
    return total
