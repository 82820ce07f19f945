"""Independent straight-line reference implementations used as test oracles.

Everything here is written with explicit loops over plain floats so that it
shares no code path with the vectorised package implementation.
"""
import math

import numpy as np


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def normalised_partition(A):
    n = len(A)
    deg = [sum(A[i][j] for j in range(n)) for i in range(n)]
    inv = [1.0 / math.sqrt(d) if d > 0 else 0.0 for d in deg]
    return [[inv[i] * A[i][j] * inv[j] for j in range(n)] for i in range(n)]


def graph_conv_loops(X, partitions, W):
    """sum_k D^-1/2 A_k D^-1/2 X W_k by triple loops."""
    X = np.asarray(X, float)
    n, d_in = X.shape
    d_out = W.shape[2]
    out = np.zeros((n, d_out))
    for k, A in enumerate(partitions):
        An = normalised_partition(np.asarray(A, float).tolist())
        for i in range(n):
            for o in range(d_out):
                s = 0.0
                for j in range(n):
                    if An[i][j] == 0.0:
                        continue
                    for c in range(d_in):
                        s += An[i][j] * X[j, c] * W[k, c, o]
                out[i, o] += s
    return out


def attention_loops(Hh, W, Wh, Wq, bs, Us, bu):
    n, d = Hh.shape
    a = Wh.shape[1]
    summed = [sum(Hh[i, c] for i in range(n)) for c in range(d)]
    q = [max(0.0, sum(summed[c] * W[c, e] for c in range(d))) for e in range(d)]
    qa = [sum(q[e] * Wq[e, m] for e in range(d)) for m in range(a)]
    alpha = []
    for i in range(n):
        s = bu[0]
        for m in range(a):
            hm = sum(Hh[i, c] * Wh[c, m] for c in range(d)) + qa[m] + bs[m]
            s += math.tanh(hm) * Us[m, 0]
        alpha.append(sig(s))
    return np.array(alpha)


def cell_loops(X, H, C, partitions, gates, att):
    """``gates[g] = (Wx (K,d_in,d), Wh (K,d,d), b (d))`` for g in i, f, o, c."""
    pre = {}
    for g, (Wx, Wh_, b) in gates.items():
        pre[g] = graph_conv_loops(X, partitions, Wx) + graph_conv_loops(H, partitions, Wh_) + b
    n, d = pre["i"].shape
    C_new = np.zeros((n, d))
    Hh = np.zeros((n, d))
    for i in range(n):
        for c in range(d):
            ig = sig(pre["i"][i, c])
            fg = sig(pre["f"][i, c])
            og = sig(pre["o"][i, c])
            u = math.tanh(pre["c"][i, c])
            C_new[i, c] = fg * C[i, c] + ig * u
            Hh[i, c] = og * math.tanh(C_new[i, c])
    alpha = attention_loops(Hh, *att)
    H_new = np.array([[Hh[i, c] + alpha[i] * Hh[i, c] for c in range(d)] for i in range(n)])
    return H_new, C_new, Hh, alpha


def softmax_list(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def loss_loops(logits_g, logits_l, labels, alphas, lam, beta):
    """Composite loss for one sample: logits (T, C), labels (T,), alphas[j] (T_j, N)."""
    ce = 0.0
    for lg, ll, y in zip(logits_g, logits_l, labels):
        ce -= math.log(softmax_list(list(lg))[y])
        ce -= math.log(softmax_list(list(ll))[y])
    r1 = 0.0
    r2 = 0.0
    for a in alphas:
        Tj, N = len(a), len(a[0])
        for n in range(N):
            r1 += (1.0 - sum(a[t][n] for t in range(Tj)) / Tj) ** 2
        r2 += sum(sum(a[t][n] for n in range(N)) ** 2 for t in range(Tj)) / Tj
    return ce + lam * r1 + beta * r2


def pav(y, w=None):
    """Pool-adjacent-violators for a non-decreasing least-squares fit."""
    y = [float(v) for v in y]
    w = [1.0] * len(y) if w is None else [float(v) for v in w]
    blocks = []  # [value, weight, count]
    for v, wt in zip(y, w):
        blocks.append([v, wt, 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            v2, w2, c2 = blocks.pop()
            v1, w1, c1 = blocks.pop()
            blocks.append([(v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2, c1 + c2])
    out = []
    for v, _, c in blocks:
        out += [v] * c
    return np.array(out)


def closest_farthest(candidates, bound):
    """Reference rule: closest candidate within the bound, else the farthest one.

    Ties: smaller target index.
    """
    inside = [c for c in candidates if c[1] <= bound]
    if inside:
        best = inside[0]
        for c in inside[1:]:
            if c[1] < best[1] or (c[1] == best[1] and c[0] < best[0]):
                best = c
        return best
    best = candidates[0]
    for c in candidates[1:]:
        if c[1] > best[1] or (c[1] == best[1] and c[0] < best[0]):
            best = c
    return best
