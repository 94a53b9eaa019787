"""Independent re-implementations used as test oracles."""
import math


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_gru(p, x, h):
    """Straight-line gate equations, one unit at a time."""
    Wi, Wh, U, b = p.w_input.value, p.w_hidden.value, p.w_candidate.value, p.bias.value
    d = p.hidden_size
    z = [sig(sum(x[k] * Wi[k, j] for k in range(len(x))) + sum(h[k] * Wh[k, j] for k in range(d)) + b[j])
         for j in range(d)]
    r = [sig(sum(x[k] * Wi[k, d + j] for k in range(len(x))) + sum(h[k] * Wh[k, d + j] for k in range(d))
             + b[d + j]) for j in range(d)]
    cand = [math.tanh(sum(x[k] * Wi[k, 2 * d + j] for k in range(len(x)))
                      + sum(r[k] * h[k] * U[k, j] for k in range(d)) + b[2 * d + j]) for j in range(d)]
    return [(1 - z[j]) * h[j] + z[j] * cand[j] for j in range(d)]


def scalar_lstm(p, x, h, c):
    Wi, Wh, b = p.w_input.value, p.w_hidden.value, p.bias.value
    d = p.hidden_size

    def pre(col):
        return sum(x[k] * Wi[k, col] for k in range(len(x))) + sum(h[k] * Wh[k, col] for k in range(d)) + b[col]

    i = [sig(pre(j)) for j in range(d)]
    f = [sig(pre(d + j)) for j in range(d)]
    o = [sig(pre(2 * d + j)) for j in range(d)]
    g = [math.tanh(pre(3 * d + j)) for j in range(d)]
    c_new = [f[j] * c[j] + i[j] * g[j] for j in range(d)]
    return [o[j] * math.tanh(c_new[j]) for j in range(d)], c_new


def scalar_birnn(step, pf, pb, xs, init_f, init_b):
    """Forward and backward runs; returns (final, per-token rows)."""
    hf, fwd = list(init_f), []
    for x in xs:
        hf = step(pf, x, hf)
        fwd.append(hf)
    hb, bwd = list(init_b), [None] * len(xs)
    for m in range(len(xs) - 1, -1, -1):
        hb = step(pb, xs[m], hb)
        bwd[m] = hb
    return hf + hb, [f + b for f, b in zip(fwd, bwd)]


def brute_force_chunks(tags):
    """Every (slot, i, j) tested directly against the chunk definition."""
    n = len(tags)

    def starts(i, slot):
        if tags[i] == f"B-{slot}":
            return True
        return tags[i] == f"I-{slot}" and (i == 0 or tags[i - 1] not in (f"B-{slot}", f"I-{slot}"))

    slots = {t[2:] for t in tags if t != "O"}
    found = set()
    for slot in slots:
        for i in range(n):
            for j in range(i + 1, n + 1):
                if (starts(i, slot) and all(t == f"I-{slot}" for t in tags[i + 1:j])
                        and (j == n or tags[j] != f"I-{slot}")):
                    found.add((slot, i, j))
    return found


def brute_force_f1(preds, golds):
    tp = n_pred = n_gold = 0
    for p, g in zip(preds, golds):
        pc, gc = brute_force_chunks(p), brute_force_chunks(g)
        tp += len(pc & gc)
        n_pred += len(pc)
        n_gold += len(gc)
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_gold if n_gold else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0
