"""Slow, literal reference implementations used to check the vectorized code."""
import math


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def normalize(v):
    n = math.sqrt(dot(v, v))
    return [x / n for x in v]


def gram(cols):
    return [[dot(a, b) for b in cols] for a in cols]


def columns(F):
    return [list(map(float, F[:, j])) for j in range(F.shape[1])]


def kernel(s, b, C):
    delta = 2.0 / (C - 1)
    center = 1.0 - b * delta
    return max(1.0 - abs(s - center) / delta, 0.0)


def query_ap(scores, labels, C, query=None):
    """Quantized AP of one row with explicit loops over bins and candidates."""
    h = [0.0] * C
    hp = [0.0] * C
    n_pos = 0
    for i, (s, y) in enumerate(zip(scores, labels)):
        if i == query:
            continue
        s = min(max(s, -1.0), 1.0)
        n_pos += y
        for b in range(C):
            p = kernel(s, b, C)
            h[b] += p
            hp[b] += p * y
    if n_pos == 0:
        return None
    ap = 0.0
    H = Hp = 0.0
    for b in range(C):
        H += h[b]
        Hp += hp[b]
        pr = Hp / H if H > 0 else 0.0
        ap += pr * hp[b] / n_pos
    return ap


def batch_loss(S, Y, C):
    terms = []
    for q in range(len(S)):
        ap = query_ap(S[q], Y[q], C, query=q)
        if ap is not None:
            terms.append(1.0 - ap)
    return sum(terms) / len(terms)


def threshold_sets(S, tau):
    n = len(S)
    return [{z for z in range(n) if z != q and S[q][z] > tau} for q in range(n)]


def mixup_union(sets, partners):
    """One union step for every mixed index, then symmetric closure."""
    B = len(partners)
    out = [set(s) for s in sets]
    for k, r in enumerate(partners):
        m = B + k
        out[m] = out[m] | sets[k] | sets[r]
    for q in range(len(out)):
        for z in list(out[q]):
            out[z].add(q)
    for q in range(len(out)):
        out[q].discard(q)
    return out


def precision_at_k(rel, k):
    hits = 0
    for i in range(k):
        if i < len(rel) and rel[i]:
            hits += 1
    return hits / k


def exact_ap(scores, labels):
    """AP by sorting candidates by decreasing score."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total += hits / rank
    return total / hits


def adam_scalar(p, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, wd=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        p = p - lr * wd * p
        p = p - lr * (m / (1 - beta1**t)) / (math.sqrt(v / (1 - beta2**t)) + eps)
    return p
