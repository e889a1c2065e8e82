"""Brute-force references for the merge rules, written as plain scalar loops."""

import math
from fractions import Fraction


def overlap_merge(deltas, masks):
    """deltas, masks: lists of flat lists. Exact sum, divided by max(count, 1), rounded once."""
    out = []
    for j in range(len(deltas[0])):
        total = Fraction(0)
        count = 0
        for d, m in zip(deltas, masks):
            total += Fraction(d[j])
            count += 1 if m[j] else 0
        out.append(float(total / max(count, 1)))
    return out


def _by_magnitude(v):
    return sorted(range(len(v)), key=lambda i: (-abs(v[i]), i))


def ties(vectors, lam, trim):
    n = len(vectors[0])
    keep = math.floor(trim * n)
    trimmed = []
    for v in vectors:
        top = set(_by_magnitude(v)[:keep])
        trimmed.append([v[i] if i in top else 0.0 for i in range(n)])
    out = []
    for j in range(n):
        total = 0.0
        for t in trimmed:
            total += t[j]
        sign = 1.0 if total >= 0 else -1.0
        acc, cnt = 0.0, 0
        for t in trimmed:
            if t[j] * sign > 0:
                acc += t[j]
                cnt += 1
        out.append((acc / cnt if cnt else 0.0) * lam)
    return out


def breadcrumbs(vectors, lam, beta, gamma):
    n = len(vectors[0])
    n_top, n_bottom = math.floor(beta * n), math.floor(gamma * n)
    acc = [0.0] * n
    for v in vectors:
        order = _by_magnitude(v)
        kept = set(order[n_top : n - n_bottom])
        for j in range(n):
            acc[j] += v[j] if j in kept else 0.0
    return [a * lam for a in acc]
