"""Slow reference implementations written with plain Python loops."""

import math


def nbnn_oracle(query, pools):
    best_label, best_total = None, math.inf
    for y, pool in enumerate(pools):
        total = 0.0
        for z in query:
            nearest = math.inf
            for s in pool:
                nearest = min(nearest, sum((a - b) ** 2 for a, b in zip(z, s)))
            total += nearest
        if total < best_total:
            best_label, best_total = y, total
    return best_label


def omega_oracle(z, prototypes, q):
    acc = 0.0
    for s in prototypes:
        dot = sum(a * b for a, b in zip(z, s))
        acc += max(0.0, dot) ** q
    return acc ** (1.0 / q)


def surrogate_oracle(scales, W, q, y):
    """Per-descriptor log-loss averaged within each scale, then across scales."""
    per_scale = []
    for scale in scales:
        losses = []
        for z in scale:
            u = [omega_oracle(z, W_c, q) for W_c in W]
            top = max(u)
            losses.append(-u[y] + top + math.log(sum(math.exp(v - top) for v in u)))
        per_scale.append(sum(losses) / len(losses))
    return sum(per_scale) / len(per_scale)
