"""Brute-force reference implementations shared by the unit and acceptance tests."""
import itertools
import math
from collections import Counter

import numpy as np


def ward_oracle(X):
    """Greedy merging that recomputes every pairwise Ward cost from scratch."""
    clusters = {i: [i] for i in range(len(X))}
    merges = []
    while len(clusters) > 1:
        best = None
        for a, b in itertools.combinations(sorted(clusters), 2):
            A, B = X[clusters[a]], X[clusters[b]]
            na, nb = len(A), len(B)
            cost = na * nb / (na + nb) * ((A.mean(0) - B.mean(0)) ** 2).sum()
            if best is None or cost < best[2] - 1e-12:
                best = (a, b, cost)
        a, b, cost = best
        clusters[a] += clusters.pop(b)
        merges.append(best)
    return merges


def entropy_oracle(labels):
    n = len(labels)
    return -math.fsum(c / n * math.log(c / n) for c in Counter(labels).values())


def v_oracle(t, p):
    """V-measure from joint and marginal entropies."""
    t, p = list(t), list(p)
    joint = entropy_oracle(list(zip(t, p)))
    ht, hp = entropy_oracle(t), entropy_oracle(p)
    h = 1.0 if ht == 0 else 1.0 - (joint - hp) / ht
    c = 1.0 if hp == 0 else 1.0 - (joint - ht) / hp
    return h, c, 0.0 if h + c == 0 else 2 * h * c / (h + c)


def ari_oracle(t, p):
    pairs = list(itertools.combinations(range(len(t)), 2))
    same_t = np.array([t[i] == t[j] for i, j in pairs])
    same_p = np.array([p[i] == p[j] for i, j in pairs])
    index = float(np.sum(same_t & same_p))
    a, b, total = same_t.sum(), same_p.sum(), len(pairs)
    expected = a * b / total
    maximum = (a + b) / 2
    return 1.0 if maximum == expected else (index - expected) / (maximum - expected)


def hungarian_oracle(t, p):
    """Best one-to-one matching by trying every permutation."""
    ts, ps = sorted(set(t)), sorted(set(p))
    width = max(len(ts), len(ps))
    best = 0
    for perm in itertools.permutations(range(width)):
        hits = sum(1 for a, b in zip(t, p) if perm[ps.index(b)] < len(ts) and ts[perm[ps.index(b)]] == a)
        best = max(best, hits)
    return best / len(t)
