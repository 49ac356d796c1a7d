"""Pure-python reference computations (no numpy, no torch, no package imports).

Their printed values are frozen into the test-suite as literals; the tests
also call these functions directly so a drift on either side is caught.
"""

import itertools
import math


def log_decay(delta):
    return 1.0 / math.log(math.e + delta)


def cross_entropy(logits, true):
    m = max(logits)
    z = sum(math.exp(x - m) for x in logits)
    return -(logits[true] - m - math.log(z))


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def cosine(a, b):
    return dot(a, b) / math.sqrt(dot(a, a) * dot(b, b))


def nt_xent(reps, positives, tau):
    """Mean over anchors of -log softmax over all non-self similarities."""
    total = 0.0
    for i, r in enumerate(reps):
        sims = {j: cosine(r, s) / tau for j, s in enumerate(reps) if j != i}
        denom = sum(math.exp(v) for v in sims.values())
        total += -math.log(math.exp(sims[positives[i]]) / denom)
    return total / len(reps)


def pair_auc(y, scores):
    pos = [s for s, t in zip(scores, y) if t == 1]
    neg = [s for s, t in zip(scores, y) if t == 0]
    good = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return good / (len(pos) * len(neg))


def zscores(values):
    mu = sum(values) / len(values)
    sd = math.sqrt(sum((v - mu) ** 2 for v in values) / len(values))
    return [(v - mu) / sd for v in values]


def transfer_counts(corpus):
    out_count, pair_count = {}, {}
    for seq in corpus:
        for a in seq:
            out_count[a] = out_count.get(a, 0) + 1
        for a, b in zip(seq, seq[1:]):
            pair_count[(a, b)] = pair_count.get((a, b), 0) + 1
    return {k: v / out_count[k[0]] for k, v in pair_count.items()}


def leaky(x, slope=0.2):
    return x if x >= 0 else slope * x


def elu(x):
    return x if x > 0 else math.exp(x) - 1.0


def gat_line_graph():
    """Single head, all-ones W1..W5, scalar width: e_ij = sum(h_i) + sum(h_j) + p_ij.

    Graph 0 -> 1 -> 2 with self loops (p = 0 on loops).
    """
    h = [[1.0, 0.0], [0.0, 1.0], [-3.0, 0.5]]
    p = {(0, 1): 1.0, (1, 2): 0.5}
    nbrs = {0: [0, 1], 1: [1, 2], 2: [2]}
    alpha, out = {}, []
    for i, js in nbrs.items():
        e = {j: leaky(sum(h[i]) + sum(h[j]) + p.get((i, j), 0.0)) for j in js}
        z = sum(math.exp(v) for v in e.values())
        for j in js:
            alpha[(i, j)] = math.exp(e[j]) / z
        out.append(elu(sum(alpha[(i, j)] * sum(h[j]) for j in js)))
    return h, p, alpha, out


def simple_paths(edges, src, dst, weight):
    nodes = sorted({a for a, _ in edges} | {b for _, b in edges})
    succ = {v: sorted(b for a, b in edges if a == v) for v in nodes}
    found = []
    for n in range(1, len(nodes) + 1):
        for middle in itertools.permutations([v for v in nodes if v not in (src, dst)], max(0, n - 2)):
            path = (src,) + middle + ((dst,) if n >= 2 else ())
            if n == 1 and src != dst:
                continue
            if all(b in succ.get(a, ()) for a, b in zip(path, path[1:])):
                found.append((sum(weight[v] for v in path), path))
    return sorted(set(found))


if __name__ == "__main__":
    print("log_decay(10)", repr(log_decay(10)))
    print("ce uniform 24", repr(cross_entropy([0.0] * 24, 5)), repr(math.log(24)))
    print("ce [1,0]", repr(cross_entropy([1.0, 0.0], 0)))
    print("nt_xent", repr(nt_xent([[1, 0], [1, 0], [0, 1], [0, 1]], [1, 0, 3, 2], 1.0)))
    print("auc", pair_auc([1, 0, 1, 0], [0.9, 0.8, 0.4, 0.1]))
    print("z", zscores([100.0, 200.0]))
    print("trans", transfer_counts([["A", "B", "C"], ["A", "B", "D"]]))
    _, _, a, o = gat_line_graph()
    print("gat alpha", {k: repr(v) for k, v in a.items()})
    print("gat out", [repr(v) for v in o])
    print("elu(-2)", repr(elu(-2.0)))
    print("diamond", simple_paths([(0, 1), (0, 2), (1, 3), (2, 3)], 0, 3, {0: 1, 1: 1, 2: 3, 3: 3}))
