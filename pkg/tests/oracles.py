"""Slow reference implementations used as independent oracles in tests."""

from __future__ import annotations

import itertools

import numpy as np


def unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_tensor(rng: np.random.Generator, L: int, P: int, Q: int, D: int) -> np.ndarray:
    return rng.standard_normal((L, P, Q, D))


def pair_stats(layer: np.ndarray) -> dict:
    """Enumerate every unordered pair of a ``(P, Q, D)`` grid of vectors."""
    P, Q, _ = layer.shape
    v = unit_rows(layer.astype(np.float64))
    cells = [(p, q) for p in range(P) for q in range(Q)]
    all_dots, within, cross = [], [], []
    for (p1, q1), (p2, q2) in itertools.combinations(cells, 2):
        d = float(np.dot(v[p1, q1], v[p2, q2]))
        all_dots.append(d)
        (within if q1 == q2 else cross).append(d)
    return {
        "A": float(np.mean(all_dots)),
        "gamma": float(np.mean(within)),
        "lam": float(np.mean(cross)),
        "n_total": len(all_dots),
        "n_within": len(within),
        "n_cross": len(cross),
    }


def question_mean_lambda(layer: np.ndarray) -> float:
    P, Q, _ = layer.shape
    v = unit_rows(layer.astype(np.float64))
    means = [v[:, q].mean(axis=0) for q in range(Q)]
    dots = [float(np.dot(means[a], means[b])) for a in range(Q) for b in range(Q) if a != b]
    return float(np.mean(dots))


def anova_loops(cells: np.ndarray) -> tuple[float, float, float, float]:
    """Two-way sums of squares with explicit loops over cells."""
    P, Q, _ = cells.shape
    grand = sum(cells[p, q] for p in range(P) for q in range(Q)) / (P * Q)
    rows = [sum(cells[p, q] for q in range(Q)) / Q for p in range(P)]
    cols = [sum(cells[p, q] for p in range(P)) / P for q in range(Q)]
    ss_t = sum(float(np.sum((cells[p, q] - grand) ** 2)) for p in range(P) for q in range(Q))
    ss_p = sum(Q * float(np.sum((rows[p] - grand) ** 2)) for p in range(P))
    ss_q = sum(P * float(np.sum((cols[q] - grand) ** 2)) for q in range(Q))
    ss_i = sum(
        float(np.sum((cells[p, q] - rows[p] - cols[q] + grand) ** 2)) for p in range(P) for q in range(Q)
    )
    return ss_p, ss_q, ss_i, ss_t


def best_clique(sim: np.ndarray, threshold: float) -> tuple[tuple[int, ...], bool]:
    """Enumerate all 2^P subsets as bitmasks and rank them by (size, mean cosine, -lexicographic)."""
    n = sim.shape[0]
    best = None
    for mask in range(1 << n):
        subset = tuple(i for i in range(n) if mask >> i & 1)
        if len(subset) < 2:
            continue
        pairs = [sim[i, j] for i, j in itertools.combinations(subset, 2)]
        if not all(s > threshold for s in pairs):
            continue
        key = (len(subset), float(np.mean(pairs)))
        if best is None or key > best[0] or (key == best[0] and subset < best[1]):
            best = (key, subset)
    if best is None:
        return tuple(range(n)), True
    return best[1], False


def pearson(x, y) -> float:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    xm, ym = x - x.mean(), y - y.mean()
    return float((xm * ym).sum() / np.sqrt((xm**2).sum() * (ym**2).sum()))


def average_ranks(x) -> np.ndarray:
    x = list(x)
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return np.array(ranks)
