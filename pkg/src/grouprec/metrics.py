"""AUC, GAUC and activity stratification."""

from __future__ import annotations

from collections import defaultdict

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with ties counted one half; None when only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks handle ties
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def per_user_auc(user_ids, scores, labels) -> dict[int, tuple[float, int]]:
    """user_id -> (auc, impression count) for users whose examples contain both classes."""
    groups = defaultdict(list)
    for i, u in enumerate(np.asarray(user_ids).tolist()):
        groups[u].append(i)
    s, y = np.asarray(scores), np.asarray(labels)
    out = {}
    for u, idx in groups.items():
        a = auc(s[idx], y[idx])
        if a is not None:
            out[u] = (a, len(idx))
    return out


def gauc(user_ids, scores, labels, restrict=None) -> float | None:
    """Impression-weighted mean of per-user AUCs over users with both classes.

    ``restrict`` optionally limits the average to a set of user ids.
    """
    per = per_user_auc(user_ids, scores, labels)
    if restrict is not None:
        restrict = set(restrict)
        per = {u: v for u, v in per.items() if u in restrict}
    if not per:
        return None
    w = np.array([n for _, n in per.values()], dtype=np.float64)
    a = np.array([x for x, _ in per.values()])
    return float((w * a).sum() / w.sum())


def stratify_by_activity(activity: dict[int, int], n_levels: int = 5) -> dict[int, int]:
    """Equal-size activity levels 1..n_levels (1 = least active); ties ordered by user_id."""
    if n_levels < 2:
        raise ValueError("n_levels must be >= 2")
    if len(activity) < n_levels:
        raise ValueError(f"{len(activity)} users cannot fill {n_levels} levels")
    order = sorted(activity, key=lambda u: (activity[u], u))
    bounds = np.linspace(0, len(order), n_levels + 1).round().astype(int)
    levels = {}
    for lvl in range(n_levels):
        for u in order[bounds[lvl]:bounds[lvl + 1]]:
            levels[u] = lvl + 1
    return levels
