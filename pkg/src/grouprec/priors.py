"""Group-level priors: fused group-ID embeddings, attribute completion, group sequences."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .synthworld import CONTINUOUS_FIELDS, DISCRETE_FIELDS

OWN, GROUP, ABSENT = "own", "group", "absent"


# ---------------------------------------------------------------- group ID fusion


class GroupIdFusionNet:
    """Level tables E^(l), prefix fusion layers W^(l), b^(l), and an aggregation MLP.

    e_fuse^(1) = E^(1)[id^1]
    e_fuse^(l) = tanh([e_fuse^(l-1); E^(l)[id^l]] @ W^(l) + b^(l)),  l >= 2
    e_G        = l2_normalize(MLP([e_fuse^(1); ...; e_fuse^(M)]))
    The MLP has one ReLU hidden layer of width 2 * M * d_e.
    """

    def __init__(self, M: int, K: int, d_e: int = 16, d_g: int = 32, rng: np.random.Generator | None = None,
                 prefix: str = "gid"):
        rng = rng or np.random.default_rng(0)
        self.M, self.K, self.d_e, self.d_g = M, K, d_e, d_g
        p = {}
        for l in range(1, M + 1):
            p[f"{prefix}.E{l}"] = ag.parameter(rng.normal(0, 0.1, (K, d_e)))
        for l in range(2, M + 1):
            p[f"{prefix}.W{l}"] = ag.parameter(rng.normal(0, 1 / np.sqrt(2 * d_e), (2 * d_e, d_e)))
            p[f"{prefix}.b{l}"] = ag.parameter(np.zeros(d_e))
        h = 2 * M * d_e
        p[f"{prefix}.mlp_W1"] = ag.parameter(rng.normal(0, np.sqrt(2 / (M * d_e)), (M * d_e, h)))
        p[f"{prefix}.mlp_b1"] = ag.parameter(np.zeros(h))
        p[f"{prefix}.mlp_W2"] = ag.parameter(rng.normal(0, np.sqrt(1 / h), (h, d_g)))
        p[f"{prefix}.mlp_b2"] = ag.parameter(np.zeros(d_g))
        self.params = p
        self.prefix = prefix

    def _p(self, name):
        return self.params[f"{self.prefix}.{name}"]

    def levels(self, codes) -> list[ag.Tensor]:
        codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
        if codes.shape[1] != self.M:
            raise ValueError(f"group code length {codes.shape[1]} != M={self.M}")
        if codes.min() < 0 or codes.max() >= self.K:
            raise IndexError(f"group code index out of range [0, {self.K})")
        fused = [ag.gather_rows(self._p("E1"), codes[:, 0])]
        for l in range(2, self.M + 1):
            base = ag.gather_rows(self._p(f"E{l}"), codes[:, l - 1])
            x = ag.concat([fused[-1], base], axis=-1)
            fused.append(ag.tanh(ag.matmul(x, self._p(f"W{l}")) + self._p(f"b{l}")))
        return fused

    def __call__(self, codes) -> ag.Tensor:
        h = ag.concat(self.levels(codes), axis=-1) if self.M > 1 else self.levels(codes)[0]
        h = ag.relu(ag.matmul(h, self._p("mlp_W1")) + self._p("mlp_b1"))
        h = ag.matmul(h, self._p("mlp_W2")) + self._p("mlp_b2")
        return ag.l2_normalize(h)


def fuse_group_id(code, net: GroupIdFusionNet) -> ag.Tensor:
    """Fused, unit-norm representation of one group code (shape (d_g,))."""
    return ag.reshape(net(np.asarray(code)[None, :]), (net.d_g,))


# ---------------------------------------------------------------- group membership


def resolve_groups(codes: dict[int, tuple], min_members: int = 5) -> dict[int, tuple]:
    """Map each user to the finest code prefix with at least ``min_members`` members.

    Falls back one level at a time; level-1 groups are used regardless of size.
    """
    if not codes:
        return {}
    M = len(next(iter(codes.values())))
    counts = Counter()
    for c in codes.values():
        for l in range(1, M + 1):
            counts[tuple(c[:l])] += 1
    out = {}
    for uid, c in codes.items():
        for l in range(M, 0, -1):
            key = tuple(c[:l])
            if counts[key] >= min_members or l == 1:
                out[uid] = key
                break
    return out


def group_members(user_groups: dict[int, tuple]) -> dict[tuple, list[int]]:
    members = defaultdict(list)
    for uid in sorted(user_groups):
        members[user_groups[uid]].append(uid)
    return dict(members)


# ---------------------------------------------------------------- attribute completion


@dataclass
class GroupAttributePrior:
    values: dict  # field -> representative value, or None when no member observed it
    member_count: int


def complete_attributes(members, discrete=tuple(DISCRETE_FIELDS), continuous=CONTINUOUS_FIELDS) -> GroupAttributePrior:
    """Mode (ties -> smallest value) for discrete fields, mean for continuous fields."""
    if not members:
        raise ValueError("cannot build an attribute prior for an empty group")
    values = {}
    for f in discrete:
        obs = Counter(m.static_attributes.get(f) for m in members)
        obs.pop(None, None)
        if obs:
            top = max(obs.values())
            values[f] = min(v for v, n in obs.items() if n == top)
        else:
            values[f] = None
    for f in continuous:
        obs = [m.static_attributes.get(f) for m in members if m.static_attributes.get(f) is not None]
        values[f] = math.fsum(obs) / len(obs) if obs else None
    return GroupAttributePrior(values, len(members))


def apply_attribute_completion(user, prior: GroupAttributePrior) -> tuple[dict, dict]:
    """Fill the user's missing fields from the group prior.

    Returns (completed attributes, provenance) where provenance maps each field
    to "own", "group" or "absent".
    """
    completed, flags = {}, {}
    for f, gv in prior.values.items():
        v = user.static_attributes.get(f)
        if v is not None:
            completed[f], flags[f] = v, OWN
        elif gv is not None:
            completed[f], flags[f] = gv, GROUP
        else:
            completed[f], flags[f] = None, ABSENT
    return completed, flags


# ---------------------------------------------------------------- group sequences


@dataclass
class GroupSequence:
    entries: list  # (item_id, category_id, avg_purchase_timestamp), ascending timestamp
    top_categories: list = field(default_factory=list)


def build_group_sequence(members, k_cat: int = 10, max_len: int = 50) -> GroupSequence:
    """Most-purchased items from the group's top ``k_cat`` categories, ordered by mean purchase time.

    Ties: categories by lower id, items by lower id, equal mean timestamps by lower item id.
    """
    if not members:
        raise ValueError("cannot build a sequence for an empty group")
    cat_counts = Counter()
    item_counts = Counter()
    item_times = defaultdict(list)
    item_cat = {}
    for m in members:
        for item, cat, t in m.purchase_log:
            cat_counts[cat] += 1
            item_counts[item] += 1
            item_times[item].append(t)
            item_cat[item] = cat
    if not cat_counts:
        return GroupSequence([], [])
    top = sorted(cat_counts, key=lambda c: (-cat_counts[c], c))[:k_cat]
    top_set = set(top)
    cand = sorted((i for i in item_counts if item_cat[i] in top_set), key=lambda i: (-item_counts[i], i))[:max_len]
    entries = [(i, item_cat[i], math.fsum(item_times[i]) / len(item_times[i])) for i in cand]
    entries.sort(key=lambda e: (e[2], e[0]))
    return GroupSequence(entries, top)


# ---------------------------------------------------------------- bundle


@dataclass
class GroupPriors:
    user_codes: dict  # user_id -> full M-level code
    user_groups: dict  # user_id -> resolved group key (code prefix)
    attributes: dict  # group key -> GroupAttributePrior
    sequences: dict  # group key -> GroupSequence
    M: int
    K: int

    def for_user(self, user_id: int):
        key = self.user_groups.get(user_id)
        if key is None or key not in self.attributes:
            raise KeyError(f"no group prior for user {user_id} (group {key})")
        return key, self.attributes[key], self.sequences[key]


def build_priors(users, codes: dict[int, tuple], K: int, k_cat: int = 10, max_len: int = 50,
                 min_members: int = 5) -> GroupPriors:
    by_id = {u.user_id: u for u in users}
    user_groups = resolve_groups(codes, min_members)
    attrs, seqs = {}, {}
    for key, uids in sorted(group_members(user_groups).items()):
        mem = [by_id[u] for u in uids]
        attrs[key] = complete_attributes(mem)
        seqs[key] = build_group_sequence(mem, k_cat, max_len)
    M = len(next(iter(codes.values())))
    return GroupPriors(dict(codes), user_groups, attrs, seqs, M, K)


# priors.jsonl: header {"M", "K"}; then per group
#   {"group": [...], "members": n, "attributes": {...}, "top_categories": [...], "sequence": [[item, cat, t], ...]}
# then per user {"user_id": u, "code": [...], "group": [...]}


def save_priors(priors: GroupPriors, path: str | Path):
    with Path(path).open("w", encoding="utf-8") as f:
        f.write(json.dumps({"M": priors.M, "K": priors.K}) + "\n")
        for key in sorted(priors.attributes):
            a, s = priors.attributes[key], priors.sequences[key]
            f.write(json.dumps({"group": list(key), "members": a.member_count, "attributes": a.values,
                                "top_categories": s.top_categories,
                                "sequence": [[i, c, t] for i, c, t in s.entries]}) + "\n")
        for uid in sorted(priors.user_codes):
            f.write(json.dumps({"user_id": uid, "code": list(priors.user_codes[uid]),
                                "group": list(priors.user_groups[uid])}) + "\n")


def load_priors(path: str | Path) -> GroupPriors:
    with Path(path).open(encoding="utf-8") as f:
        head = json.loads(f.readline())
        attrs, seqs, codes, groups = {}, {}, {}, {}
        for line in f:
            r = json.loads(line)
            if "group" in r and "members" in r:
                key = tuple(r["group"])
                attrs[key] = GroupAttributePrior(r["attributes"], r["members"])
                seqs[key] = GroupSequence([(int(i), int(c), float(t)) for i, c, t in r["sequence"]],
                                          r["top_categories"])
            else:
                codes[r["user_id"]] = tuple(r["code"])
                groups[r["user_id"]] = tuple(r["group"])
    return GroupPriors(codes, groups, attrs, seqs, head["M"], head["K"])
