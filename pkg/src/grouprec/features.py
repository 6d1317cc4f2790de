"""Turn users, group priors and impressions into dense index/feature arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .priors import ABSENT, GROUP, OWN, GroupPriors, apply_attribute_completion
from .synthworld import CONTINUOUS_FIELDS, DISCRETE_FIELDS

ATTR_FIELDS = (*DISCRETE_FIELDS, *CONTINUOUS_FIELDS)
PROVENANCE = (OWN, GROUP, ABSENT)
N_CONTEXT = 7
INCOME_CENTER, INCOME_SCALE = 50.0, 20.0


def _encode_attrs(values: dict) -> tuple[np.ndarray, np.ndarray]:
    """Discrete fields -> index (missing = cardinality); continuous -> (scaled value, missing flag)."""
    disc = np.array([values.get(f) if values.get(f) is not None else k for f, k in DISCRETE_FIELDS.items()],
                    dtype=np.int64)
    cont = []
    for f in CONTINUOUS_FIELDS:
        v = values.get(f)
        cont.extend([0.0, 1.0] if v is None else [(v - INCOME_CENTER) / INCOME_SCALE, 0.0])
    return disc, np.array(cont)


@dataclass
class UserTable:
    """Per-user arrays indexed by user_id."""

    attr_disc: np.ndarray  # (U, F_d)
    attr_cont: np.ndarray  # (U, 2 * F_c)
    seq_items: np.ndarray  # (U, L_u) most recent purchases, padded with 0
    seq_mask: np.ndarray  # (U, L_u) bool
    activity: np.ndarray  # (U,) purchase counts
    reliability: np.ndarray  # (U, 3) activity features for the reliability network


@dataclass
class GroupTable:
    """Per-group arrays (row = group index) plus user -> group maps."""

    keys: list
    user_group: np.ndarray  # (U,) group row
    user_code: np.ndarray  # (U, M) full code
    attr_disc: np.ndarray  # (G, F_d)
    attr_cont: np.ndarray  # (G, 2 * F_c)
    seq_items: np.ndarray  # (G, L_g)
    seq_mask: np.ndarray  # (G, L_g)
    provenance: np.ndarray  # (U, 3 * F) one-hot own/group/absent per field
    completeness: np.ndarray  # (U,) share of fields the user observed


def build_user_table(users, max_seq: int = 30) -> UserTable:
    n = max(u.user_id for u in users) + 1
    fd, fc = len(DISCRETE_FIELDS), 2 * len(CONTINUOUS_FIELDS)
    disc = np.zeros((n, fd), dtype=np.int64)
    cont = np.zeros((n, fc))
    seq = np.zeros((n, max_seq), dtype=np.int64)
    mask = np.zeros((n, max_seq), dtype=bool)
    act = np.zeros(n, dtype=np.int64)
    for u in users:
        disc[u.user_id], cont[u.user_id] = _encode_attrs(u.static_attributes)
        recent = [i for i, _, _ in u.purchase_log[-max_seq:]]
        seq[u.user_id, :len(recent)] = recent
        mask[u.user_id, :len(recent)] = True
        act[u.user_id] = u.activity_count
    observed = np.array([[u.static_attributes.get(f) is not None for f in ATTR_FIELDS] for u in users]).mean(axis=1)
    comp = np.zeros(n)
    comp[[u.user_id for u in users]] = observed
    max_act = max(int(act.max()), 1)
    rel = np.stack([np.log1p(act) / np.log1p(max_act), mask.sum(1) / max_seq, comp], axis=1)
    return UserTable(disc, cont, seq, mask, act, rel)


def build_group_table(users, priors: GroupPriors, max_seq: int = 50) -> GroupTable:
    keys = sorted(priors.attributes)
    row = {k: i for i, k in enumerate(keys)}
    n = max(u.user_id for u in users) + 1
    fd, fc = len(DISCRETE_FIELDS), 2 * len(CONTINUOUS_FIELDS)
    G = len(keys)
    disc = np.zeros((G, fd), dtype=np.int64)
    cont = np.zeros((G, fc))
    seq = np.zeros((G, max_seq), dtype=np.int64)
    mask = np.zeros((G, max_seq), dtype=bool)
    for k, i in row.items():
        disc[i], cont[i] = _encode_attrs(priors.attributes[k].values)
        items = [e[0] for e in priors.sequences[k].entries[:max_seq]]
        seq[i, :len(items)] = items
        mask[i, :len(items)] = True
    ug = np.zeros(n, dtype=np.int64)
    uc = np.zeros((n, priors.M), dtype=np.int64)
    prov = np.zeros((n, 3 * len(ATTR_FIELDS)))
    comp = np.zeros(n)
    for u in users:
        key = priors.user_groups.get(u.user_id)
        if key is None or key not in row:
            code = priors.user_codes.get(u.user_id)
            raise KeyError(f"missing group prior for user {u.user_id} (group code {code})")
        ug[u.user_id] = row[key]
        uc[u.user_id] = priors.user_codes[u.user_id]
        _, flags = apply_attribute_completion(u, priors.attributes[key])
        for j, f in enumerate(ATTR_FIELDS):
            prov[u.user_id, 3 * j + PROVENANCE.index(flags[f])] = 1.0
        comp[u.user_id] = np.mean([flags[f] == OWN for f in ATTR_FIELDS])
    return GroupTable(keys, ug, uc, disc, cont, seq, mask, prov, comp)


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    context: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "Batch":
        return Batch(self.users[idx], self.items[idx], self.context[idx], self.labels[idx])


def impressions_to_batch(impressions) -> Batch:
    u = np.array([im.user_id for im in impressions], dtype=np.int64)
    i = np.array([im.item_id for im in impressions], dtype=np.int64)
    ctx = np.array([int(im.timestamp) % N_CONTEXT for im in impressions], dtype=np.int64)
    y = np.array([im.label for im in impressions], dtype=np.float64)
    return Batch(u, i, ctx, y)
