"""Seeded synthetic e-commerce world with planted user archetypes.

Users are ranked by a latent activity level. Training-period exposures follow
an offset Zipf law over that rank (a small head holds most interactions) and
purchase counts follow a milder offset Zipf law, so the bottom of the ranking
is sparse in both. Every user also receives a fixed evaluation slate on the
final time unit so per-user ranking metrics are defined for sparse users.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

DISCRETE_FIELDS = {"gender": 2, "age_bucket": 7, "city_tier": 5, "occupation": 8}
CONTINUOUS_FIELDS = ("income",)


class WorldConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_archetypes: int = 200
    n_users: int = 5000
    n_items: int = 2000
    n_categories: int = 50
    n_time_units: int = 14
    categories_per_archetype: int = 6
    # training-period exposures per user ~ (rank + offset) ** -exponent
    impression_zipf_exponent: float = 2.5
    impression_zipf_offset: float = 200.0
    train_impressions: int = 60000
    # purchase history length per user ~ (rank + offset) ** -exponent
    purchase_zipf_exponent: float = 2.5
    purchase_zipf_offset: float = 1000.0
    mean_purchases: float = 10.0
    eval_slate_size: int = 12
    noise_rate: float = 0.05
    personal_deviation: float = 0.8
    attribute_fidelity: float = 0.8
    low_activity_fraction: float = 0.55
    missing_rate_low: float = 0.35
    missing_rate_high: float = 0.10
    mean_queries: float = 4.0
    preferred_exposure_share: float = 0.5
    affinity_weight: float = 1.0
    popularity_weight: float = 0.4
    base_conversion_logit: float = -2.5

    def validate(self):
        counts = ("n_archetypes", "n_users", "n_items", "n_categories", "n_time_units",
                  "categories_per_archetype", "train_impressions", "eval_slate_size")
        for name in counts:
            if getattr(self, name) <= 0:
                raise WorldConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.impression_zipf_exponent <= 0 or self.purchase_zipf_exponent <= 0:
            raise WorldConfigError("Zipf exponents must be positive")
        if self.n_time_units < 2:
            raise WorldConfigError("need at least two time units for a temporal split")
        if self.categories_per_archetype > self.n_categories:
            raise WorldConfigError("categories_per_archetype exceeds n_categories")
        if self.n_items < self.n_categories:
            raise WorldConfigError("need at least one item per category")
        for name in ("noise_rate", "attribute_fidelity", "missing_rate_low", "missing_rate_high",
                     "preferred_exposure_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise WorldConfigError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.low_activity_fraction < 1.0:
            raise WorldConfigError("low_activity_fraction must lie in (0, 1)")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise WorldConfigError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Archetype:
    id: int
    category_affinity: np.ndarray
    attribute_profile: dict
    conversion_bias: float


@dataclass(frozen=True)
class Item:
    item_id: int
    category_id: int
    popularity: float


@dataclass
class UserRecord:
    user_id: int
    archetype_id: int
    static_attributes: dict  # field -> value or None when missing
    purchase_log: list  # (item_id, category_id, timestamp), nondecreasing timestamps
    search_queries: list  # (tokens tuple, timestamp)
    preference: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def activity_count(self) -> int:
        return len(self.purchase_log)


@dataclass(frozen=True)
class Impression:
    user_id: int
    item_id: int
    timestamp: float
    label: int


@dataclass
class World:
    config: WorldConfig
    seed: int
    archetypes: list
    items: list
    users: list
    impressions: list

    @property
    def item_categories(self) -> np.ndarray:
        return np.array([it.category_id for it in self.items], dtype=np.int64)

    @property
    def item_popularity(self) -> np.ndarray:
        return np.array([it.popularity for it in self.items])


def category_name(c: int) -> str:
    return f"cat{c:03d}"


def zipf_counts(n: int, exponent: float, offset: float, total: float, floor: int = 1) -> np.ndarray:
    """Deterministic per-rank counts round(A * (rank + offset) ** -exponent), scaled to ``total``."""
    base = (np.arange(n) + offset) ** (-exponent)
    counts = np.round(base * (total / base.sum())).astype(np.int64)
    return np.maximum(counts, floor)


def conversion_logit(cfg: WorldConfig, bias: float, category_preference, centered_log_popularity):
    """True conversion logit for exposures given the user's preference mass on each item's category."""
    pref = np.asarray(category_preference) * cfg.n_categories
    return (cfg.base_conversion_logit + bias + cfg.affinity_weight * np.sqrt(pref)
            + cfg.popularity_weight * np.asarray(centered_log_popularity))


def generate_world(config: WorldConfig | None = None, seed: int = 0) -> World:
    cfg = (config or WorldConfig()).validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    C = cfg.n_categories

    # items: categories dealt round-robin so each category is populated
    perm = rng.permutation(cfg.n_items)
    item_cat = perm % C
    pop = rng.lognormal(0.0, 1.0, size=cfg.n_items)
    items = [Item(i, int(item_cat[i]), float(pop[i])) for i in range(cfg.n_items)]
    cat_items = [np.flatnonzero(item_cat == c) for c in range(C)]
    width = max(len(ix) for ix in cat_items)
    cat_size = np.array([len(ix) for ix in cat_items])
    cat_table = np.zeros((C, width), dtype=np.int64)
    cat_cum = np.ones((C, width))
    for c, ix in enumerate(cat_items):
        cat_table[c, : len(ix)] = ix
        cat_cum[c, : len(ix)] = np.cumsum(pop[ix]) / pop[ix].sum()
    pop_mean = float(np.log(pop).mean())
    logpop = np.log(pop) - pop_mean

    archetypes = []
    for a in range(cfg.n_archetypes):
        support = rng.choice(C, size=cfg.categories_per_archetype, replace=False)
        w = rng.dirichlet(np.full(len(support), 1.5))
        aff = np.zeros(C)
        aff[support] = w
        profile = {f: int(rng.integers(k)) for f, k in DISCRETE_FIELDS.items()}
        profile["income"] = float(np.round(rng.normal(50.0, 15.0), 3))
        archetypes.append(Archetype(a, aff, profile, float(rng.normal(0.0, 0.3))))

    n = cfg.n_users
    rank_of_user = rng.permutation(n)  # rank 0 = most active
    n_purchases = zipf_counts(n, cfg.purchase_zipf_exponent, cfg.purchase_zipf_offset, cfg.mean_purchases * n)
    n_exposures = zipf_counts(n, cfg.impression_zipf_exponent, cfg.impression_zipf_offset, cfg.train_impressions)
    low_cut = int(np.floor(cfg.low_activity_fraction * n))
    train_end = cfg.n_time_units - 1

    users = []
    impressions = []
    for u in range(n):
        rank = int(rank_of_user[u])
        arch = archetypes[int(rng.integers(cfg.n_archetypes))]
        support = np.flatnonzero(arch.category_affinity)
        pref = np.zeros(C)
        pref[support] = arch.category_affinity[support] * rng.lognormal(0.0, cfg.personal_deviation, len(support))
        pref /= pref.sum()

        is_low = rank >= n - low_cut
        miss = cfg.missing_rate_low if is_low else cfg.missing_rate_high
        attrs = {}
        for f, k in DISCRETE_FIELDS.items():
            v = arch.attribute_profile[f] if rng.random() < cfg.attribute_fidelity else int(rng.integers(k))
            attrs[f] = None if rng.random() < miss else v
        inc = float(np.round(arch.attribute_profile["income"] + rng.normal(0.0, 5.0), 3))
        attrs["income"] = None if rng.random() < miss else inc

        k = int(n_purchases[rank])
        noisy = rng.random(k) < cfg.noise_rate
        cats = np.where(noisy, rng.integers(C, size=k), rng.choice(C, size=k, p=pref))
        ts = np.sort(np.round(rng.uniform(0, train_end, size=k), 3))
        # popularity-weighted item within category
        pos = (cat_cum[cats] < rng.random(k)[:, None]).sum(axis=1)
        bought = cat_table[cats, np.minimum(pos, cat_size[cats] - 1)]
        log = [(int(i), int(c), float(t)) for i, c, t in zip(bought, cats, ts)]

        nq = int(rng.poisson(cfg.mean_queries))
        qcats = rng.choice(C, size=nq, p=arch.category_affinity)
        qts = np.sort(np.round(rng.uniform(0, train_end, size=nq), 3))
        queries = [((category_name(int(c)),), float(t)) for c, t in zip(qcats, qts)]

        users.append(UserRecord(u, arch.id, attrs, log, queries, preference=pref))

        def expose(count, lo, hi):
            pref_mask = rng.random(count) < cfg.preferred_exposure_share
            ecats = np.where(pref_mask, rng.choice(C, size=count, p=pref), rng.integers(C, size=count))
            ets = np.round(rng.uniform(lo, hi, size=count), 3)
            shown = cat_table[ecats, (rng.random(count) * cat_size[ecats]).astype(np.int64)]
            z = conversion_logit(cfg, arch.conversion_bias, pref[ecats], logpop[shown])
            ys = rng.random(count) < 1.0 / (1.0 + np.exp(-z))
            impressions.extend(Impression(u, int(i), float(t), int(y)) for i, t, y in zip(shown, ets, ys))

        expose(int(n_exposures[rank]), 0.0, train_end)
        expose(cfg.eval_slate_size, train_end, cfg.n_time_units)

    impressions.sort(key=lambda im: (im.timestamp, im.user_id, im.item_id))
    return World(cfg, seed, archetypes, items, users, impressions)


class SplitError(ValueError):
    pass


def split_train_test(impressions, train_units: float = 13.0, test_units: float = 1.0):
    """Temporal split: the final ``test_units`` of the observed time span go to test.

    The cutoff is placed at ``t_min + span * train_units / (train_units + test_units)``;
    training examples have timestamp < cutoff, test examples are >= cutoff.
    """
    if not impressions:
        raise SplitError("no impressions to split")
    ts = np.array([im.timestamp for im in impressions])
    t0, t1 = float(ts.min()), float(ts.max())
    span = t1 - t0
    if span <= 0:
        raise SplitError("all impressions share one timestamp; a temporal split has an empty side")
    cutoff = t0 + span * train_units / (train_units + test_units)
    train = [im for im, t in zip(impressions, ts) if t < cutoff]
    test = [im for im, t in zip(impressions, ts) if t >= cutoff]
    if not train or not test:
        raise SplitError(f"temporal split left an empty side (train={len(train)}, test={len(test)})")
    return train, test


def split_world(world: World):
    """Split at the start of the final time unit (the world's evaluation day)."""
    cutoff = world.config.n_time_units - 1
    train = [im for im in world.impressions if im.timestamp < cutoff]
    test = [im for im in world.impressions if im.timestamp >= cutoff]
    if not train or not test:
        raise SplitError("world split left an empty side")
    return train, test


def label_low_activity(users, quantile: float = 0.55) -> dict[int, bool]:
    """Flag the floor(quantile * N) lowest-activity users; ties broken by user_id."""
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile}")
    order = sorted(users, key=lambda u: (u.activity_count, u.user_id))
    k = int(np.floor(quantile * len(order)))
    flagged = {u.user_id for u in order[:k]}
    return {u.user_id: u.user_id in flagged for u in users}


def top_share(counts, fraction: float = 0.18) -> float:
    counts = np.sort(np.asarray(counts, dtype=np.float64))[::-1]
    k = int(round(fraction * len(counts)))
    return float(counts[:k].sum() / counts.sum())


# ---------------------------------------------------------------- line-delimited records
#
# users.jsonl:       {"user_id", "archetype_id", "static_attributes", "purchase_log", "search_queries"}
# items.jsonl:       {"item_id", "category_id", "popularity"}
# impressions.jsonl: {"user_id", "item_id", "timestamp", "label"}
# archetypes.jsonl:  {"id", "category_affinity", "attribute_profile", "conversion_bias"}
# Keys appear in exactly that order; one record per line, UTF-8.


def _dump(records, path: Path):
    with path.open("w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _load(path: Path):
    with path.open(encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def save_world(world: World, directory: str | Path):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _dump(({"user_id": u.user_id, "archetype_id": u.archetype_id,
            "static_attributes": {k: u.static_attributes[k] for k in (*DISCRETE_FIELDS, *CONTINUOUS_FIELDS)},
            "purchase_log": [list(p) for p in u.purchase_log],
            "search_queries": [[list(q), t] for q, t in u.search_queries]} for u in world.users),
          d / "users.jsonl")
    _dump((asdict(it) for it in world.items), d / "items.jsonl")
    _dump((asdict(im) for im in world.impressions), d / "impressions.jsonl")
    _dump(({"id": a.id, "category_affinity": [float(x) for x in a.category_affinity],
            "attribute_profile": a.attribute_profile, "conversion_bias": a.conversion_bias}
           for a in world.archetypes), d / "archetypes.jsonl")
    (d / "world.json").write_text(json.dumps({"seed": world.seed, "config": asdict(world.config)}, indent=1) + "\n")


def load_world(directory: str | Path) -> World:
    d = Path(directory)
    meta = json.loads((d / "world.json").read_text())
    cfg = WorldConfig.from_dict(meta["config"])
    users = [UserRecord(r["user_id"], r["archetype_id"], r["static_attributes"],
                        [(int(i), int(c), float(t)) for i, c, t in r["purchase_log"]],
                        [(tuple(q), float(t)) for q, t in r["search_queries"]])
             for r in _load(d / "users.jsonl")]
    items = [Item(**r) for r in _load(d / "items.jsonl")]
    imps = [Impression(**r) for r in _load(d / "impressions.jsonl")]
    archs = [Archetype(r["id"], np.asarray(r["category_affinity"]), r["attribute_profile"], r["conversion_bias"])
             for r in _load(d / "archetypes.jsonl")]
    return World(cfg, meta["seed"], archs, items, users, imps)
