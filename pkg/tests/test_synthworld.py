from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from grouprec.synthworld import (Impression, SplitError, UserRecord, WorldConfig, WorldConfigError,
                                 generate_world, label_low_activity, load_world, save_world, split_train_test,
                                 split_world, top_share, zipf_counts)

SMALL = dict(n_archetypes=20, n_users=400, n_items=300, n_categories=20, train_impressions=4000)


def test_same_seed_same_world(tmp_path):
    a = generate_world(WorldConfig(**SMALL), 3)
    b = generate_world(WorldConfig(**SMALL), 3)
    save_world(a, tmp_path / "a")
    save_world(b, tmp_path / "b")
    for name in ("users.jsonl", "items.jsonl", "impressions.jsonl", "archetypes.jsonl", "world.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seed_differs():
    a = generate_world(WorldConfig(**SMALL), 3)
    b = generate_world(WorldConfig(**SMALL), 4)
    assert a.impressions != b.impressions


def test_noise_zero_purchases_stay_in_archetype_support():
    w = generate_world(WorldConfig(**SMALL, noise_rate=0.0), 0)
    for u in w.users:
        support = set(np.flatnonzero(w.archetypes[u.archetype_id].category_affinity))
        assert all(c in support for _, c, _ in u.purchase_log)


def test_default_top18_share(default_world):
    train, _ = split_world(default_world)
    c = Counter(im.user_id for im in train)
    share = top_share([c.get(u.user_id, 0) for u in default_world.users])
    assert 0.85 <= share <= 0.95


def test_world_invariants(small_world):
    w = small_world
    for a in w.archetypes:
        assert abs(a.category_affinity.sum() - 1.0) < 1e-9
    for it in w.items:
        assert 0 <= it.category_id < w.config.n_categories and it.popularity > 0
    for u in w.users:
        ts = [t for _, _, t in u.purchase_log]
        assert ts == sorted(ts)
        assert u.activity_count == len(u.purchase_log)
        for i, c, _ in u.purchase_log:
            assert w.items[i].category_id == c
    assert {im.label for im in w.impressions} <= {0, 1}


def test_low_activity_users_miss_more_attributes(default_world):
    flags = label_low_activity(default_world.users)

    def rate(low):
        us = [u for u in default_world.users if flags[u.user_id] == low]
        return np.mean([v is None for u in us for v in u.static_attributes.values()])

    assert rate(True) > 2 * rate(False)


def test_categories_converge_for_active_users(default_world):
    w = default_world
    noise, C = w.config.noise_rate, w.config.n_categories

    def tv(u):
        expected = (1 - noise) * u.preference + noise / C
        counts = np.bincount([c for _, c, _ in u.purchase_log], minlength=C)
        return 0.5 * np.abs(counts / counts.sum() - expected).sum(), counts, expected

    users = sorted(w.users, key=lambda u: -u.activity_count)
    heavy = [tv(u)[0] for u in users[:30]]
    light = [tv(u)[0] for u in users if 5 <= u.activity_count <= 10]
    assert np.mean(heavy) < np.mean(light) / 2
    _, counts, expected = tv(users[0])
    # pool cells with tiny expectation into one so the chi-square approximation holds
    big = expected * counts.sum() >= 5
    obs = np.append(counts[big], counts[~big].sum())
    exp = np.append(expected[big], expected[~big].sum()) * counts.sum()
    assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_activity_histogram_monotone():
    c = zipf_counts(1000, 2.5, 200.0, 60000)
    assert np.all(np.diff(c) <= 0) and c.min() >= 1


def test_activity_monotone_in_rank(default_world):
    counts = sorted((u.activity_count for u in default_world.users), reverse=True)
    assert counts[0] > 10 * np.median(counts)


def test_invalid_configs_raise():
    for bad in ({"n_users": 0}, {"impression_zipf_exponent": 0.0}, {"noise_rate": 1.5},
                {"n_time_units": 1}, {"categories_per_archetype": 99, "n_categories": 10}):
        with pytest.raises(WorldConfigError):
            generate_world(WorldConfig(**{**SMALL, **bad}), 0)
    with pytest.raises(WorldConfigError):
        WorldConfig.from_dict({"n_userz": 3})


def _imp(t, u=0):
    return Impression(u, 0, t, 0)


def test_split_single_impression_errors():
    with pytest.raises(SplitError):
        split_train_test([_imp(1.0)])
    with pytest.raises(SplitError):
        split_train_test([])


def test_split_uniform_timestamps_last_unit_is_test():
    imps = [_imp(t) for t in np.linspace(0.0, 14.0, 1401)]
    train, test = split_train_test(imps)
    assert min(im.timestamp for im in test) == pytest.approx(13.0)
    assert max(im.timestamp for im in train) < 13.0


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=50))
def test_no_test_example_precedes_train(ts):
    imps = [_imp(t) for t in ts]
    try:
        train, test = split_train_test(imps)
    except SplitError:
        return
    assert max(im.timestamp for im in train) < min(im.timestamp for im in test)
    assert len(train) + len(test) == len(imps)


def test_world_split_is_final_day(small_world):
    train, test = split_world(small_world)
    assert max(im.timestamp for im in train) < 13.0 <= min(im.timestamp for im in test)
    # every user gets an evaluation slate
    assert len({im.user_id for im in test}) == small_world.config.n_users


def test_low_activity_fraction_and_ratio(default_world):
    flags = label_low_activity(default_world.users, 0.55)
    n = len(default_world.users)
    assert abs(sum(flags.values()) - 0.55 * n) <= 1
    act = np.array([u.activity_count for u in default_world.users])
    low = np.array([flags[u.user_id] for u in default_world.users])
    assert act[low].mean() / act.mean() == pytest.approx(0.19, abs=0.03)


def _user(uid, k):
    return UserRecord(uid, 0, {}, [(0, 0, float(t)) for t in range(k)], [])


def test_low_activity_ties_broken_by_user_id():
    users = [_user(i, 3) for i in range(10)]
    flags = label_low_activity(users, 0.55)
    assert [u for u, f in flags.items() if f] == [0, 1, 2, 3, 4]


@given(st.lists(st.integers(0, 20), min_size=1, max_size=40), st.floats(0.01, 0.99))
def test_low_activity_count_is_floor(acts, q):
    users = [_user(i, a) for i, a in enumerate(acts)]
    flags = label_low_activity(users, q)
    assert sum(flags.values()) == int(np.floor(q * len(users)))
    low = [a for a, u in zip(acts, users) if flags[u.user_id]]
    high = [a for a, u in zip(acts, users) if not flags[u.user_id]]
    if low and high:
        assert max(low) <= min(high)


def test_low_activity_rejects_bad_quantile():
    with pytest.raises(ValueError):
        label_low_activity([_user(0, 1)], 1.0)


def test_world_roundtrip(tmp_path, small_world):
    save_world(small_world, tmp_path)
    back = load_world(tmp_path)
    assert back.impressions == small_world.impressions
    assert [u.purchase_log for u in back.users] == [u.purchase_log for u in small_world.users]
    assert [u.static_attributes for u in back.users] == [u.static_attributes for u in small_world.users]
    assert back.config == small_world.config
    save_world(back, tmp_path / "again")
    assert (tmp_path / "users.jsonl").read_bytes() == (tmp_path / "again" / "users.jsonl").read_bytes()
