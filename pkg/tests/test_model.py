import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from grouprec import autograd as ag
from grouprec.autograd import Tensor
from grouprec.features import build_group_table
from grouprec.model import (MODES, DualChannelModel, ModelConfig, ModelConfigError, asymmetric_inject, fuse_logits,
                            kd_loss, kl_distill_loss, margin_distill_loss, qualification_gate)
from grouprec.priors import GroupPriors
from oracles import fuse, gate, injection, margin_loss, sigmoid
from toys import full_model_grad_check, toy_setup

finite = st.floats(-30, 30, allow_nan=False)


def _t(x):
    return ag.parameter(np.atleast_1d(np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------- margin loss


def test_margin_examples():
    assert margin_distill_loss(_t(1.3), _t(1.3), 2.0, 0.05).value[0] == 0.0
    got = margin_distill_loss(_t(2.0), _t(0.0), 1.0, 0.1).value[0]
    assert got == pytest.approx((1 / (1 + math.exp(-2)) - 0.5 - 0.1) ** 2, abs=1e-15)
    assert got == pytest.approx(0.078846, abs=1e-6)


@pytest.mark.parametrize("seed", range(100))
def test_margin_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    zi, zg = rng.normal(0, 4, size=2)
    T, m = rng.uniform(0.2, 5), rng.uniform(0, 0.5)
    got = margin_distill_loss(_t(zi), _t(zg), T, m).value[0]
    assert abs(got - margin_loss(zi, zg, T, m)) <= 1e-10


@given(finite, finite, st.floats(0.1, 5), st.floats(0, 0.45))
def test_margin_flat_region_has_zero_grad(zi, zg, T, m):
    a, b = _t(zi), _t(zg)
    L = margin_distill_loss(a, b, T, m)
    ag.backward(ag.sum_(L))
    if abs(sigmoid(zi / T) - sigmoid(zg / T)) <= m:
        assert L.value[0] == 0.0 and b.grad[0] == 0.0


@given(finite, finite, st.floats(0.1, 5), st.floats(0, 0.45))
def test_margin_grad_bounded_and_teacher_stopped(zi, zg, T, m):
    a, b = _t(zi), _t(zg)
    ag.backward(ag.sum_(margin_distill_loss(a, b, T, m)))
    assert abs(b.grad[0]) <= 2 * (1 - m) / (4 * T) + 1e-15
    assert a.grad[0] == 0.0


def test_kl_loss_teacher_stopped_and_zero_at_agreement():
    a, b = _t([0.7, -2.0]), _t([0.7, 1.0])
    L = kl_distill_loss(a, b, 2.0)
    assert abs(L.value[0]) < 1e-15 and L.value[1] > 0
    ag.backward(ag.sum_(L))
    assert not a.grad.any() and b.grad[1] != 0


# ---------------------------------------------------------------- gate, kd, fusion


def test_gate_examples():
    assert qualification_gate([0], [5.0], 1, 0.3)[0] == 0.0
    z = math.log(0.9 / 0.1)
    assert qualification_gate([3], [z], 3, 0.3)[0] == 1.0
    # sigmoid(z) = 0.5 + theta_conf exactly on a dyadic boundary
    z = math.log(0.75 / 0.25)
    assert ag.sigmoid_np(np.array(z)) == 0.75
    assert qualification_gate([10], [z], 3, 0.25)[0] == 0.0


@pytest.mark.parametrize("seed", range(100))
def test_gate_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    act = rng.integers(0, 20, size=8)
    z = rng.normal(0, 2, size=8)
    ta, tc = int(rng.integers(0, 20)), rng.uniform(0.01, 0.49)
    got = qualification_gate(act, z, ta, tc).tolist()
    assert got == [gate(a, zz, ta, tc) for a, zz in zip(act, z)]


def test_kd_examples():
    L = Tensor([0.08])
    assert kd_loss([0.0], _t(0.7), L).value[0] == 0.0
    assert kd_loss([1.0], _t(0.0), L).value[0] == 0.0
    assert kd_loss([1.0], _t(0.5), L).value[0] == pytest.approx(0.04, abs=1e-15)


@pytest.mark.parametrize("seed", range(100))
def test_kd_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    g, a, m = float(rng.integers(0, 2)), rng.uniform(), rng.uniform(0, 0.3)
    assert abs(kd_loss([g], _t(a), Tensor([m])).value[0] - g * a * m) <= 1e-10


def test_fusion_examples():
    assert fuse_logits(_t(2.0), _t(-1.0), _t(0.0)).value[0] == 2.0
    assert fuse_logits(_t(2.0), _t(-1.0), _t(1.0)).value[0] == -1.0
    assert fuse_logits(_t(2.0), _t(0.0), _t(0.5)).value[0] == 1.0


@pytest.mark.parametrize("seed", range(100))
def test_fusion_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    zi, zg, a = rng.normal(0, 5), rng.normal(0, 5), rng.uniform()
    assert abs(fuse_logits(_t(zi), _t(zg), _t(a)).value[0] - fuse(zi, zg, a)) <= 1e-10


@given(finite, finite, st.floats(0, 1))
def test_fused_logit_between_channels(zi, zg, a):
    z = fuse_logits(_t(zi), _t(zg), _t(a)).value[0]
    assert min(zi, zg) - 1e-12 <= z <= max(zi, zg) + 1e-12


# ---------------------------------------------------------------- injection


def _inj_params(rng, d_g, d_i, h, out):
    return {"inj.l1.W": ag.parameter(rng.normal(size=(d_g + d_i, h))), "inj.l1.b": ag.parameter(rng.normal(size=h)),
            "inj.l2.W": ag.parameter(rng.normal(size=(h, out))), "inj.l2.b": ag.parameter(rng.normal(size=out))}


def test_injection_matches_hand_evaluation():
    p = {"inj.l1.W": ag.parameter([[0.5, -1.0], [0.25, 2.0], [1.0, 0.0], [-0.5, 0.75]]),
         "inj.l1.b": ag.parameter([0.1, -0.2]),
         "inj.l2.W": ag.parameter([[1.5, -0.5], [0.25, 1.0]]), "inj.l2.b": ag.parameter([0.0, 0.3])}
    hg, hi = [0.2, -0.4], [1.0, 0.6]
    got = asymmetric_inject(p, Tensor([hg]), Tensor([hi])).value[0]
    v = {k: t.value.tolist() for k, t in p.items()}
    want = injection(hg, hi, v["inj.l1.W"], v["inj.l1.b"], v["inj.l2.W"], v["inj.l2.b"])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_injection_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    p = _inj_params(rng, 2, 3, 4, 2)
    hg, hi = rng.normal(size=2), rng.normal(size=3)
    got = asymmetric_inject(p, Tensor([hg]), Tensor([hi])).value[0]
    v = {k: t.value.tolist() for k, t in p.items()}
    want = injection(hg, hi, v["inj.l1.W"], v["inj.l1.b"], v["inj.l2.W"], v["inj.l2.b"])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_injection_zero_weights_is_zero_and_shape_checked():
    p = _inj_params(np.random.default_rng(0), 2, 2, 3, 2)
    for t in p.values():
        t.value[:] = 0.0
    assert not asymmetric_inject(p, Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])).value.any()
    with pytest.raises(ag.ShapeError):
        asymmetric_inject(p, Tensor([[1.0, 2.0, 3.0]]), Tensor([[3.0, 4.0]]))


# ---------------------------------------------------------------- target attention


def _att(seq, mask, cand, seed=0):
    rng = np.random.default_rng(seed)
    d = seq.shape[-1]
    w = [ag.parameter(rng.normal(size=(d, 3))) for _ in range(3)]
    return ag.attention_pool(Tensor(seq), Tensor(cand), np.asarray(mask, bool), *w, ag.parameter(rng.normal(size=3)),
                             ag.parameter(rng.normal(size=(3, 1))), ag.parameter(rng.normal(size=1))).value


def test_attention_degenerate_cases():
    rng = np.random.default_rng(1)
    item, other, cand = rng.normal(size=(3, 4))
    seq = np.stack([[item, other, other]])
    assert not _att(seq, [[False] * 3], cand[None]).any()
    np.testing.assert_allclose(_att(seq, [[True, False, False]], cand[None])[0], item, atol=1e-15)
    twin = np.stack([[item, item, other]])
    np.testing.assert_allclose(_att(twin, [[True, True, False]], cand[None])[0], item, atol=1e-15)


def test_attention_weights_are_a_convex_combination():
    rng = np.random.default_rng(2)
    seq = rng.normal(size=(5, 6, 3))
    out = _att(seq, np.ones((5, 6)), rng.normal(size=(5, 3)))
    assert np.all(out <= seq.max(axis=1) + 1e-12) and np.all(out >= seq.min(axis=1) - 1e-12)


# ---------------------------------------------------------------- whole model


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("mode", ["full", "kl_loss", "no_dual_channel", "group_only", "no_margin"])
def test_model_gradients(mode, seed):
    assert full_model_grad_check(seed, mode).max_rel_error < 1e-4


def test_channel_isolation_modes():
    m, b, u, g = toy_setup(0, "individual_only")
    out = m.forward(b, u, None)
    assert out["z_fused"] is out["z_ind"] and "z_group" not in out
    m, b, u, g = toy_setup(0, "group_only")
    out = m.forward(b, u, g)
    assert out["z_fused"] is out["z_group"] and "z_ind" not in out


def test_alpha_heads_in_unit_interval():
    m, b, u, g = toy_setup(3)
    out = m.forward(b, u, g)
    for k in ("alpha_distill", "alpha_fusion"):
        assert np.all((out[k].value >= 0) & (out[k].value <= 1))


def _perturb_individual(m, u):
    u2 = type(u)(**vars(u))
    u2.attr_disc = (u.attr_disc + 1) % 2
    u2.seq_items = (u.seq_items + 3) % m.n_items
    m.params["ind.user"].value[:] += 1.0
    return u2


def test_group_logit_ignores_individual_features():
    m, b, u, g = toy_setup(1)
    before = m.forward(b, u, g)
    u2 = _perturb_individual(m, u)
    after = m.forward(b, u2, g)
    np.testing.assert_array_equal(before["z_group"].value, after["z_group"].value)
    assert not np.array_equal(before["z_ind"].value, after["z_ind"].value)


def _perturb_group(g):
    g2 = type(g)(**vars(g))
    g2.attr_disc = (g.attr_disc + 1) % 2
    g2.user_code = 1 - g.user_code
    return g2


def test_injection_is_the_only_group_to_individual_path():
    m, b, u, g = toy_setup(2)
    g2 = _perturb_group(g)
    assert not np.array_equal(m.forward(b, u, g)["z_ind"].value, m.forward(b, u, g2)["z_ind"].value)
    for name in ("inj.l2.W", "inj.l2.b"):
        m.params[name].value[:] = 0.0
    np.testing.assert_array_equal(m.forward(b, u, g)["z_ind"].value, m.forward(b, u, g2)["z_ind"].value)


def test_distillation_gradient_never_reaches_individual_logit():
    m, b, u, g = toy_setup(4, kd_weight=1.0)
    out = m.forward(b, u, g)
    z_i = out["z_ind"]
    per = margin_distill_loss(z_i, out["z_group"], 2.0, 0.0)
    kd = ag.sum_(kd_loss(np.ones(z_i.shape), out["alpha_distill"], per))
    ag.backward(kd)
    assert not m.params["ind.out.W"].grad.any() and not m.params["ind.user"].grad.any()
    assert m.params["grp.out.W"].grad.any()


def test_uniform_prediction_bce_is_ln2():
    m, b, u, g = toy_setup(0, "individual_only", kd_weight=0.0)
    for name in ("ind.out.W", "ind.out.b"):
        m.params[name].value[:] = 0.0
    loss, _ = m.loss(m.forward(b, u, None), b, u, 0.0)
    assert float(loss.value) == pytest.approx(math.log(2), abs=1e-12)


def test_confident_correct_predictions_have_small_loss():
    m, b, u, g = toy_setup(0, "individual_only", kd_weight=0.0)
    m.params["ind.out.W"].value[:] = 0.0
    m.params["ind.out.b"].value[:] = 0.0
    out = m.forward(b, u, None)
    out["z_fused"] = Tensor(np.where(b.labels[:, None] > 0, 40.0, -40.0))
    assert float(m.loss(out, b, u, 0.0)[0].value) < 1e-15


def test_config_validation():
    assert ModelConfig().kd_weight == 0.005
    for bad in ({"mode": "nope"}, {"temperature": 0.0}, {"margin": -0.1}, {"theta_conf": 0.5},
                {"kd_weight": -1.0}, {"batch_size": 0}):
        with pytest.raises(ModelConfigError):
            ModelConfig(**bad).validate()
    with pytest.raises(ModelConfigError):
        ModelConfig.from_dict({"temprature": 1.0})
    assert ModelConfig.from_dict({"hidden": [8, 4]}).hidden == (8, 4)
    assert len(MODES) == len(set(MODES))


def test_missing_prior_names_the_group_code(small_world):
    codes = {u.user_id: (0, 1) for u in small_world.users}
    pri = GroupPriors(codes, {u.user_id: (0, 1) for u in small_world.users}, {}, {}, 2, 2)
    with pytest.raises(KeyError, match=r"\(0, 1\)"):
        build_group_table(small_world.users, pri)


def test_group_modes_need_priors():
    m, b, u, _ = toy_setup(0)
    with pytest.raises(ValueError):
        m.forward(b, u, None)


def test_training_is_deterministic_and_reduces_loss():
    from grouprec.model import train_model

    runs = []
    for _ in range(2):
        m, b, u, g = toy_setup(5, n_examples=60, epochs=20, batch_size=16, base_lr=0.05, lr_floor=0.005)
        info = train_model(m, b, u, g)
        runs.append((m, info))
    (m1, i1), (m2, i2) = runs
    for k in m1.params:
        assert m1.params[k].value.tobytes() == m2.params[k].value.tobytes()
    first = np.mean([h["bce"] for h in i1["history"][:4]])
    last = np.mean([h["bce"] for h in i1["history"][-4:]])
    assert last < first


def test_theta_act_defaults_to_70th_percentile():
    from grouprec.model import resolve_theta_act

    m, b, u, g = toy_setup(0, theta_act=None)
    want = np.percentile(u.activity[np.unique(b.users)], 70)
    assert resolve_theta_act(m.cfg, u, b.users) == want
