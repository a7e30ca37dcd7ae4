import dataclasses
import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import gaussian_base, latent_adapter, mean_adapter
from oracles import scripted_step
from scorecomp.composer import (
    GuidanceConfig,
    TemperatureSchedule,
    adaptive_tau,
    compose_conditional,
    compose_step,
    compose_unconditional,
    guided_score,
    naive_compose,
    similarity_matrix,
    softmin_gate,
    topk_mask,
    upsample_weights,
)
from scorecomp.errors import InvalidRange, KOutOfRange, ShapeMismatch

sims = st.floats(-1.0, 1.0, allow_nan=False)


def omega_arrays(n_max=5, p_max=6):
    return st.tuples(st.integers(1, n_max), st.integers(1, p_max)).flatmap(
        lambda s: hnp.arrays(np.float64, s, elements=sims))


# similarity ----------------------------------------------------------------

def test_similarity_identical_and_antipodal(rng):
    g = rng.normal(size=(4, 4, 3))
    np.testing.assert_allclose(similarity_matrix(g, [g], 2), 1.0, atol=1e-15)
    np.testing.assert_allclose(similarity_matrix(g, [-g], 2), -1.0, atol=1e-15)


def test_similarity_matches_scalar_oracle(rng):
    base = rng.normal(size=(4, 4, 2))
    ads = [rng.normal(size=(4, 4, 2)) for _ in range(3)]
    got = similarity_matrix(base, ads, 2)
    assert got.shape == (3, 4)

    def avg(g, h, w):
        return sum(g[h, w, c] for c in range(g.shape[2])) / g.shape[2]

    for i, a in enumerate(ads):
        for p in range(4):
            r0, c0 = 2 * (p // 2), 2 * (p % 2)
            dot = na = nb = 0.0
            for h in range(r0, r0 + 2):
                for w in range(c0, c0 + 2):
                    x, y = avg(a, h, w), avg(base, h, w)
                    dot += x * y
                    na += x * x
                    nb += y * y
            assert abs(got[i, p] - dot / math.sqrt(na * nb)) < 1e-12


# softmin / top-k -----------------------------------------------------------

def test_softmin_examples():
    np.testing.assert_allclose(softmin_gate([[0.0], [0.0]], 1.0)[:, 0], [0.5, 0.5])
    np.testing.assert_allclose(softmin_gate([[0.0], [math.log(2)]], 1.0)[:, 0], [2 / 3, 1 / 3],
                               atol=1e-15)
    mp = mpmath.mp
    mp.dps = 40
    e0, e1 = mpmath.exp(-1), mpmath.exp(0)
    oracle = [float(e0 / (e0 + e1)), float(e1 / (e0 + e1))]
    got = softmin_gate([[1.0], [0.0]], 1.0)[:, 0]
    np.testing.assert_allclose(got, oracle, atol=1e-15)
    np.testing.assert_allclose(got, [0.26894, 0.73106], atol=1e-5)


def test_softmin_rejects_bad_temperature():
    with pytest.raises(InvalidRange):
        softmin_gate([[0.0]], 0.0)


def test_topk_examples():
    col = np.array([[0.9], [0.2], [0.5]])
    w = softmin_gate(topk_mask(col, 1), 0.3)
    assert w[1, 0] == 1.0 and w[0, 0] == 0.0 and w[2, 0] == 0.0
    tied = np.array([[0.5], [0.5], [0.7]])
    masked = topk_mask(tied, 1)
    assert np.isfinite(masked[0, 0]) and np.isinf(masked[1, 0]) and np.isinf(masked[2, 0])
    with pytest.raises(KOutOfRange):
        topk_mask(col, 0)
    with pytest.raises(KOutOfRange):
        topk_mask(col, 4)


def test_topk_image_scope_ranks_by_mean():
    omega = np.array([[0.1, 0.9, 0.9], [0.5, 0.5, 0.5], [0.2, 0.95, 0.95]])
    per_patch = topk_mask(omega, 1, "patch")
    assert np.isfinite(per_patch[0, 0]) and np.isfinite(per_patch[1, 1])
    image = topk_mask(omega, 1, "image")
    assert np.all(np.isfinite(image[1])) and np.all(np.isinf(image[[0, 2]]))


@given(omega_arrays(), st.floats(1e-3, 10.0))
def test_softmin_columns_sum_to_one(omega, tau):
    w = softmin_gate(omega, tau)
    assert np.all(np.abs(w.sum(axis=0) - 1.0) < 1e-9)
    assert np.all(w >= 0)


@given(omega_arrays(), st.floats(1e-2, 10.0), st.floats(-5.0, 5.0))
def test_softmin_shift_invariance(omega, tau, c):
    np.testing.assert_allclose(softmin_gate(omega + c, tau), softmin_gate(omega, tau),
                               rtol=0, atol=1e-12)


@given(omega_arrays(), st.floats(1e-3, 10.0))
def test_topk_all_is_identity(omega, tau):
    n = omega.shape[0]
    masked = topk_mask(omega, n)
    assert np.array_equal(masked, omega)
    assert np.array_equal(softmin_gate(masked, tau), softmin_gate(omega, tau))


@given(omega_arrays())
def test_small_tau_is_one_hot_on_argmin(omega):
    srt = np.sort(omega, axis=0)
    assume(omega.shape[0] == 1 or np.all(srt[1] - srt[0] > 1e-3))
    w = softmin_gate(omega, 1e-6)
    oracle = np.zeros_like(omega)
    oracle[np.argmin(omega, axis=0), np.arange(omega.shape[1])] = 1.0
    np.testing.assert_allclose(w, oracle, rtol=0, atol=1e-6)


@given(omega_arrays())
def test_large_tau_is_uniform(omega):
    w = softmin_gate(omega, 1e6)
    np.testing.assert_allclose(w, 1.0 / omega.shape[0], rtol=0, atol=1e-6)


@given(omega_arrays(), st.integers(0, 100), st.floats(1e-3, 1.0), st.floats(0.1, 2.0))
def test_lowering_similarity_raises_weight(omega, pick, tau, delta):
    n, p = omega.shape
    assume(n > 1)
    i, j = pick % n, (pick // n) % p
    w0 = softmin_gate(omega, tau)
    # strict increase needs a weight that is neither saturated nor underflowed
    assume(1e-12 < w0[i, j] < 1.0 - 1e-9)
    lowered = omega.copy()
    lowered[i, j] -= delta
    assert softmin_gate(lowered, tau)[i, j] > w0[i, j]


# temperature ---------------------------------------------------------------

def test_adaptive_tau_examples():
    assert adaptive_tau(TemperatureSchedule(100), 90) == pytest.approx(0.01, rel=1e-15)
    assert adaptive_tau(TemperatureSchedule(100), 100) == pytest.approx(0.1, rel=1e-15)
    assert adaptive_tau(TemperatureSchedule(200), 0) == pytest.approx(0.0005, rel=1e-15)
    assert adaptive_tau(TemperatureSchedule(10, "constant", 2.5), 3) == 2.5
    with pytest.raises(InvalidRange):
        adaptive_tau(TemperatureSchedule(10), 11)


@given(st.integers(1, 2000), st.data())
def test_tau_is_positive_everywhere(T, data):
    t = data.draw(st.integers(0, T))
    assert GuidanceConfig().tau(T, t) > 0


# aggregation ---------------------------------------------------------------

def test_compose_conditional_single_adapter_and_mean(rng):
    a, b = rng.normal(size=(2, 4, 4, 3))
    np.testing.assert_array_equal(compose_conditional(a, [b], np.ones((1, 4)), 2), b)
    got = compose_conditional(a, [a, b], np.full((2, 4), 0.5), 2)
    np.testing.assert_allclose(got, 0.5 * (a + b), atol=1e-15)


def test_compose_conditional_scalar_oracle(rng):
    base = rng.normal(size=(4, 4, 1))
    ads = [rng.normal(size=(4, 4, 1)) for _ in range(2)]
    w = softmin_gate(similarity_matrix(base, ads, 2), 0.2)
    got = compose_conditional(base, ads, w, 2)
    for h in range(4):
        for x in range(4):
            p = (h // 2) * 2 + x // 2
            expect = w[0, p] * ads[0][h, x, 0] + w[1, p] * ads[1][h, x, 0]
            assert abs(got[h, x, 0] - expect) < 1e-12


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 5.0))
def test_aggregate_is_convex_combination(seed, tau):
    r = np.random.default_rng(seed)
    base = r.normal(size=(4, 4, 2))
    ads = list(r.normal(size=(3, 4, 4, 2)))
    w = softmin_gate(similarity_matrix(base, ads, 2), tau)
    agg = compose_conditional(base, ads, w, 2)
    stack = np.stack(ads)
    assert np.all(agg >= stack.min(axis=0) - 1e-12)
    assert np.all(agg <= stack.max(axis=0) + 1e-12)


def test_compose_unconditional_limits(rng):
    base_u = rng.normal(size=(4, 4, 2))
    ads = list(rng.normal(size=(2, 4, 4, 2)))
    w = softmin_gate(rng.uniform(size=(2, 4)), 0.5)
    assert np.array_equal(compose_unconditional(base_u, ads, w, 0.0, 2), base_u)
    assert np.array_equal(compose_unconditional(base_u, ads, w, 1.0, 2),
                          compose_conditional(base_u, ads, w, 2))
    two, four = np.full((2, 2, 1), 2.0), np.full((2, 2, 1), 4.0)
    np.testing.assert_array_equal(
        compose_unconditional(two, [four], np.ones((1, 1)), 0.5, 2), np.full((2, 2, 1), 3.0))
    with pytest.raises(InvalidRange):
        compose_unconditional(base_u, ads, w, 1.5, 2)


def test_guided_score_examples(rng):
    c, u = rng.normal(size=(2, 3, 3, 2))
    assert np.array_equal(guided_score(c, u, 1.0), c)
    np.testing.assert_array_equal(guided_score(c, c, 4.5), c)
    np.testing.assert_array_equal(guided_score(np.ones((2, 2, 1)), np.zeros((2, 2, 1)), 7.0),
                                  np.full((2, 2, 1), 7.0))
    with pytest.raises(ShapeMismatch):
        guided_score(c, u[:2], 2.0)


def test_naive_compose_examples(rng):
    c1, u1, c2, u2 = rng.normal(size=(4, 4, 4, 2))
    np.testing.assert_array_equal(naive_compose([c1], [u1], [1.0], 3.0), guided_score(c1, u1, 3.0))
    np.testing.assert_allclose(naive_compose([c1, c1], [u1, u1], s=3.0), guided_score(c1, u1, 3.0),
                               atol=1e-15)
    got = naive_compose([c1, c2], [u1, u2], [1.0, 1.0], s=2.0)
    for idx in np.ndindex(c1.shape):
        g1 = u1[idx] + 2.0 * (c1[idx] - u1[idx])
        g2 = u2[idx] + 2.0 * (c2[idx] - u2[idx])
        assert abs(got[idx] - (g1 + g2) / 2) < 1e-12
    with pytest.raises(ShapeMismatch):
        naive_compose([c1, c2], [u1], s=2.0)


def test_upsample_weights_shape_check():
    with pytest.raises(ShapeMismatch):
        upsample_weights(np.ones((2, 3)), 4, 4, 2)


def test_guidance_config_validation():
    with pytest.raises(InvalidRange):
        GuidanceConfig(guidance_scale=0.5)
    with pytest.raises(InvalidRange):
        GuidanceConfig(recenter_lambda=2.0)
    with pytest.raises(KOutOfRange):
        GuidanceConfig(top_k=0)
    with pytest.raises(InvalidRange):
        GuidanceConfig(tau_rule="cosine")


# compose_step --------------------------------------------------------------

def test_single_adapter_lambda_one_is_plain_cfg(base, rng):
    a = latent_adapter(base)
    z = rng.normal(size=base.shape)
    cfg = GuidanceConfig(guidance_scale=5.0, recenter_lambda=1.0)
    out = compose_step(base, [a], z, 20, "c0", cfg)
    expected = guided_score(a.eps(z, 20, "c0"), a.eps(z, 20, None), 5.0)
    assert np.array_equal(out.eps, expected)
    assert np.all(out.omega_gated == 1.0)


def test_global_mode_identical_adapters_is_plain_cfg(base, rng):
    a = latent_adapter(base, seed=7)
    b = latent_adapter(base, seed=7)
    z = rng.normal(size=base.shape)
    cfg = GuidanceConfig(guidance_scale=3.0, global_mode=True)
    out = compose_step(base, [a, b], z, 30, "c0", cfg)
    assert out.omega_raw.shape == (2, 1)
    np.testing.assert_allclose(out.eps, guided_score(a.eps(z, 30, "c0"), a.eps(z, 30, None), 3.0),
                               rtol=0, atol=1e-14)


def test_lambda_one_ignores_base_unconditional(base, rng):
    ads = [latent_adapter(base, seed=s) for s in (1, 2)]
    z = rng.normal(size=(3, *base.shape))
    cfg = GuidanceConfig(guidance_scale=4.0, recenter_lambda=1.0)
    ref = compose_step(base, ads, z, 10, "c0", cfg).eps

    class Perturbed:
        schedule, shape = base.schedule, base.shape

        def eps(self, z, t, c=None):
            out = base.eps(z, t, c)
            return out if c is not None else out + 100.0

    assert np.array_equal(compose_step(Perturbed(), ads, z, 10, "c0", cfg).eps, ref)


def test_permuting_adapters_permutes_omega(base, rng):
    ads = [latent_adapter(base, seed=s, trained=("c0", "c1")) for s in (1, 2, 3)]
    z = rng.normal(size=(2, *base.shape))
    cfg = GuidanceConfig(guidance_scale=3.0)
    a = compose_step(base, ads, z, 25, "c0", cfg)
    perm = [2, 0, 1]
    b = compose_step(base, [ads[i] for i in perm], z, 25, "c0", cfg)
    np.testing.assert_array_equal(b.omega_raw, a.omega_raw[:, perm])
    np.testing.assert_allclose(b.eps, a.eps, rtol=0, atol=1e-12)


def test_compose_step_batch_matches_single(base, rng):
    ads = [latent_adapter(base, seed=s) for s in (1, 2)]
    z = rng.normal(size=(4, *base.shape))
    cfg = GuidanceConfig(guidance_scale=2.0, top_k=1)
    batch = compose_step(base, ads, z, 12, "c0", cfg)
    for i in range(4):
        one = compose_step(base, ads, z[i], 12, "c0", cfg)
        np.testing.assert_allclose(batch.eps[i], one.eps, rtol=0, atol=1e-14)


def test_compose_step_rejects_bad_inputs(base, rng):
    z = rng.normal(size=base.shape)
    with pytest.raises(ShapeMismatch):
        compose_step(base, [], z, 5, "c0", GuidanceConfig())
    with pytest.raises(KOutOfRange):
        compose_step(base, [latent_adapter(base)], z, 5, "c0", GuidanceConfig(top_k=2))


@pytest.mark.parametrize("site", ["latent", "mean"])
def test_compose_step_matches_scripted_oracle(site):
    base = gaussian_base(shape=(4, 4, 2), T=50)
    make = latent_adapter if site == "latent" else mean_adapter
    ads = [make(base, seed=1, trained=("c0",)), make(base, seed=2, trained=("c1",))]
    z = np.random.default_rng(9).normal(size=base.shape)
    cfg = GuidanceConfig(guidance_scale=7.0, recenter_lambda=0.5, patch_size=2)
    got = compose_step(base, ads, z, 25, "c0", cfg).eps
    np.testing.assert_allclose(got, scripted_step(base, ads, z, 25, "c0", 7.0, 0.5, 2, 50),
                               rtol=0, atol=1e-10)


def test_s_one_shortcut_equals_full_formula(base, rng):
    ads = [latent_adapter(base, seed=s) for s in (1, 2)]
    z = rng.normal(size=base.shape)
    cfg = GuidanceConfig(guidance_scale=1.0)
    out = compose_step(base, ads, z, 20, "c0", cfg)
    tau = cfg.tau(base.schedule.total_steps, 20)
    gated = softmin_gate(similarity_matrix(base.eps(z, 20, "c0"),
                                           [a.eps(z, 20, "c0") for a in ads], 2), tau)
    cond = compose_conditional(base.eps(z, 20, "c0"), [a.eps(z, 20, "c0") for a in ads], gated, 2)
    assert np.array_equal(out.eps, cond)
    assert np.array_equal(out.omega_gated, gated)


def test_top_k_full_equals_dense(base, rng):
    ads = [latent_adapter(base, seed=s) for s in (1, 2, 3)]
    z = rng.normal(size=base.shape)
    dense = GuidanceConfig(guidance_scale=3.0)
    full = dataclasses.replace(dense, top_k=3)
    a = compose_step(base, ads, z, 20, "c0", dense)
    b = compose_step(base, ads, z, 20, "c0", full)
    assert np.array_equal(a.eps, b.eps)
