import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psqueue.model import BatchArrivalSpec, QueueModel, ServiceSpec
from psqueue.numerics import EvalCounter
from psqueue.policies import constant_kernel, dps_random_kernel, eps_kernel, null_kernel
from psqueue.transform import (KernelContext, StationaryTransform, h1_eval, h4_eval, invert_to_density,
                               kappa1, kappa2, kappa3, mean_sojourn, nested_transform, picard_solve_phi,
                               pmf_from_transform, record_deviations, solve_S, sojourn_transform,
                               stationary_transform, stationary_transform_picard,
                               stationary_transform_theorem)

RHO = 0.4
GEOM_AT_1 = 0.703525  # (1 - rho) / (1 - rho e^-1)


def _eps_model(rate=0.4, service=None, batch=(0.0, 1.0), policy=None):
    return QueueModel(BatchArrivalSpec(rate, batch), service or ServiceSpec.uniform(0.0, 2.0),
                      policy or eps_kernel())


def _geometric(rho=RHO):
    def ev(u):
        u = np.asarray(u)
        # for Re u < 0 use (1 - rho) e^u / (e^u - rho), the same function without overflow
        with np.errstate(over="ignore", invalid="ignore"):
            right = (1 - rho) / (1 - rho * np.exp(-u))
            left = (1 - rho) * np.exp(u) / (np.exp(u) - rho)
        return np.where(np.real(u) >= 0, right, left)
    return StationaryTransform(ev, rho, "closed form")


def _constant_ctx(**kw):
    # n = 1, f = [0, 1], h1 = h2 = 0, g = 1 on [0, 1]
    return KernelContext(_eps_model(0.4, ServiceSpec.uniform(0.0, 1.0), policy=null_kernel()), **kw)


# -- h1, h4 --------------------------------------------------------------------------

def test_h1_examples():
    ctx = KernelContext(_eps_model(service=ServiceSpec.uniform(0.0, 2.0)))
    for t, z in [(0.0, 0.3), (1.0, 1.5), (3.0, 0.2)]:
        assert h1_eval(ctx, t, 0.0, 0.0, z) == 0
    assert h1_eval(ctx, 0.5, 1.0, 0.0, 1.0) == -1.0
    assert h1_eval(ctx, 2.0, 1.0, 0.0, 1.0) == 0.0


def test_h4_examples():
    ctx = _constant_ctx()
    assert h4_eval(ctx, 0.7, 0.3, 0.0, [0.5]) == pytest.approx(1.0, abs=1e-14)
    two = KernelContext(_eps_model(0.2, ServiceSpec.uniform(0.0, 1.0), batch=(0.0, 0.0, 1.0),
                                   policy=null_kernel()))
    assert h4_eval(two, 0.7, 0.3, 0.0, [0.5, 0.5]) == pytest.approx(1.0, abs=1e-14)


# -- kappa ---------------------------------------------------------------------------

def test_kappa3_degenerate_is_h4():
    ctx = _constant_ctx(resolvent_override=lambda t, z: 0.0)
    for t, u, z in [(0.4, 0.0, 0.3), (1.2, 0.7, 0.9)]:
        assert kappa3(ctx, t, u, 0.0, z) == pytest.approx(h4_eval(ctx, t, u, 0.0, [z]), abs=1e-14)
    assert kappa3(ctx, 0.4, 0.0, 0.0, 0.3) == pytest.approx(1.0, abs=1e-14)


def test_kappa3_memory_term():
    ctx = KernelContext(_eps_model(0.4, ServiceSpec.uniform(0.0, 1.0), policy=constant_kernel(1.0)),
                        resolvent_override=lambda t, z: 0.0)
    # z off the support: h4 = 0, so only -n int_0^2 h2 = -2 remains
    assert kappa3(ctx, 2.0, 0.3, 0.0, 1.5) == pytest.approx(-2.0, abs=1e-12)


def test_kappa1_constant_configuration():
    ctx = _constant_ctx()
    for t, u, v in [(0.2, 0.0, 0.0), (0.8, 1.0, 0.5), (3.0, 2.0, -0.1)]:
        assert kappa1(ctx, t, u, v) == pytest.approx(math.e, abs=1e-12)


def test_kappa2_constant_configuration_vanishes():
    ctx = _constant_ctx()
    for t, u in [(0.2, 0.0), (0.8, 1.0)]:
        assert kappa2(ctx, t, u) == pytest.approx(0.0, abs=1e-10)


def _kappa_oracle(t, u, gamma=0.4):
    """Literal kappa1(t, u, 0) and kappa2(t, u) for unit-batch EPS, uniform [0, 2] service.

    Independent of the package: the resolvent of Gamma 1{s >= z} is the delay
    series sum_k (-1)^(k+1) Gamma^k (s - kz)^(k-1)/(k-1)!, integrated in closed form.
    """
    g = mpmath.mpf(1) / 2

    def k3(z, v):
        h1 = -(u + v) * (1 if t < z else 0)
        h4 = g * mpmath.exp(h1)
        lin = gamma * max(t - z, 0)
        conv = gamma * sum((-1) ** (k + 1) * gamma ** k * max(t - z - k * z, 0) ** k / mpmath.factorial(k)
                           for k in range(1, 60))
        return h1, h4 - lin - conv

    def f1(z):
        h1, k = k3(z, 0)
        return mpmath.exp(h1 + k) * g

    def f2(z):
        h1, k = k3(z, 0)
        dh1 = -(1 if t < z else 0)
        dk3 = g * mpmath.exp(h1) * dh1
        return g * mpmath.exp(h1 + k) * (dh1 + dk3)
    pts = sorted({0, 2} | {t / k for k in range(1, 12) if t / k < 2})
    with mpmath.workdps(20):
        return float(mpmath.quad(f1, pts)), float(mpmath.quad(f2, pts))


@pytest.mark.parametrize("t", [0.5, 1.0])
@pytest.mark.parametrize("u", [0.0, 1.0])
def test_kappa_eps_against_independent_quadrature(eps_model, t, u):
    ctx = KernelContext(eps_model, pipeline="theorem")
    k1, k2 = _kappa_oracle(t, u)
    assert kappa1(ctx, t, u, 0.0) == pytest.approx(k1, abs=1e-6)
    assert kappa2(ctx, t, u) == pytest.approx(k2, abs=1e-6)


# -- theorem route ---------------------------------------------------------------------

def test_theorem_route_normalisation(eps_model):
    ctx = KernelContext(eps_model, pipeline="theorem")
    assert stationary_transform_theorem(ctx, 0.0) == pytest.approx(1.0, abs=1e-4)


def test_theorem_route_large_u(eps_model):
    ctx = KernelContext(eps_model, pipeline="theorem")
    assert stationary_transform_theorem(ctx, 50.0) == pytest.approx(1 - RHO, abs=1e-3)


def test_theorem_route_geometric_law(eps_model):
    ctx = KernelContext(eps_model, pipeline="theorem")
    assert stationary_transform_theorem(ctx, 1.0) == pytest.approx(GEOM_AT_1, abs=2e-3)


@pytest.mark.parametrize("u", [0.5, 1.0, 2.0])
def test_pipelines_agree_on_constant_kernel(u):
    model = _eps_model(0.4, ServiceSpec.uniform(0.0, 1.0), policy=constant_kernel(0.3))
    thm = stationary_transform_theorem(KernelContext(model, pipeline="theorem"), u)
    pic = stationary_transform_picard(KernelContext(model), u)
    assert thm == pytest.approx(pic, abs=1e-4)


@pytest.mark.parametrize("u", [0.5, 1.0, 2.0])
def test_pipelines_agree_without_arrivals(u):
    # Gamma = 0: rho = 0 and both routes reduce to 1 - 0 = 1 for every u
    model = _eps_model(0.0)
    thm = stationary_transform_theorem(KernelContext(model, pipeline="theorem"), u)
    pic = stationary_transform_picard(KernelContext(model), u)
    assert thm == pytest.approx(pic, abs=1e-4)
    assert pic == pytest.approx(1.0, abs=1e-12)


def test_both_pipeline_logs_deviations(eps_model):
    ctx = KernelContext(eps_model, pipeline="both")
    st_both = stationary_transform(ctx)
    val = st_both(1.0)
    assert val == pytest.approx(GEOM_AT_1, abs=2e-3)  # Picard side is returned
    for entry in ctx.deviations:
        assert entry["kind"] == "theorem-pipeline deviation"
        assert entry["abs_diff"] > 1e-3


def test_record_deviations_threshold():
    ctx = _constant_ctx()
    new = record_deviations(ctx, [0.5, 1.0], [0.9, 0.8], [0.9005, 0.7])
    assert len(new) == 1 and new[0]["u"] == 1.0
    assert ctx.deviations == new


# -- Picard route -----------------------------------------------------------------------

def test_phi_is_one_at_zero_arguments(eps_model):
    sol = picard_solve_phi(KernelContext(eps_model), 0.0, 0.0, t_max=3.0)
    assert np.max(np.abs(sol.values - 1.0)) < 1e-12
    assert sol.residual <= 1e-10


def test_phi_without_arrivals_uniform_service():
    sol = picard_solve_phi(KernelContext(_eps_model(0.0)), 1.0, 0.0, t_max=2.0)
    assert sol(1.0) == pytest.approx(0.5 + 0.5 * math.exp(-1), abs=1e-4)


def test_phi_without_arrivals_deterministic_service():
    sol = picard_solve_phi(KernelContext(_eps_model(0.0, ServiceSpec.deterministic(1.0))), 1.0, 0.0, t_max=2.0)
    assert sol(0.5) == pytest.approx(math.exp(-1), abs=1e-6)


def test_phi_bounded_by_one(eps_model):
    sol = picard_solve_phi(KernelContext(eps_model), np.array([0.5, 2.0]), np.array([0.0, 1.0]))
    assert np.all(np.abs(sol.values) <= 1 + 1e-12)


def test_picard_normalisation(eps_model):
    assert stationary_transform_picard(KernelContext(eps_model), 0.0) == pytest.approx(1.0, abs=1e-4)


def test_picard_geometric_law(eps_model):
    assert stationary_transform_picard(KernelContext(eps_model), 1.0) == pytest.approx(GEOM_AT_1, abs=2e-3)


def test_picard_monotone_and_bounded(eps_model):
    us = np.array([0.0, 0.5, 1.0, 2.0, 5.0, 50.0])
    vals = stationary_transform_picard(KernelContext(eps_model), us)
    assert np.all(np.diff(vals) <= 1e-12)
    assert np.all(vals >= 1 - RHO - 1e-6) and np.all(vals <= 1 + 1e-6)


def test_dps_equal_weights_is_eps(eps_model):
    dps = QueueModel(eps_model.arrival, eps_model.service, dps_random_kernel((1.0, 1.0), (0.5, 0.5)))
    us = np.array([0.5, 1.0, 2.0])
    a = stationary_transform_picard(KernelContext(dps), us)
    b = stationary_transform_picard(KernelContext(eps_model), us)
    assert np.max(np.abs(a - b)) <= 1e-6


def test_swapped_memory_form_runs(eps_model):
    val = stationary_transform_picard(KernelContext(eps_model, memory_form="swapped"), 1.0)
    assert 1 - RHO - 1e-6 <= val <= 1.0


@settings(max_examples=4, deadline=None)
@given(st.floats(0.1, 0.7), st.floats(0.2, 3.0))
def test_picard_matches_geometric_law_for_any_load(rho, u):
    # M/G/1-EPS insensitivity: the law of Q is geometric(rho) for any service shape
    model = _eps_model(rho, ServiceSpec.triangular(0.0, 0.5, 1.5), policy=eps_kernel())
    model = QueueModel(BatchArrivalSpec(rho / model.service.mean, (0.0, 1.0)), model.service, eps_kernel())
    val = stationary_transform_picard(KernelContext(model), u)
    assert val == pytest.approx((1 - rho) / (1 - rho * math.exp(-u)), abs=2e-3)


# -- inversion and pmf ------------------------------------------------------------------------

def test_point_mass_density_peaks_at_one():
    point = StationaryTransform(lambda u: np.exp(-np.asarray(u)), float("nan"), "point mass")
    lo, mid, hi = (invert_to_density(point, s) for s in (0.95, 1.0, 1.05))
    assert mid > lo and mid > hi


def test_geometric_density_normalisation():
    # literal check: the smoothed density of the geometric law integrates to one
    theta = lambda s: invert_to_density(_geometric(), float(s), order=24)
    total = float(mpmath.quad(lambda s: theta(s), [0, 0.5] + list(range(1, 40))))
    assert total == pytest.approx(1.0, abs=2e-2)


def _nested_geometric():
    # inner variable p: (1 - rho) / (1 - rho e^-u) / (p + 1) inverted at t = 1 gives e^-1 times the law
    return lambda p, u: _geometric()(u) / (p + 1.0)


def test_nested_count_literal():
    counter = EvalCounter()
    st_nested = nested_transform(_nested_geometric(), 1.0, 16, counter, rho=RHO)
    invert_to_density(st_nested, 1.0, 16, counter)
    assert counter.count == 256


def test_nested_count_actual():
    # conjugate-paired outer nodes: 15 complex nodes with two inner inversions each, one real node
    counter = EvalCounter()
    st_nested = nested_transform(_nested_geometric(), 1.0, 16, counter, rho=RHO)
    invert_to_density(st_nested, 1.0, 16, counter)
    assert counter.count == (2 * 16 - 1) * 16 + 16


def test_nested_inversion_accuracy():
    st_nested = nested_transform(_nested_geometric(), 1.0, 24, rho=RHO)
    for u in (0.5, 1.0 + 0.5j):
        assert st_nested(u) == pytest.approx(complex(_geometric()(u)) * math.exp(-1), abs=1e-10)
    direct = invert_to_density(_geometric(), 1.3, 24)
    assert invert_to_density(st_nested, 1.3, 24) == pytest.approx(direct * math.exp(-1), abs=1e-8)


def test_pmf_geometric_examples():
    p = pmf_from_transform(_geometric(), 5)
    for k, want in enumerate([0.6, 0.24, 0.096]):
        assert p[k] == pytest.approx(want, abs=1e-4)


def test_pmf_empty_system():
    empty = StationaryTransform(lambda u: np.ones_like(np.asarray(u, dtype=complex)), 0.0, "empty")
    p = pmf_from_transform(empty, 4)
    assert p[0] == pytest.approx(1.0, abs=1e-8)
    assert np.all(np.abs(p[1:]) < 1e-8)


def test_pmf_total_mass():
    assert pmf_from_transform(_geometric(), 60).sum() == pytest.approx(1.0, abs=1e-6)


def test_pmf_rebuilds_transform():
    rho = RHO
    p = pmf_from_transform(_geometric(rho), 60)
    for u in (0.5, 1.0, 2.0):
        tail = rho ** 61  # P(Q > 60) bounds the missing mass
        rebuilt = float(np.sum(p * np.exp(-u * np.arange(61))))
        assert abs(rebuilt - _geometric(rho)(u)) <= 1e-5 + tail


def test_pmf_from_picard(eps_model):
    p = pmf_from_transform(stationary_transform(KernelContext(eps_model)), 2)
    for k, want in enumerate([0.6, 0.24, 0.096]):
        assert p[k] == pytest.approx(want, abs=1e-3)


def test_pmf_rejects_negative_kmax():
    with pytest.raises(ValueError):
        pmf_from_transform(_geometric(), -1)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.9), st.integers(0, 30))
def test_pmf_is_a_subprobability(rho, k_max):
    p = pmf_from_transform(_geometric(rho), k_max)
    assert np.all(p >= -1e-8)
    assert p.sum() <= 1 + 1e-6


# -- S and sojourn time ---------------------------------------------------------------------------

def test_S_is_one_at_zero(eps_model):
    S = solve_S(KernelContext(eps_model), 0.0, 3.0)
    assert np.max(np.abs(S.values - 1.0)) < 1e-12


def test_S_without_arrivals():
    S = solve_S(KernelContext(_eps_model(0.0, ServiceSpec.deterministic(1.0))), 1.0, 3.0)
    assert S(0.5) == pytest.approx(math.exp(-0.5), abs=1e-6)
    assert S(2.0) == pytest.approx(math.exp(-1.0), abs=1e-6)


def test_sojourn_normalisation(eps_model):
    assert sojourn_transform(KernelContext(eps_model), 0.0, 1.0) == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("u", [0.5, 2.0])
def test_sojourn_no_contention(u):
    model = _eps_model(1e-9)
    assert sojourn_transform(KernelContext(model), u, 1.0) == pytest.approx(math.exp(-u), abs=1e-4)


def test_mean_sojourn_eps_law(eps_model):
    assert mean_sojourn(KernelContext(eps_model), 1.0) == pytest.approx(1.0 / (1 - RHO), abs=3e-2)


def test_sojourn_rejects_non_eps(eps_model):
    dps = QueueModel(eps_model.arrival, eps_model.service, dps_random_kernel((1.0, 2.0), (0.5, 0.5)))
    with pytest.raises(ValueError):
        sojourn_transform(KernelContext(dps), 1.0, 1.0)
    with pytest.raises(ValueError):
        sojourn_transform(KernelContext(eps_model), 1.0, 3.0)
