import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psqueue.model import BatchArrivalSpec, QueueModel, ServiceSpec
from psqueue.policies import dps_random_kernel, eps_kernel, fb_kernel, srpt_kernel
from psqueue.simulator import (SimConfig, distribution_distance, limit_convergence_study, simulate_direct,
                               simulate_grishechkin, t_interval)


def _idle_model(policy=None):
    # no arrivals: only the initial jobs are served
    return QueueModel(BatchArrivalSpec(0.0, (0.0, 1.0)), ServiceSpec.uniform(0.0, 2.0), policy or eps_kernel())


def _model(rho, service=None, policy=None):
    service = service or ServiceSpec.uniform(0.0, 2.0)
    return QueueModel(BatchArrivalSpec(rho / service.mean, (0.0, 1.0)), service, policy or eps_kernel())


def _departures(est):
    d = est.departures[0]
    return [d[k] for k in sorted(d)]


# hand-integrated departure times of the rate ODE
HAND_SCENARIOS = [
    ("eps", eps_kernel(), ((1.0, 0), (2.0, 0)), [2.0, 3.0]),
    ("dps", dps_random_kernel((2.0, 1.0), (0.5, 0.5)), ((1.0, 0), (1.0, 1)), [1.5, 2.0]),
    ("eps-one", eps_kernel(), ((1.0, 0),), [1.0]),
]


# -- single-job and hand scenarios ---------------------------------------------------------

@pytest.mark.parametrize("integrator", ["time_change", "rk4"])
def test_single_job_busy_fraction(integrator):
    cfg = SimConfig(horizon=2.0, initial_jobs=((1.0, 0),), integrator=integrator, record_events=True)
    est = simulate_grishechkin(_idle_model(), cfg)
    assert est.busy_fraction == pytest.approx(0.5, abs=1e-9)
    assert est.pmf[1] == pytest.approx(0.5, abs=1e-9)
    assert [e[1] for e in est.event_logs[0]] == ["arrival", "departure"]


@pytest.mark.parametrize("name, policy, jobs, expected", HAND_SCENARIOS, ids=[s[0] for s in HAND_SCENARIOS])
@pytest.mark.parametrize("integrator", ["time_change", "rk4"])
def test_hand_scenarios(name, policy, jobs, expected, integrator):
    cfg = SimConfig(horizon=4.0, initial_jobs=jobs, integrator=integrator)
    assert _departures(simulate_grishechkin(_idle_model(policy), cfg)) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("name, policy, jobs, expected", HAND_SCENARIOS, ids=[s[0] for s in HAND_SCENARIOS])
def test_engines_agree(name, policy, jobs, expected):
    runs = [_departures(simulate_grishechkin(_idle_model(policy), SimConfig(horizon=4.0, initial_jobs=jobs,
                                                                             integrator=i)))
            for i in ("time_change", "rk4")]
    assert np.max(np.abs(np.subtract(*runs))) <= 1e-6


def test_direct_srpt_schedule():
    cfg = SimConfig(horizon=4.0, initial_jobs=((1.0, 0), (2.0, 0)))
    assert _departures(simulate_direct("srpt", _idle_model(), cfg)) == pytest.approx([1.0, 3.0], abs=1e-12)


def test_direct_fb_schedule():
    cfg = SimConfig(horizon=4.0, initial_jobs=((1.0, 0), (2.0, 0)))
    assert _departures(simulate_direct("fb", _idle_model(), cfg)) == pytest.approx([2.0, 3.0], abs=1e-12)


def test_direct_dps_schedule():
    cfg = SimConfig(horizon=4.0, initial_jobs=((1.0, 0), (1.0, 1)))
    deps = _departures(simulate_direct("dps", _idle_model(), cfg, weights=(2.0, 1.0), probs=(0.5, 0.5)))
    assert deps == pytest.approx([1.5, 2.0], abs=1e-12)


def test_direct_tfs_serves_one_job():
    # equal weights, both waiting since 0: ties keep one job in service, no sharing
    cfg = SimConfig(horizon=4.0, initial_jobs=((1.0, 0), (2.0, 0)))
    deps = sorted(_departures(simulate_direct("tfs", _idle_model(), cfg)))
    assert deps[-1] == pytest.approx(3.0, abs=1e-12)
    assert deps[0] in (pytest.approx(1.0, abs=1e-12), pytest.approx(2.0, abs=1e-12))


# -- work conservation ---------------------------------------------------------------------

@pytest.mark.parametrize("policy", [eps_kernel(), dps_random_kernel((3.0, 1.0), (0.5, 0.5)), fb_kernel(2),
                                    srpt_kernel(2)], ids=lambda k: k.name)
@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(0.05, 2.0), min_size=1, max_size=6))
def test_work_conservation(policy, reqs):
    # with no arrivals the server is busy until all work is done
    jobs = tuple((r, i % policy.n_classes) for i, r in enumerate(reqs))
    est = simulate_grishechkin(_idle_model(policy), SimConfig(horizon=20.0, initial_jobs=jobs))
    assert max(est.departures[0].values()) == pytest.approx(sum(reqs), abs=1e-9)
    assert est.busy_fraction == pytest.approx(sum(reqs) / 20.0, abs=1e-9)


def test_work_conservation_rk4():
    jobs = ((0.3, 0), (1.1, 1), (0.7, 0))
    est = simulate_grishechkin(_idle_model(dps_random_kernel((2.0, 1.0), (0.5, 0.5))),
                               SimConfig(horizon=4.0, initial_jobs=jobs, integrator="rk4"))
    assert max(est.departures[0].values()) == pytest.approx(2.1, abs=1e-8)


@pytest.mark.parametrize("rho", [0.3, 0.6])
def test_busy_fraction_is_load(rho):
    est = simulate_grishechkin(_model(rho), SimConfig(horizon=2e4, warmup=200.0, replications=8))
    assert abs(est.busy_fraction - rho) <= est.busy_ci


@pytest.mark.parametrize("rho", [0.3, 0.6])
def test_busy_fraction_interval_coverage(rho):
    # a 95% interval may miss; over 20 seeds P(misses >= 5) = 0.0026 at nominal coverage
    misses = 0
    for seed in range(20):
        est = simulate_grishechkin(_model(rho), SimConfig(horizon=4e3, warmup=100.0, replications=8, seed=seed))
        misses += abs(est.busy_fraction - rho) > est.busy_ci
    assert misses <= 4


# -- stationary laws -------------------------------------------------------------------------

@pytest.mark.parametrize("service", [ServiceSpec.uniform(0.0, 2.0), ServiceSpec.deterministic(1.0),
                                     ServiceSpec.triangular(0.0, 0.5, 1.5),
                                     ServiceSpec.discrete((0.5, 2.0), (0.6, 0.4))],
                         ids=["uniform", "deterministic", "triangular", "discrete"])
def test_eps_geometric_law(service):
    rho = 0.4
    est = simulate_grishechkin(_model(rho, service), SimConfig(horizon=2e4, warmup=200.0, replications=8))
    lo, hi = est.pmf_interval(8)
    geo = (1 - rho) * rho ** np.arange(9)
    assert np.all((lo <= geo) & (geo <= hi))


def test_eps_direct_matches_time_change():
    model = _model(0.4)
    cfg = SimConfig(horizon=5e3, warmup=100.0, replications=4, seed=5)
    a = simulate_grishechkin(model, cfg)
    b = simulate_direct("eps", model, cfg)
    n = min(a.pmf.size, b.pmf.size)
    assert np.all(np.abs(a.pmf[:n] - b.pmf[:n]) <= np.hypot(a.pmf_ci[:n], b.pmf_ci[:n]) + 1e-12)


def test_estimate_invariants():
    est = simulate_grishechkin(_model(0.5), SimConfig(horizon=5e3, warmup=50.0, replications=3,
                                                      u_probe_points=(0.0, 1.0)))
    assert np.all((est.pmf >= 0) & (est.pmf <= 1))
    assert abs(est.pmf.sum() - 1.0) <= 0.01
    assert est.transform_at_probes[0] == pytest.approx(1.0, abs=1e-12)
    assert est.mean_q == pytest.approx(np.sum(np.arange(est.pmf.size) * est.pmf), abs=1e-9)


def test_conditional_sojourn_eps():
    est = simulate_grishechkin(_model(0.4), SimConfig(horizon=2e4, warmup=200.0, replications=8))
    mean, hw = est.conditional_sojourn(1.0)
    assert abs(mean - 1.0 / 0.6) <= hw


def test_reproducible_event_log():
    cfg = SimConfig(horizon=300.0, replications=2, seed=42, record_events=True)
    a = simulate_grishechkin(_model(0.5), cfg)
    b = simulate_grishechkin(_model(0.5), cfg)
    c = simulate_grishechkin(_model(0.5), SimConfig(horizon=300.0, replications=2, seed=42, record_events=True,
                                                    workers=2))
    assert a.event_logs == b.event_logs == c.event_logs
    assert np.array_equal(a.pmf, b.pmf)


def test_config_validation():
    with pytest.raises(ValueError):
        simulate_grishechkin(_model(0.5), SimConfig(horizon=10.0, warmup=20.0))
    with pytest.raises(ValueError):
        simulate_grishechkin(_model(0.5), SimConfig(horizon=10.0, replications=0))
    with pytest.raises(ValueError):
        simulate_direct("lifo", _model(0.5), SimConfig(horizon=10.0))


def test_lrpt_srpt_variant_is_not_simulable():
    with pytest.raises(ValueError):
        simulate_grishechkin(_idle_model(srpt_kernel(2, variant="lrpt")),
                             SimConfig(horizon=3.0, initial_jobs=((1.0, 0),)))


def test_t_interval_single_replication_is_infinite():
    mean, hw = t_interval(np.array([[0.3]]))
    assert mean[0] == 0.3 and np.isinf(hw[0])


# -- distances and the limit study ------------------------------------------------------------------

def test_distance_examples():
    p = np.array([0.5, 0.3, 0.2])
    assert distribution_distance(p, p) == (0.0, 0.0)
    assert distribution_distance([1.0, 0.0], [0.0, 1.0]) == (1.0, 1.0)
    k = np.arange(400)
    tv, _ = distribution_distance(0.6 * 0.4 ** k, 0.5 * 0.5 ** k)
    assert tv == pytest.approx(0.1, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8))
def test_distance_is_a_metric_bound(a, b):
    p = np.array(a) / max(1.0, sum(a))
    q = np.array(b) / max(1.0, sum(b))
    tv, ks = distribution_distance(p, q)
    assert 0.0 <= ks <= tv + 1e-12 <= 1.0 + 1e-12
    assert distribution_distance(q, p) == pytest.approx((tv, ks))


def test_limit_study_control_row():
    rows = limit_convergence_study("fb", [1, 2], _model(0.5), SimConfig(horizon=2e3, warmup=50.0, replications=4),
                                   control=True)
    assert rows[0].N == 0
    assert rows[0].tv <= rows[0].tv_ci + 1e-12
    with pytest.raises(ValueError):
        limit_convergence_study("fb", [4, 1], _model(0.5), SimConfig(horizon=10.0))


@pytest.mark.parametrize("family", ["fb", "srpt"])
def test_limit_study_converges(family):
    rows = limit_convergence_study(family, [1, 4, 16], _model(0.5),
                                   SimConfig(horizon=1e4, warmup=200.0, replications=8))
    tv = {r.N: r for r in rows}
    assert tv[1].tv - tv[1].tv_ci > tv[16].tv + tv[16].tv_ci
