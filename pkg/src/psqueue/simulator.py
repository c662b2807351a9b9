"""Discrete-event simulation of the batch-arrival single-server queue.

Three engines share one arrival stream per replication (common random
numbers across policies and engines):

* ``time_change``: Grishechkin dynamics in virtual time, where every job
  ages independently and wall-clock time equals the work done;
* ``rk4``: the service-rate ODE integrated in wall-clock time with event
  detection by bisection (cross-check engine);
* direct rules (EPS, DPS, SRPT, FB, TFS) for limit validation.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, stats

from .model import QueueModel, validate_model
from .policies import PolicyKernel, eps_kernel, policy_from_name

FB_TIE_TOL = 1e-12
RK4_FB_OFFSET = 1e-9
DIRECT_POLICIES = ("eps", "dps", "srpt", "fb", "tfs")


@dataclass
class Job:
    id: int
    cls: int
    arrival_time: float
    requirement: float
    attained: float = 0.0
    internal_done: float = 0.0   # virtual lifetime R(ell)


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``initial_jobs`` holds (requirement, class) pairs present at time 0.
    ``workers`` > 1 runs replications in a thread pool; results do not depend on it.
    """

    horizon: float
    warmup: float = 0.0
    replications: int = 1
    seed: int = 0
    integrator: str = "time_change"
    u_probe_points: tuple = ()
    initial_jobs: tuple = ()
    record_events: bool = False
    rk4_step: float = 1e-3
    workers: int = 1
    level: float = 0.95

    def problems(self) -> list[str]:
        errs = []
        if not self.horizon > 0:
            errs.append(f"horizon must be positive, got {self.horizon}")
        if not 0 <= self.warmup < self.horizon:
            errs.append(f"warmup must satisfy 0 <= warmup < horizon, got {self.warmup}")
        if self.replications < 1:
            errs.append(f"replications must be >= 1, got {self.replications}")
        if self.integrator not in ("time_change", "rk4"):
            errs.append(f"unknown integrator {self.integrator!r}")
        if not 0 <= self.seed < 2 ** 64:
            errs.append("seed must be a 64-bit unsigned integer")
        return errs


def t_interval(samples, level: float = 0.95, n_tests: int = 1):
    """Mean and Student-t half-width over replications (Bonferroni over n_tests).

    ``samples`` has replications along axis 0; one replication gives an infinite width.
    """
    x = np.asarray(samples, dtype=float)
    mean = x.mean(axis=0)
    r = x.shape[0]
    if r < 2:
        return mean, np.full_like(mean, np.inf)
    alpha = (1.0 - level) / n_tests
    q = stats.t.ppf(1.0 - alpha / 2.0, r - 1)
    return mean, q * x.std(axis=0, ddof=1) / math.sqrt(r)


@dataclass
class ReplicationResult:
    occupancy: np.ndarray          # time spent at each queue length over [warmup, horizon]
    departures: dict
    events: list | None
    jobs: np.ndarray | None = None  # (arrival, requirement, sojourn) of completed post-warmup jobs

    @property
    def pmf(self) -> np.ndarray:
        total = self.occupancy.sum()
        return self.occupancy / total if total > 0 else self.occupancy


@dataclass
class SimEstimate:
    """Replication-averaged stationary estimates with 95% Student-t half-widths."""

    pmf: np.ndarray
    pmf_ci: np.ndarray
    mean_q: float
    mean_q_ci: float
    busy_fraction: float
    busy_ci: float
    transform_at_probes: np.ndarray
    transform_ci: np.ndarray
    rep_pmfs: np.ndarray
    departures: list = field(default_factory=list)
    event_logs: list = field(default_factory=list)
    level: float = 0.95
    jobs: list = field(default_factory=list)

    def conditional_sojourn(self, ell: float, band: float = 0.05):
        """Mean sojourn of jobs with requirement in [ell - band, ell + band], with half-width.

        Each replication contributes the mean over its own jobs in the band.
        """
        means = []
        for jobs in self.jobs:
            sel = np.abs(jobs[:, 1] - ell) <= band
            if not sel.any():
                raise ValueError(f"no completed job with requirement within {band} of {ell}")
            means.append(jobs[sel, 2].mean())
        mean, hw = t_interval(np.array(means), self.level)
        return float(mean), float(hw)

    def pmf_interval(self, k_max: int | None = None, level: float | None = None, bonferroni: bool = True):
        """Per-bin (lo, hi) for p_0..p_kmax, Bonferroni-adjusted over the bins by default."""
        k_max = self.pmf.size - 1 if k_max is None else k_max
        reps = _pad(self.rep_pmfs, k_max + 1)[:, :k_max + 1]
        mean, hw = t_interval(reps, level or self.level, (k_max + 1) if bonferroni else 1)
        return mean - hw, mean + hw


def _pad(rows: np.ndarray, width: int) -> np.ndarray:
    if rows.shape[1] >= width:
        return rows
    return np.pad(rows, ((0, 0), (0, width - rows.shape[1])))


# ---------------------------------------------------------------------------
# arrival stream

@dataclass
class _Arrivals:
    times: np.ndarray        # one entry per job (batch members share a time)
    ell: np.ndarray
    cls: np.ndarray


def _arrival_stream(rng: np.random.Generator, model: QueueModel, horizon: float, class_probs) -> _Arrivals:
    rate = model.arrival.rate
    coeffs = np.asarray(model.arrival.pgf_coeffs, dtype=float)
    if rate <= 0:
        return _Arrivals(np.empty(0), np.empty(0), np.empty(0, int))
    epochs = []
    t = 0.0
    block = max(16, int(rate * horizon * 1.1) + 16)
    while t <= horizon:
        gaps = rng.exponential(1.0 / rate, size=block)
        ts = t + np.cumsum(gaps)
        epochs.append(ts)
        t = ts[-1]
    epochs = np.concatenate(epochs)
    epochs = epochs[epochs <= horizon]
    sizes = rng.choice(len(coeffs), size=epochs.size, p=coeffs / coeffs.sum())
    times = np.repeat(epochs, sizes)
    ell = model.service.sample(rng, times.size)
    assert np.all(ell <= model.service.support_max + 1e-12)
    probs = np.asarray(class_probs, dtype=float)
    cls = rng.choice(len(probs), size=times.size, p=probs) if len(probs) > 1 else np.zeros(times.size, int)
    return _Arrivals(times, ell, cls)


# ---------------------------------------------------------------------------
# bookkeeping shared by the engines

class _Recorder:
    def __init__(self, warmup: float, horizon: float, record: bool):
        self.warmup = warmup
        self.horizon = horizon
        self.occ = np.zeros(16)
        self.departures = {}
        self.arrivals = {}
        self.events = [] if record else None

    def hold(self, t0: float, t1: float, q: int) -> None:
        a, b = max(t0, self.warmup), min(t1, self.horizon)
        if b > a:
            if q >= self.occ.size:
                self.occ = np.pad(self.occ, (0, max(q + 1, 2 * self.occ.size) - self.occ.size))
            self.occ[q] += b - a

    def log(self, t: float, kind: str, job: int, q: int, ell: float | None = None) -> None:
        if kind == "departure":
            self.departures[job] = t
        elif ell is not None:
            self.arrivals[job] = (t, ell)
        if self.events is not None:
            self.events.append((t, kind, job, q))

    def result(self) -> ReplicationResult:
        occ = self.occ
        nz = np.flatnonzero(occ)
        occ = occ[: (nz[-1] + 1 if nz.size else 1)]
        done = [(a, e, self.departures[j] - a) for j, (a, e) in self.arrivals.items()
                if j in self.departures and a >= self.warmup]
        jobs = np.array(done, dtype=float).reshape(-1, 3)
        return ReplicationResult(occ, self.departures, self.events, jobs)


def _initial(config: SimConfig):
    return [(float(ell), int(c)) for ell, c in config.initial_jobs]


# ---------------------------------------------------------------------------
# Grishechkin engines

def _run_time_change(policy: PolicyKernel, arr: _Arrivals, config: SimConfig) -> ReplicationResult:
    """Exact virtual-time engine: each job's remaining virtual lifetime drops at unit rate
    and the wall-clock time elapsed equals the total attained service gained."""
    rec = _Recorder(config.warmup, config.horizon, config.record_events)
    ids: list[int] = []
    ell: list[float] = []
    cls: list[int] = []
    rem: list[float] = []
    linear = policy.kind == "linear"

    def add(job_id, e, c, t):
        L = float(policy.lifetime(e, c))
        if not math.isfinite(L):
            raise ValueError(f"policy {policy.name} has infinite virtual lifetimes and cannot be simulated")
        ids.append(job_id)
        ell.append(e)
        cls.append(c)
        rem.append(L)
        rec.log(t, "arrival", job_id, len(ids), e)

    next_id = 0
    for e, c in _initial(config):
        add(next_id, e, c, 0.0)
        next_id += 1
    t = 0.0
    k = 0
    n_arr = arr.times.size
    while True:
        t_arr = arr.times[k] if k < n_arr else math.inf
        if not ids:
            if t_arr > config.horizon:
                rec.hold(t, config.horizon, 0)
                break
            rec.hold(t, t_arr, 0)
            t = t_arr
            while k < n_arr and arr.times[k] == t_arr:
                add(next_id, float(arr.ell[k]), int(arr.cls[k]), t)
                next_id += 1
                k += 1
            continue
        E = np.asarray(ell)
        Cc = np.asarray(cls)
        Rm = np.asarray(rem)
        V0 = policy.attained_from_remaining(Rm, E, Cc)
        j = int(np.argmin(Rm))
        dtau_dep = Rm[j]

        def work(dtau):
            return float(np.sum(policy.attained_from_remaining(np.maximum(Rm - dtau, 0.0), E, Cc) - V0))

        if linear:
            nu = np.asarray(policy.weights)[Cc]
            dt_dep = float(dtau_dep * nu.sum())
        else:
            dt_dep = work(dtau_dep)
        t_end = min(t_arr, config.horizon)
        if t + dt_dep <= t_end:
            rec.hold(t, t + dt_dep, len(ids))
            t = t + dt_dep
            rem = [r - dtau_dep for r in rem]
            rem[j] = 0.0
            # simultaneous completions
            done = [i for i, r in enumerate(rem) if r <= 1e-15 * max(1.0, dtau_dep)]
            for i in sorted(done, reverse=True):
                jid = ids[i]
                for lst in (ids, ell, cls, rem):
                    del lst[i]
                rec.log(t, "departure", jid, len(ids))
            continue
        target = t_end - t
        if linear:
            dtau = target / float(np.asarray(policy.weights)[Cc].sum())
        else:
            dtau = _invert_work(work, target, dtau_dep)
        rec.hold(t, t_end, len(ids))
        rem = [max(r - dtau, 0.0) for r in rem]
        t = t_end
        if t_arr > config.horizon:
            break
        while k < n_arr and arr.times[k] == t_arr:
            add(next_id, float(arr.ell[k]), int(arr.cls[k]), t)
            next_id += 1
            k += 1
    return rec.result()


def _invert_work(work, target: float, upper: float) -> float:
    """Virtual time at which ``work`` reaches ``target`` (work is increasing)."""
    if target <= 0:
        return 0.0
    hi = math.log(upper)
    if work(math.exp(hi)) <= target:
        # only rounding separates target from the full step
        return upper
    lo = hi - 40.0
    while work(math.exp(lo)) > target:
        lo -= 40.0
        if lo < -745.0:
            return 0.0
    x = optimize.brentq(lambda x: work(math.exp(x)) - target, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500)
    return math.exp(x)


def _run_rk4(policy: PolicyKernel, arr: _Arrivals, config: SimConfig) -> ReplicationResult:
    """Service-rate ODE in wall-clock time, classical RK4 with bisection for departures."""
    rec = _Recorder(config.warmup, config.horizon, config.record_events)
    ids, ell, cls, V = [], [], [], []
    offset = RK4_FB_OFFSET if policy.kind == "fb" else 0.0

    def rates(Vv, E, Cc):
        # jobs stay present for the whole step; departures are located afterwards
        Vv = np.minimum(Vv, np.nextafter(E, 0.0))
        A = np.asarray(policy.A(Vv + offset, E + offset, Cc), dtype=float)
        s = A.sum()
        if not s > 0 or not np.isfinite(s):
            raise ArithmeticError(f"service-rate ODE failed: total weight {s}")
        return A / s

    def step(Vv, E, Cc, h):
        k1 = rates(Vv, E, Cc)
        k2 = rates(np.minimum(Vv + 0.5 * h * k1, E), E, Cc)
        k3 = rates(np.minimum(Vv + 0.5 * h * k2, E), E, Cc)
        k4 = rates(np.minimum(Vv + h * k3, E), E, Cc)
        return Vv + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    def add(job_id, e, c, t):
        ids.append(job_id)
        ell.append(e)
        cls.append(c)
        V.append(0.0)
        rec.log(t, "arrival", job_id, len(ids), e)

    next_id = 0
    for e, c in _initial(config):
        add(next_id, e, c, 0.0)
        next_id += 1
    t = 0.0
    k = 0
    n_arr = arr.times.size
    while True:
        t_arr = arr.times[k] if k < n_arr else math.inf
        t_end = min(t_arr, config.horizon)
        if not ids:
            rec.hold(t, t_end, 0)
            t = t_end
        else:
            E = np.asarray(ell)
            Cc = np.asarray(cls)
            Vv = np.asarray(V)
            h = min(config.rk4_step, t_end - t)
            Vn = step(Vv, E, Cc, h)
            if np.any(Vn >= E):
                # shrink the step onto the first completion
                lo, hi = 0.0, h
                while hi - lo > 1e-13 * max(1.0, t):
                    mid = 0.5 * (lo + hi)
                    if np.any(step(Vv, E, Cc, mid) >= E):
                        hi = mid
                    else:
                        lo = mid
                h = hi
                Vn = step(Vv, E, Cc, h)
                rec.hold(t, t + h, len(ids))
                t += h
                V = list(Vn)
                for i in sorted(np.flatnonzero(Vn >= E - 1e-12), reverse=True):
                    jid = ids[i]
                    for lst in (ids, ell, cls, V):
                        del lst[i]
                    rec.log(t, "departure", jid, len(ids))
                continue
            rec.hold(t, t + h, len(ids))
            t += h
            V = list(Vn)
            if t < t_end:
                continue
            t = t_end
        if t_arr > config.horizon:
            break
        while k < n_arr and arr.times[k] == t_arr:
            add(next_id, float(arr.ell[k]), int(arr.cls[k]), t)
            next_id += 1
            k += 1
    return rec.result()


# ---------------------------------------------------------------------------
# direct rules

def _direct_rates(rule: str, weights, V, E, C, T, t):
    """Service rates of the present jobs and the time of the next internal switch."""
    n = V.size
    r = np.zeros(n)
    switch = math.inf
    if rule in ("eps", "dps"):
        nu = np.asarray(weights)[C] if rule == "dps" else np.ones(n)
        return nu / nu.sum(), switch
    if rule == "srpt":
        r[int(np.lexsort((np.arange(n), E - V))[0])] = 1.0
        return r, switch
    if rule == "fb":
        vmin = V.min()
        tied = V <= vmin + FB_TIE_TOL
        m = int(tied.sum())
        r[tied] = 1.0 / m
        above = V[~tied]
        if above.size:
            switch = t + (above.min() - vmin) * m
        return r, switch
    if rule == "tfs":
        nu = np.asarray(weights)[C]
        val = nu * (t - T)
        i = int(np.lexsort((T, -val))[0])
        r[i] = 1.0
        faster = nu > nu[i]
        if np.any(faster):
            cross = (nu[faster] * T[faster] - nu[i] * T[i]) / (nu[faster] - nu[i])
            cross = cross[cross > t + 1e-12]
            if cross.size:
                switch = float(cross.min())
        return r, switch
    raise ValueError(f"unknown direct policy {rule!r}")


def _run_direct(rule: str, weights, arr: _Arrivals, config: SimConfig) -> ReplicationResult:
    rec = _Recorder(config.warmup, config.horizon, config.record_events)
    ids, ell, cls, V, T = [], [], [], [], []

    def add(job_id, e, c, t):
        ids.append(job_id)
        ell.append(e)
        cls.append(c)
        V.append(0.0)
        T.append(t)
        rec.log(t, "arrival", job_id, len(ids), e)

    next_id = 0
    for e, c in _initial(config):
        add(next_id, e, c, 0.0)
        next_id += 1
    t = 0.0
    k = 0
    n_arr = arr.times.size
    while True:
        t_arr = arr.times[k] if k < n_arr else math.inf
        t_end = min(t_arr, config.horizon)
        if ids:
            E = np.asarray(ell)
            Vv = np.asarray(V)
            r, switch = _direct_rates(rule, weights, Vv, E, np.asarray(cls), np.asarray(T), t)
            served = r > 0
            to_dep = np.full(r.size, math.inf)
            to_dep[served] = (E[served] - Vv[served]) / r[served]
            dt_dep = float(to_dep.min())
            dt = min(dt_dep, switch - t, t_end - t)
            rec.hold(t, t + dt, len(ids))
            Vn = Vv + r * dt
            if rule == "fb" and dt == switch - t and dt < dt_dep:
                # the tied group reaches the next attained level exactly
                Vn[served] = Vv[~served].min()
            t += dt
            done = np.flatnonzero(served & (to_dep <= dt * (1 + 1e-12) + 1e-15))
            Vn[done] = E[done]
            V = list(Vn)
            for i in sorted(done, reverse=True):
                jid = ids[i]
                for lst in (ids, ell, cls, V, T):
                    del lst[i]
                rec.log(t, "departure", jid, len(ids))
            if t < t_end:
                continue
        else:
            rec.hold(t, t_end, 0)
        t = t_end
        if t_arr > config.horizon:
            break
        while k < n_arr and arr.times[k] == t_arr:
            add(next_id, float(arr.ell[k]), int(arr.cls[k]), t)
            next_id += 1
            k += 1
    return rec.result()


# ---------------------------------------------------------------------------
# replication driver

def _streams(model: QueueModel, config: SimConfig, class_probs):
    seeds = np.random.SeedSequence(int(config.seed)).spawn(config.replications)
    for s in seeds:
        yield _arrival_stream(np.random.default_rng(s), model, config.horizon, class_probs)


def _run_all(runner, model, config, class_probs) -> SimEstimate:
    errs = config.problems()
    if errs:
        raise ValueError("; ".join(errs))
    streams = list(_streams(model, config, class_probs))
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(runner, streams))
    else:
        results = [runner(s) for s in streams]
    return _summarize(results, config)


def _summarize(results: list[ReplicationResult], config: SimConfig) -> SimEstimate:
    width = max(r.occupancy.size for r in results)
    P = np.vstack([_pad(r.pmf[None, :], width) for r in results])
    ks = np.arange(width)
    pmf, pmf_ci = t_interval(P, config.level)
    mq, mq_ci = t_interval(P @ ks, config.level)
    busy, busy_ci = t_interval(1.0 - P[:, 0], config.level)
    us = np.asarray(config.u_probe_points, dtype=float)
    if us.size:
        tr, tr_ci = t_interval(P @ np.exp(-np.outer(ks, us)), config.level)
    else:
        tr, tr_ci = np.empty(0), np.empty(0)
    return SimEstimate(pmf, pmf_ci, float(mq), float(mq_ci), float(busy), float(busy_ci), tr, tr_ci, P,
                       [r.departures for r in results],
                       [r.events for r in results] if config.record_events else [], config.level,
                       [r.jobs for r in results])


def simulate_grishechkin(model: QueueModel, config: SimConfig) -> SimEstimate:
    """Time-average queue-length statistics under the model's Grishechkin policy."""
    validate_model(model, stationary=False)
    policy = model.policy or eps_kernel()
    engine = _run_time_change if config.integrator == "time_change" else _run_rk4
    return _run_all(lambda s: engine(policy, s, config), model, config, policy.probs)


def simulate_direct(policy_id: str, model: QueueModel, config: SimConfig, weights=(1.0,), probs=(1.0,)) -> SimEstimate:
    """Same estimates under an exact scheduling rule (eps, dps, srpt, fb, tfs)."""
    if policy_id not in DIRECT_POLICIES:
        raise ValueError(f"unknown direct policy {policy_id!r}; choose from {DIRECT_POLICIES}")
    validate_model(model, stationary=False)
    if len(weights) != len(probs):
        raise ValueError("weights and probs must have equal length")
    return _run_all(lambda s: _run_direct(policy_id, weights, s, config), model, config, probs)


# ---------------------------------------------------------------------------
# distribution comparison and the limit study

def distribution_distance(p, q) -> tuple[float, float]:
    """Total variation (with the unlisted tail mass as one extra cell) and Kolmogorov distance."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = max(p.size, q.size)
    p = np.pad(p, (0, n - p.size))
    q = np.pad(q, (0, n - q.size))
    tail = (1.0 - p.sum()) - (1.0 - q.sum())
    # rounding can push disjoint-support pairs just above 1
    tv = min(0.5 * np.abs(p - q).sum() + 0.5 * abs(tail), 1.0)
    ks = float(np.max(np.abs(np.cumsum(p) - np.cumsum(q)))) if n else 0.0
    return float(tv), ks


@dataclass(frozen=True)
class LimitStudyRow:
    N: int
    tv: float
    tv_ci: float
    ks: float
    rep_tv: tuple = ()


def _paired_distances(a: SimEstimate, b: SimEstimate):
    tv, ks = [], []
    for p, q in zip(a.rep_pmfs, b.rep_pmfs):
        d = distribution_distance(p, q)
        tv.append(d[0])
        ks.append(d[1])
    return np.array(tv), np.array(ks)


def limit_convergence_study(family: str, N_list, model: QueueModel, config: SimConfig, weights=(1.0,),
                            probs=(1.0,), variant: str = "residual", control: bool = False):
    """tv distance between the order-N Grishechkin family and its direct rule, per N.

    Replication r of every run shares one arrival stream, so the distances are
    paired; each row reports the replication mean of tv with its Student-t
    half-width. ``control`` prepends an EPS-vs-EPS row labelled N = 0.
    """
    N_list = list(N_list)
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError(f"N_list must be increasing, got {N_list}")
    direct = {"srpt": "srpt", "fb": "fb", "tfs": "tfs"}[family]
    ref = simulate_direct(direct, model, config, weights, probs)
    rows = []
    if control:
        eps_model = replace(model, policy=eps_kernel(model.arrival.rate))
        tv, ks = _paired_distances(simulate_grishechkin(eps_model, config),
                                   simulate_direct("eps", model, config))
        m, hw = t_interval(tv, config.level)
        rows.append(LimitStudyRow(0, float(m), float(hw), float(ks.mean()), tuple(tv)))
    for N in N_list:
        pol = policy_from_name(family, N, weights, probs, model, variant)
        est = simulate_grishechkin(replace(model, policy=pol), config)
        tv, ks = _paired_distances(est, ref)
        m, hw = t_interval(tv, config.level)
        rows.append(LimitStudyRow(int(N), float(m), float(hw), float(ks.mean()), tuple(tv)))
    return rows
