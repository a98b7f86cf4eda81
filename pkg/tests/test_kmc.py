import dataclasses

import numpy as np
import pytest
from scipy import stats

from cascadeopf import kmc
from cascadeopf.energy import DispatchPoint, EnergyModel, find_equilibrium
from cascadeopf.failrate import failure_rates
from cascadeopf.netmodel import load_case


@pytest.fixture(scope="module")
def case3():
    return load_case("case3_load")


@pytest.fixture(scope="module")
def dispatch3(case3):
    y = DispatchPoint(np.array([1.05, 1.03]), 0.0, np.array([1.0, 1.0]), np.zeros(2))
    return find_equilibrium(case3, y), y


@pytest.fixture(scope="module")
def batch30(case30, acopf30):
    return kmc.run_batch(case30, {"n0": (acopf30.x, acopf30.y)}, 6, seed=3)["n0"]


# -- contingency sampling ------------------------------------------------------


def test_zipf_normalisation():
    p = kmc.zipf_pmf()
    z = sum(k**-3.0 for k in range(1, 11))
    assert z == pytest.approx(1.197532, abs=1e-6)
    assert p.sum() == pytest.approx(1.0)
    assert p[0] == pytest.approx(0.83505, abs=5e-6)
    assert np.all(np.diff(p) < 0)


def test_line_distances(case9):
    D = kmc.line_distances(case9)
    assert np.all(np.diag(D) == 0)
    assert np.array_equal(D, D.T)
    share = [(i, j) for i in range(case9.n_line) for j in range(case9.n_line) if i != j
             and {case9.line_from[i], case9.line_to[i]} & {case9.line_from[j], case9.line_to[j]}]
    assert all(D[i, j] == 1 for i, j in share)
    Db = kmc.line_distances(case9, "bus")
    assert np.all(Db[D == 1] == 1)
    with pytest.raises(ValueError):
        kmc.line_distances(case9, "euclid")


def test_pair_distance_matches(case118):
    D = kmc.line_distances(case118)
    rng = np.random.default_rng(0)
    for _ in range(300):
        pair = kmc.sample_initial_contingencies(case118, rng, D)
        assert 1 <= pair.sampled_distance <= 10
        assert D[pair.first_line, pair.second_line] == pair.sampled_distance


def test_first_line_uniform(case9):
    D = kmc.line_distances(case9)
    rng = np.random.default_rng(1)
    n = 100_000
    # the first line is a single integer draw, so sampling it directly keeps the test fast
    first = np.array([kmc.sample_initial_contingencies(case9, rng, D).first_line for _ in range(n // 10)])
    counts = np.bincount(first, minlength=case9.n_line)
    chi = stats.chisquare(counts)
    assert chi.pvalue > 0.001
    exp = len(first) / case9.n_line
    assert np.all(np.abs(counts - exp) < 3 * np.sqrt(exp) + 1)


def test_two_line_network(case3):
    net = case3.subnetwork(range(3), [0, 1])
    rng = np.random.default_rng(2)
    for _ in range(50):
        pair = kmc.sample_initial_contingencies(net, rng)
        assert {pair.first_line, pair.second_line} == {0, 1}
        assert pair.sampled_distance == 1


def test_single_line_rejected(case3):
    net = case3.subnetwork([0, 2], [1])
    with pytest.raises(ValueError):
        kmc.sample_initial_contingencies(net, np.random.default_rng(0))


# -- exponential race ----------------------------------------------------------


def test_next_failure_is_exponential_race():
    rng = np.random.default_rng(7)
    lam, L = 0.3, 12
    rates = np.full(L, lam)
    draws = [kmc.next_failure(rates, rng) for _ in range(10_000)]
    t = np.array([d[1] for d in draws])
    ks = stats.kstest(t, "expon", args=(0, 1 / (L * lam)))
    assert ks.pvalue > 0.01
    idx = np.bincount([d[0] for d in draws], minlength=L)
    assert stats.chisquare(idx).pvalue > 0.01


def test_next_failure_zero_rates():
    k, t = kmc.next_failure(np.zeros(4), np.random.default_rng(0))
    assert k == -1 and t == np.inf


# -- single cascades -----------------------------------------------------------


def test_huge_trip_current_gives_no_events(case30, acopf30):
    lines = tuple(dataclasses.replace(l, i_trip=3 * l.i_trip) for l in case30.lines)
    net = dataclasses.replace(case30, lines=lines)
    table = failure_rates(EnergyModel(net), acopf30.x, acopf30.y)
    assert np.all(table.lam < 1e-30)
    rng = np.random.default_rng(4)
    for _ in range(3):
        pair = kmc.sample_initial_contingencies(net, rng)
        tr = kmc.simulate_cascade(net, acopf30.x, acopf30.y, pair, rng)
        assert tr.events == []
        assert tr.terminated == "horizon"
        assert tr.total_failed_lines == 0 and tr.total_load_shed == 0.0


def test_trace_invariants(case30, batch30):
    traces, st = batch30
    demand = case30.total_demand()
    for tr in traces:
        times = tr.failure_times()
        assert np.all(np.diff(times) > 0)
        assert np.all(times <= tr.horizon)
        assert tr.total_failed_lines == len(times) <= case30.n_line
        assert sum(e.load_shed_increment for e in tr.events) == pytest.approx(tr.total_load_shed, abs=1e-12)
        assert tr.total_load_shed + tr.initial_shed <= demand + 1e-9
        lost = [b for e in tr.events for b in e.disconnected_buses]
        assert len(lost) == len(set(lost)), "a bus was disconnected twice"
        failed = [e.failed_line for e in tr.events]
        assert len(failed) == len(set(failed))
        assert {tr.initial.first_line, tr.initial.second_line}.isdisjoint(failed)
        assert all(e.cause in kmc.CAUSES for e in tr.events)
        if tr.terminated == "collapse":
            assert tr.total_load_shed + tr.initial_shed == pytest.approx(demand, rel=1e-9)


def test_include_initial_counts_pair(case30, acopf30, batch30):
    traces, _ = batch30
    opts = kmc.CascadeOptions(include_initial=True)
    r_pair, r_sim = kmc.run_rngs(3, 0)
    pair = kmc.sample_initial_contingencies(case30, r_pair, kmc.line_distances(case30))
    tr = kmc.simulate_cascade(case30, acopf30.x, acopf30.y, pair, r_sim, opts)
    assert tr.total_failed_lines == traces[0].total_failed_lines + 2
    assert tr.total_load_shed == pytest.approx(traces[0].total_load_shed + traces[0].initial_shed)


def test_batch_is_deterministic(case30, acopf30, batch30):
    traces, st = batch30
    again, st2 = kmc.run_batch(case30, {"n0": (acopf30.x, acopf30.y)}, 6, seed=3)["n0"]
    assert kmc.write_traces(traces, case30) == kmc.write_traces(again, case30)
    assert kmc.write_stats({"n0": st}) == kmc.write_stats({"n0": st2})


# -- statistics ----------------------------------------------------------------


def test_stats_are_functions_of_traces(batch30):
    traces, st = batch30
    failed = np.array([t.total_failed_lines for t in traces])
    shed = np.array([t.total_load_shed for t in traces])
    assert st.mean_failed == pytest.approx(failed.mean())
    assert st.sd_failed == pytest.approx(failed.std(ddof=1))
    assert st.mean_shed == pytest.approx(shed.mean())
    assert st.sd_shed == pytest.approx(shed.std(ddof=1))
    for thr, frac in (st.survival_failed, st.survival_shed):
        assert np.all(np.diff(frac) <= 0)
    thr, frac = st.survival_failed
    assert thr[0] == 1 and frac[0] == pytest.approx(np.mean(failed >= 1))


def test_single_run_stats_equal_trace(case30, acopf30):
    traces, st = kmc.run_batch(case30, {"n0": (acopf30.x, acopf30.y)}, 1, seed=11)["n0"]
    tr = traces[0]
    assert st.n_runs == 1
    assert st.mean_failed == tr.total_failed_lines and st.sd_failed == 0.0
    assert st.mean_shed == tr.total_load_shed and st.sd_shed == 0.0


def test_timeline_is_conditional_mean(batch30):
    traces, st = batch30
    grid, mean = st.timeline
    hit = [t for t in traces if t.total_failed_lines > 0]
    assert mean[-1] == pytest.approx(np.mean([t.total_failed_lines for t in hit]))
    assert np.all(np.diff(mean) >= 0)
    assert grid[0] == 0.0 and grid[-1] == 3600.0


def test_survival_helper():
    v = np.array([0, 1, 1, 3])
    assert np.allclose(kmc.survival(v, [0, 1, 2, 3, 4]), [1, 0.75, 0.25, 0.25, 0])


def test_run_batch_rejects_zero_runs(case30, acopf30):
    with pytest.raises(ValueError):
        kmc.run_batch(case30, {"n0": (acopf30.x, acopf30.y)}, 0)


def test_writers(case30, batch30):
    traces, st = batch30
    text = kmc.write_traces(traces, case30, header=["seed 3"])
    lines = text.splitlines()
    assert lines[0] == "# seed 3"
    assert lines[1].split(",") == list(kmc.TRACE_COLUMNS)
    assert len(lines) == 2 + sum(len(t.events) for t in traces)
    script = kmc.gnuplot_script(["n0"])
    assert "n0_failed.dat" in script and "logscale" in script
    assert kmc.timeline_data(st).count("\n") == 361


# -- first passage oracle ------------------------------------------------------


def test_first_passage_immediate(case3, dispatch3):
    x, y = dispatch3
    model = EnergyModel(case3, tau=6e-3)
    fp = kmc.euler_maruyama_first_passage(model, y, 1, x, 1e-4, 20, np.random.default_rng(0), theta_max=0.0)
    assert fp.mean == 0.0 and np.all(fp.times == 0.0) and fp.n_censored == 0


def test_first_passage_censoring(case3, dispatch3):
    x, y = dispatch3
    model = EnergyModel(case3, tau=1e-6)
    fp = kmc.euler_maruyama_first_passage(model, y, 1, x, 1e-4, 10, np.random.default_rng(0), max_steps=50)
    assert fp.n_censored == 10 and np.isnan(fp.mean)


def test_first_passage_grows_as_noise_drops(case3, dispatch3):
    x, y = dispatch3
    means = []
    for tau in (1e-2, 8e-3, 6e-3):
        fp = kmc.euler_maruyama_first_passage(EnergyModel(case3, tau=tau), y, 1, x, 5e-5, 100,
                                              np.random.default_rng(5), max_steps=400_000)
        assert fp.n_censored == 0
        means.append(fp.mean)
    assert means[0] < means[1] < means[2]
