import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascadeopf import failrate as fr
from cascadeopf.energy import DispatchPoint, EnergyModel, SystemState, find_equilibrium
from cascadeopf.netmodel import load_case


def fd(f, x, h=1e-6):
    return np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))]).T


def category(net, line):
    l = net.lines[line]
    ends = (l.from_bus, l.to_bus)
    if net.slack in ends:
        return "slack"
    if any(net.is_gen_bus[b] for b in ends):
        return "generator"
    return "load"


@pytest.fixture(scope="module")
def state30(acopf30, case30):
    return case30, acopf30.x, acopf30.y


def test_theta_matches_current_formula(state30):
    net, x, y = state30
    th = fr.theta_all(net, x, y)
    from cascadeopf.energy import full_voltages

    V, a = full_voltages(net, x, y)
    for l in net.lines:
        i = abs(V[l.from_bus] * np.exp(1j * a[l.from_bus]) - V[l.to_bus] * np.exp(1j * a[l.to_bus])) / l.reactance
        assert th[l.id] == pytest.approx(i**2, rel=1e-12)


def test_theta_derivatives_all_categories(state30):
    net, x, y = state30
    seen = set()
    for line in np.flatnonzero(net.failure_set):
        cat = category(net, line)
        g, f = fr.theta_derivatives(net, line, x, y)
        assert np.allclose(g, fd(lambda z: np.array(fr.theta(net, line, z, y)), x), atol=1e-7)
        H = fd(lambda z: fr.theta_gradient(net, line, z, y), x)
        assert np.max(np.abs(f.Q @ f.K @ f.Q.T - H)) < 1e-6
        assert np.allclose(fr.theta_hessian(net, line, x, y), H, atol=1e-6)
        if cat == "load":
            assert np.array_equal(f.K, np.diag([1.0, 1.0, -1.0]))
        assert f.rank == (3 if cat == "load" else 2)
        seen.add(cat)
    assert seen == {"load", "generator", "slack"}


def test_generator_only_line_has_no_factors(state30):
    net, x, y = state30
    line = int(np.flatnonzero(~net.failure_set)[0])
    with pytest.raises(ValueError):
        fr.theta_derivatives(net, line, x, y)


def test_failure_point_satisfies_local_conditions(state30):
    net, x, y = state30
    model = EnergyModel(net)
    ctx = fr.EquilibriumContext.build(net, x, y)
    for res in fr.results_from_table(ctx, fr.failure_rates(model, x, y, context=ctx)):
        if res.status != "ok":
            continue
        assert res.kkt_residual < 1e-9
        assert res.mu_star > 0
        assert fr.theta(net, res.line, res.x_star, y) == pytest.approx(res.theta_max, rel=1e-9)
        assert res.energy_gap > 0


@pytest.mark.parametrize("name", ["case3_load", "case5", "case9", "case14"])
def test_closed_form_matches_dense_determinants(name):
    net = load_case(name)
    if name == "case3_load":
        y = DispatchPoint(np.array([1.05, 1.03]), 0.0, np.array([1.0, 1.0]), np.zeros(2))
        x = find_equilibrium(net, y)
    else:
        from cascadeopf import fpacopf

        sol = fpacopf.solve_acopf(net, with_rates=False)
        x, y = sol.x, sol.y
    assert net.index.d_static <= 30
    model = EnergyModel(net)
    ctx = fr.EquilibriumContext.build(net, x, y)
    table = fr.failure_rates(model, x, y, context=ctx)
    checked = 0
    for k in range(len(table)):
        if not np.isfinite(table.mu[k]) or not np.isfinite(table.log_lam[k]):
            continue
        xs = fr.full_failure_point(ctx, table, k)
        dense = fr.dense_log_rate(model, int(table.lines[k]), x, y, xs, table.mu[k])
        assert dense["log_lam"] == pytest.approx(table.log_lam[k], rel=1e-8)
        checked += 1
    assert checked > 0


def test_dense_oracle_with_velocities_agrees(acopf9, case9):
    model = EnergyModel(case9)
    ctx = fr.EquilibriumContext.build(case9, acopf9.x, acopf9.y)
    table = fr.failure_rates(model, acopf9.x, acopf9.y, context=ctx)
    k = int(np.nanargmax(table.log_lam))
    xs = fr.full_failure_point(ctx, table, k)
    a = fr.dense_log_rate(model, int(table.lines[k]), acopf9.x, acopf9.y, xs, table.mu[k])
    b = fr.dense_log_rate(model, int(table.lines[k]), acopf9.x, acopf9.y, xs, table.mu[k], include_omega=True)
    # the kinetic block adds sum(log m) to both determinants and cancels
    assert a["log_lam"] == pytest.approx(b["log_lam"], rel=1e-10)


def test_overtripped_line_gets_infinite_rate(case9, acopf9):
    from dataclasses import replace

    net = replace(case9, lines=tuple(replace(l, i_lim=0.05, i_trip=0.055) for l in case9.lines))
    table = fr.failure_rates(EnergyModel(net), acopf9.x, acopf9.y)
    th = fr.theta_all(net, acopf9.x, acopf9.y)[table.lines]
    over = th >= table.theta_max
    assert over.any()
    assert all(s == "overtrip" for s, o in zip(table.status, over) if o)
    assert np.all(np.isinf(table.lam[over]))


def test_pruning_keeps_rates(acopf30, case30):
    model = EnergyModel(case30)
    full = fr.failure_rates(model, acopf30.x, acopf30.y)
    pruned = fr.failure_rates(model, acopf30.x, acopf30.y, prune=True, prune_gap=50.0)
    kept = np.array([s != "floor" for s in pruned.status])
    assert np.allclose(pruned.lam[kept], full.lam[kept], rtol=1e-9, atol=0)
    assert np.all(full.energy_gap[~kept] / model.tau > 50.0)


def test_gap_lower_bound_is_valid(acopf30, case30):
    model = EnergyModel(case30)
    ctx = fr.EquilibriumContext.build(case30, acopf30.x, acopf30.y)
    table = fr.failure_rates(model, acopf30.x, acopf30.y, context=ctx)
    frames = table.frames
    from cascadeopf.energy import full_voltages

    V, th = full_voltages(case30, acopf30.x, acopf30.y)
    lb = fr.gap_lower_bound(frames, ctx.local_c(frames), fr.local_coords(frames, V, th))
    ok = np.isfinite(table.energy_gap)
    assert np.all(lb[ok] <= table.energy_gap[ok] * (1 + 1e-9))


@pytest.mark.parametrize("tau", [5e-5, 1e-4, 2e-4])
def test_rate_decomposition(acopf9, case9, tau):
    table = fr.failure_rates(EnergyModel(case9, tau=tau), acopf9.x, acopf9.y)
    ok = np.array([s == "ok" for s in table.status])
    assert np.allclose(table.log_lam[ok], table.log_pf1[ok] + table.log_ef[ok])
    assert np.allclose(table.log_ef[ok], -table.energy_gap[ok] / tau)


def test_rate_grows_with_noise(acopf9, case9):
    lams = [fr.failure_rates(EnergyModel(case9, tau=t), acopf9.x, acopf9.y).log_lam for t in (5e-3, 1e-2, 2e-2)]
    ok = np.all(np.isfinite(lams), axis=0)
    assert np.all(lams[0][ok] < lams[1][ok]) and np.all(lams[1][ok] < lams[2][ok])


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-9, 0.5), st.floats(1.0, 1e5))
def test_probability_limit_roundtrip(eps, t_h):
    lam = fr.rate_limit_from_probability(eps, t_h)
    assert fr.failure_probability(lam, t_h) == pytest.approx(eps, rel=1e-9)


def test_probability_arguments_checked():
    with pytest.raises(ValueError):
        fr.rate_limit_from_probability(1.0, 10.0)
    with pytest.raises(ValueError):
        fr.failure_probability(-1.0, 1.0)


def test_single_line_api_matches_table(acopf9, case9):
    model = EnergyModel(case9)
    table = fr.failure_rates(model, acopf9.x, acopf9.y)
    k = int(np.nanargmax(table.log_lam))
    res = fr.failure_rate(model, int(table.lines[k]), acopf9.x, acopf9.y)
    assert res.log_lam == pytest.approx(table.log_lam[k], rel=1e-10)
    assert res.x_star.shape == acopf9.x.shape


def test_rate_report_columns(acopf9, case9):
    table = fr.failure_rates(EnergyModel(case9), acopf9.x, acopf9.y)
    text = fr.write_rate_report(case9, table, ["seed: 0"])
    lines = text.splitlines()
    assert lines[0] == "# seed: 0"
    assert lines[1].split(",") == list(fr.REPORT_COLUMNS)
    assert len(lines) == 2 + len(table)


def test_rates_from_flat_state_are_finite():
    net = load_case("case14")
    y = DispatchPoint.from_case(net)
    x = find_equilibrium(net, y, SystemState.flat(net))
    table = fr.failure_rates(EnergyModel(net), x, y)
    assert all(s in ("ok", "floor") for s in table.status)
    assert np.all(np.isfinite(table.lam))
