import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascadeopf.netmodel import (
    CaseParseError,
    CaseValidationError,
    DEFAULT_ITRIP_FACTOR,
    load_case,
    parse_case,
    serialize,
)

CASES = ["case3", "case3_load", "case5", "case9", "case14", "case30", "case118"]

TINY = """
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1 0 1 1 1.1 0.9;
  2 1 50 20 0 10 1 1 0 1 1 1.1 0.9;
];
mpc.gen = [
  1 50 0 100 -100 1.0 100 1 100 0;
];
mpc.branch = [
  1 2 0 0.1 0.02 100 100 100 0 0 1 -360 360;
];
"""


@pytest.mark.parametrize("name", CASES)
def test_bundled_cases_load(name):
    net = load_case(name)
    assert net.n_bus > 0 and net.n_line > 0
    assert sum(b.is_slack for b in net.buses) == 1
    flag = np.array([not (net.is_gen_bus[l.from_bus] and net.is_gen_bus[l.to_bus]) for l in net.lines])
    assert np.array_equal(flag, net.failure_set)


@pytest.mark.parametrize("name", CASES)
def test_susceptance_structure(name):
    net = load_case(name)
    B = net.B
    assert np.allclose(B, B.T)
    assert np.allclose(B.sum(axis=1), net.b_shunt)
    for l in net.lines:
        assert B[l.from_bus, l.to_bus] > 0


def test_case118_dimensions(case118):
    assert net_dims(case118) == (118, 186, 54)
    assert case118.index.d_static == 181


def net_dims(net):
    return net.n_bus, net.n_line, net.n_gen


def test_tiny_case_units():
    net = parse_case(TINY)
    assert net.buses[1].p_d == pytest.approx(0.5)
    assert net.buses[1].b_shunt == pytest.approx(0.1)
    l = net.lines[0]
    assert l.i_lim == pytest.approx(1.0)
    assert l.i_trip == pytest.approx(DEFAULT_ITRIP_FACTOR)
    assert l.theta_max == pytest.approx(DEFAULT_ITRIP_FACTOR**2)
    assert net.b_shunt[1] == pytest.approx(0.1 + 0.01)


def test_zero_shunts_and_load_scale():
    net = parse_case(TINY, zero_shunts=True, load_scale=1.05, itrip_factor=1.2)
    assert np.allclose(net.b_shunt, 0)
    assert net.buses[1].p_d == pytest.approx(0.525)
    assert net.lines[0].i_trip == pytest.approx(1.2)


def test_isolated_bus_type_dropped():
    text = TINY.replace("mpc.bus = [\n", "mpc.bus = [\n  3 4 0 0 0 0 1 1 0 1 1 1.1 0.9;\n")
    assert parse_case(text).n_bus == 2


def test_unlimited_line_has_infinite_limit():
    net = parse_case(TINY.replace("0.02 100 100 100", "0.02 0 0 0"))
    assert math.isinf(net.lines[0].i_lim)


@pytest.mark.parametrize(
    "text, err",
    [
        (TINY.replace("mpc.branch", "mpc.brunch"), CaseParseError),
        (TINY.replace("1 2 0 0.1 0.02", "1 2 0 abc 0.02"), CaseParseError),
        (TINY.replace("0.02 100 100 100 0 0 1 -360 360", "0.02 100 100"), CaseParseError),
        (TINY.rstrip().rstrip("];"), CaseParseError),
        (TINY.replace("1 -360 360;\n];", "1 -360 360;\n  2 1 0 0.1;\n];"), CaseParseError),
        (TINY.replace("1 2 0 0.1", "1 2 0 -0.1"), CaseValidationError),
        (TINY.replace("1 3 0 0", "1 1 0 0"), CaseValidationError),
    ],
)
def test_malformed_cases_raise(text, err):
    with pytest.raises(err):
        parse_case(text)


def test_parse_error_reports_line():
    with pytest.raises(CaseParseError) as info:
        parse_case(TINY.replace("1 2 0 0.1 0.02", "1 2 0 abc 0.02"))
    assert info.value.line is not None


def test_strict_mode_rejects_resistance():
    with pytest.raises(CaseValidationError):
        parse_case(TINY.replace("1 2 0 0.1", "1 2 0.01 0.1"), strict=True)


def test_islanded_network_rejected():
    text = TINY.replace("mpc.bus = [\n", "mpc.bus = [\n  3 1 0 0 0 0 1 1 0 1 1 1.1 0.9;\n")
    with pytest.raises(CaseValidationError):
        parse_case(text)


@pytest.mark.parametrize("name", ["case9", "case30"])
def test_native_roundtrip(name):
    net = load_case(name)
    again = parse_case(serialize(net))
    assert again == net
    assert serialize(again) == serialize(net)


def test_index_map_partition(case30):
    idx = case30.index
    assert idx.n_v == case30.n_bus - len(case30.gen_buses)
    assert idx.n_theta == case30.n_bus - 1
    assert idx.n_omega == case30.n_gen - 1
    pos = np.r_[idx.v_pos[idx.v_pos >= 0], idx.th_pos[idx.th_pos >= 0], idx.om_pos[idx.om_pos >= 0]]
    assert sorted(pos) == list(range(idx.d))


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_subnetwork_keeps_consistent_flags(data):
    net = load_case("case14")
    drop = data.draw(st.sets(st.integers(0, net.n_line - 1), max_size=4))
    sub = net.subnetwork(range(net.n_bus), [l for l in range(net.n_line) if l not in drop]) if _connected(net, drop) else None
    if sub is None:
        return
    assert sub.n_line == net.n_line - len(drop)
    assert [l.label for l in sub.lines] == [l.label for l in net.lines if l.id not in drop]
    assert np.allclose(sub.B.sum(axis=1), sub.b_shunt)


def _connected(net, drop):
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    keep = [l for l in net.lines if l.id not in drop]
    A = coo_matrix((np.ones(len(keep)), ([l.from_bus for l in keep], [l.to_bus for l in keep])), shape=(net.n_bus,) * 2)
    return connected_components(A, directed=False)[0] == 1


def test_subnetwork_drops_generators_and_reindexes(case9):
    # drop bus 3 (label 3, generator bus) together with its line to bus 6
    keep_buses = [b.id for b in case9.buses if b.label != 3]
    keep_lines = [l.id for l in case9.lines if case9.buses[l.from_bus].label != 3 and case9.buses[l.to_bus].label != 3]
    sub = case9.subnetwork(keep_buses, keep_lines)
    assert sub.n_bus == 8 and sub.n_gen == 2
    assert [b.id for b in sub.buses] == list(range(8))
    assert 3 not in [b.label for b in sub.buses]
