"""Lossless network model: case parsing, susceptance matrix and the x/y state partition.

Two input formats are supported:

* a subset of the MATPOWER text format (``mpc.bus``, ``mpc.gen``, ``mpc.branch``,
  ``mpc.gencost`` and ``mpc.baseMVA``);
* a native JSON document mirroring the :class:`Bus`, :class:`Line` and
  :class:`Generator` fields, written by :func:`serialize`.

All quantities are stored in per unit on the case power base. Branch resistances
and conductances are dropped at parse time and transformer taps are removed.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

DEFAULT_MASS = 0.0531
DEFAULT_ITRIP_FACTOR = 1.10

NATIVE_FORMAT = "cascadeopf-case"
NATIVE_VERSION = 1


class CaseParseError(ValueError):
    """Malformed case text."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class CaseValidationError(ValueError):
    """Case data violating a structural invariant of the lossless model."""


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float
    p_d: float
    q_d: float
    is_slack: bool = False
    b_shunt: float = 0.0
    label: int = 0
    v_init: float = 1.0
    theta_init: float = 0.0


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    reactance: float
    i_lim: float
    i_trip: float
    in_failure_set: bool = False
    charging: float = 0.0
    label: int = 0

    @property
    def susceptance_magnitude(self) -> float:
        return 1.0 / self.reactance

    @property
    def theta_max(self) -> float:
        return self.i_trip**2


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mass: float = DEFAULT_MASS
    p_init: float = 0.0
    q_init: float = 0.0
    v_set: float = 1.0
    label: int = 0

    def cost_value(self, p: float) -> float:
        c2, c1, c0 = self.cost
        return c2 * p * p + c1 * p + c0


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    base_mva: float = 100.0
    name: str = ""

    def __post_init__(self):
        validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.is_slack)

    @cached_property
    def slack_generator(self) -> int:
        return next(g.id for g in self.generators if g.bus == self.slack)

    @cached_property
    def gens_at_bus(self) -> tuple[tuple[int, ...], ...]:
        at = [[] for _ in self.buses]
        for g in self.generators:
            at[g.bus].append(g.id)
        return tuple(tuple(a) for a in at)

    @cached_property
    def is_gen_bus(self) -> np.ndarray:
        return np.array([len(a) > 0 for a in self.gens_at_bus], dtype=bool)

    @cached_property
    def gen_buses(self) -> np.ndarray:
        """Bus ids hosting at least one generator, sorted."""
        return np.flatnonzero(self.is_gen_bus)

    @cached_property
    def load_buses(self) -> np.ndarray:
        """Bus ids without generators (the non-generator set), sorted."""
        return np.flatnonzero(~self.is_gen_bus)

    @cached_property
    def p_d(self) -> np.ndarray:
        return np.array([b.p_d for b in self.buses])

    @cached_property
    def q_d(self) -> np.ndarray:
        return np.array([b.q_d for b in self.buses])

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([g.bus for g in self.generators], dtype=int)

    @cached_property
    def gen_incidence(self) -> np.ndarray:
        """n_bus x n_gen matrix with a one where generator k sits at bus i."""
        cg = np.zeros((self.n_bus, self.n_gen))
        cg[self.gen_bus, np.arange(self.n_gen)] = 1.0
        return cg

    @cached_property
    def line_from(self) -> np.ndarray:
        return np.array([l.from_bus for l in self.lines], dtype=int)

    @cached_property
    def line_to(self) -> np.ndarray:
        return np.array([l.to_bus for l in self.lines], dtype=int)

    @cached_property
    def line_y(self) -> np.ndarray:
        """Series admittance magnitudes |Y_ij| = 1/x per line."""
        return np.array([1.0 / l.reactance for l in self.lines])

    @cached_property
    def i_lim(self) -> np.ndarray:
        return np.array([l.i_lim for l in self.lines])

    @cached_property
    def i_trip(self) -> np.ndarray:
        return np.array([l.i_trip for l in self.lines])

    @cached_property
    def failure_set(self) -> np.ndarray:
        return np.array([l.in_failure_set for l in self.lines], dtype=bool)

    @cached_property
    def b_shunt(self) -> np.ndarray:
        """Total shunt susceptance per bus: bus shunts plus half of each line's charging."""
        bsh = np.array([b.b_shunt for b in self.buses])
        for l in self.lines:
            bsh[l.from_bus] += 0.5 * l.charging
            bsh[l.to_bus] += 0.5 * l.charging
        return bsh

    @cached_property
    def B(self) -> np.ndarray:
        return build_susceptance(self)

    @cached_property
    def index(self) -> StateIndexMap:
        return index_map(self)

    def total_demand(self) -> float:
        return float(self.p_d.sum())

    def subnetwork(self, bus_ids, line_ids) -> Network:
        """Network restricted to the given buses and lines, re-indexed from zero.

        Generators at removed buses are dropped. Labels are kept so callers can map
        back to the original elements.
        """
        bus_ids = sorted(int(b) for b in bus_ids)
        new_id = {b: k for k, b in enumerate(bus_ids)}
        buses = tuple(replace(self.buses[b], id=new_id[b]) for b in bus_ids)
        lines = []
        for lid in sorted(int(l) for l in line_ids):
            l = self.lines[lid]
            if l.from_bus in new_id and l.to_bus in new_id:
                lines.append(replace(l, id=len(lines), from_bus=new_id[l.from_bus], to_bus=new_id[l.to_bus]))
        gens = []
        for g in self.generators:
            if g.bus in new_id:
                gens.append(replace(g, id=len(gens), bus=new_id[g.bus]))
        has_gen = {g.bus for g in gens}
        lines = [
            replace(l, in_failure_set=(l.from_bus not in has_gen or l.to_bus not in has_gen)) for l in lines
        ]
        return Network(buses, tuple(lines), tuple(gens), self.base_mva, self.name)


@dataclass(frozen=True)
class StateIndexMap:
    """Positions of the state-vector components inside x.

    Ordering is the voltage block (non-generator buses), then the angle block
    (non-slack buses), then the angular-velocity block (non-slack generators), each
    sorted by id. ``v_pos``/``th_pos`` hold -1 for buses whose component lives in y.
    """

    n_bus: int
    load_buses: np.ndarray
    angle_buses: np.ndarray
    omega_gens: np.ndarray
    v_pos: np.ndarray
    th_pos: np.ndarray
    om_pos: np.ndarray = field(repr=False)

    @property
    def n_v(self) -> int:
        return len(self.load_buses)

    @property
    def n_theta(self) -> int:
        return len(self.angle_buses)

    @property
    def n_omega(self) -> int:
        return len(self.omega_gens)

    @property
    def d_static(self) -> int:
        """Dimension of x with the angular velocities left out."""
        return self.n_v + self.n_theta

    @property
    def d(self) -> int:
        return self.n_v + self.n_theta + self.n_omega


def index_map(network: Network) -> StateIndexMap:
    n = network.n_bus
    load = network.load_buses
    angle = np.array([i for i in range(n) if i != network.slack], dtype=int)
    omega = np.array([g.id for g in network.generators if g.id != network.slack_generator], dtype=int)
    v_pos = -np.ones(n, dtype=int)
    v_pos[load] = np.arange(len(load))
    th_pos = -np.ones(n, dtype=int)
    th_pos[angle] = len(load) + np.arange(len(angle))
    om_pos = -np.ones(network.n_gen, dtype=int)
    om_pos[omega] = len(load) + len(angle) + np.arange(len(omega))
    return StateIndexMap(n, load, angle, omega, v_pos, th_pos, om_pos)


def build_susceptance(network: Network) -> np.ndarray:
    """Susceptance matrix B of the lossless network.

    Off-diagonal B_ij = sum of 1/x over lines joining i and j; B_ii = -sum_j 1/x_ij + b_sh,i
    where b_sh,i collects bus shunts and half of the line charging.
    """
    n = network.n_bus
    B = np.zeros((n, n))
    for l in network.lines:
        if not l.reactance > 0:
            raise CaseValidationError(f"line {l.id} has non-positive reactance {l.reactance}")
        b = 1.0 / l.reactance
        i, j = l.from_bus, l.to_bus
        B[i, j] += b
        B[j, i] += b
        B[i, i] -= b
        B[j, j] -= b
    B[np.diag_indices(n)] += network.b_shunt
    return B


def validate(network: Network) -> None:
    buses, lines, gens = network.buses, network.lines, network.generators
    for k, b in enumerate(buses):
        if b.id != k:
            raise CaseValidationError(f"bus ids must be 0..n-1 in order (bus {k} has id {b.id})")
        if not 0 < b.v_min <= b.v_max:
            raise CaseValidationError(f"bus {b.label}: voltage bounds must satisfy 0 < v_min <= v_max")
    slack = [b.id for b in buses if b.is_slack]
    if len(slack) != 1:
        raise CaseValidationError(f"expected exactly one slack bus, found {len(slack)}")
    n_at_slack = sum(g.bus == slack[0] for g in gens)
    if n_at_slack != 1:
        raise CaseValidationError(f"slack bus must host exactly one generator, found {n_at_slack}")
    for k, g in enumerate(gens):
        if g.id != k or not 0 <= g.bus < len(buses):
            raise CaseValidationError(f"generator {k}: bad id or bus reference")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseValidationError(f"generator {g.label}: inverted generation bounds")
        if not g.mass > 0:
            raise CaseValidationError(f"generator {g.label}: mass must be positive")
    gen_buses = {g.bus for g in gens}
    for k, l in enumerate(lines):
        if l.id != k or not (0 <= l.from_bus < len(buses) and 0 <= l.to_bus < len(buses)):
            raise CaseValidationError(f"line {k}: bad id or bus reference")
        if l.from_bus == l.to_bus:
            raise CaseValidationError(f"line {l.label} is a self-loop")
        if not l.reactance > 0:
            raise CaseValidationError(f"line {l.label} has non-positive reactance {l.reactance}")
        if not (l.i_trip >= l.i_lim > 0):
            raise CaseValidationError(f"line {l.label}: need i_trip >= i_lim > 0")
        expected = l.from_bus not in gen_buses or l.to_bus not in gen_buses
        if l.in_failure_set != expected:
            raise CaseValidationError(f"line {l.label}: failure-set flag inconsistent with generator placement")
    if len(buses) > 1:
        adj = coo_matrix(
            (np.ones(len(lines)), ([l.from_bus for l in lines], [l.to_bus for l in lines])),
            shape=(len(buses), len(buses)),
        )
        n_comp, _ = connected_components(adj, directed=False)
        if n_comp != 1:
            raise CaseValidationError(f"network topology has {n_comp} islands")


# ---------------------------------------------------------------------------
# MATPOWER subset
# ---------------------------------------------------------------------------

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    # quotes only appear in mpc.version = '2'
    return line.split("%", 1)[0]


def _parse_matpower_tables(text: str) -> tuple[dict[str, np.ndarray], dict[str, object]]:
    tables: dict[str, np.ndarray] = {}
    scalars: dict[str, object] = {}
    lines = text.splitlines()
    k = 0
    while k < len(lines):
        raw = _strip_comment(lines[k])
        m = _ASSIGN.match(raw)
        if not m:
            k += 1
            continue
        name, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("["):
            start = k + 1
            body = rhs[1:]
            rows: list[list[float]] = []
            row_lines: list[int] = []
            done = False
            cur = k
            while True:
                if "]" in body:
                    body, rest = body.split("]", 1)
                    if rest.strip() not in ("", ";"):
                        raise CaseParseError(f"unexpected text after table '{name}'", cur + 1)
                    done = True
                for chunk in body.split(";"):
                    toks = chunk.replace(",", " ").split()
                    if not toks:
                        continue
                    try:
                        rows.append([float(t) for t in toks])
                    except ValueError:
                        raise CaseParseError(f"non-numeric entry in table '{name}': {chunk.strip()!r}", cur + 1)
                    row_lines.append(cur + 1)
                if done:
                    break
                cur += 1
                if cur >= len(lines):
                    raise CaseParseError(f"unterminated table '{name}'", start)
                body = _strip_comment(lines[cur])
            widths = {len(r) for r in rows}
            if len(widths) > 1:
                bad = next(i for i, r in enumerate(rows) if len(r) != len(rows[0]))
                raise CaseParseError(f"ragged row in table '{name}'", row_lines[bad])
            tables[name] = np.array(rows, dtype=float).reshape(len(rows), -1)
            k = cur + 1
        else:
            value = rhs.rstrip(";").strip()
            if value.startswith("'") or value.startswith('"'):
                scalars[name] = value.strip("'\"")
            else:
                try:
                    scalars[name] = float(value)
                except ValueError:
                    raise CaseParseError(f"cannot parse value of mpc.{name}: {value!r}", k + 1)
            k += 1
    return tables, scalars


def _from_matpower(text: str, itrip_factor: float, strict: bool, zero_shunts: bool, load_scale: float, name: str) -> Network:
    tables, scalars = _parse_matpower_tables(text)
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise CaseParseError(f"missing table mpc.{required}")
    base = float(scalars.get("baseMVA", 100.0))
    bus_t, gen_t, br_t = tables["bus"], tables["gen"], tables["branch"]
    if bus_t.shape[1] < 13 or gen_t.shape[1] < 10 or br_t.shape[1] < 11:
        raise CaseParseError("bus/gen/branch tables have too few columns")
    gencost = tables.get("gencost")

    keep_bus = bus_t[:, 1] != 4
    bus_t = bus_t[keep_bus]
    labels = bus_t[:, 0].astype(int)
    order = np.argsort(labels, kind="stable")
    bus_t, labels = bus_t[order], labels[order]
    if len(set(labels.tolist())) != len(labels):
        raise CaseValidationError("duplicate bus numbers")
    pos = {lab: k for k, lab in enumerate(labels.tolist())}

    if strict:
        if np.any(bus_t[:, 4] != 0):
            raise CaseValidationError("strict mode: nonzero shunt conductance")
        if np.any(br_t[:, 2] != 0):
            raise CaseValidationError("strict mode: nonzero branch resistance")
        if np.any((br_t[:, 8] != 0) & (br_t[:, 8] != 1)) or np.any(br_t[:, 9] != 0):
            raise CaseValidationError("strict mode: transformer taps or phase shifts present")

    buses = []
    for k, row in enumerate(bus_t):
        buses.append(
            Bus(
                id=k,
                v_min=float(row[12]),
                v_max=float(row[11]),
                p_d=load_scale * float(row[2]) / base,
                q_d=load_scale * float(row[3]) / base,
                is_slack=int(row[1]) == 3,
                b_shunt=0.0 if zero_shunts else float(row[5]) / base,
                label=int(row[0]),
                v_init=float(row[7]),
                theta_init=math.radians(float(row[8])),
            )
        )

    gens = []
    for k, row in enumerate(gen_t):
        if row[7] <= 0 or int(row[0]) not in pos:
            continue
        cost = (0.0, 0.0, 0.0)
        if gencost is not None:
            cr = gencost[k]
            if int(cr[0]) != 2:
                raise CaseValidationError("only polynomial generator costs are supported")
            ncoef = int(cr[3])
            if ncoef > 3:
                raise CaseValidationError("generator costs of degree above two are not supported")
            coefs = list(cr[4 : 4 + ncoef])
            coefs = [0.0] * (3 - ncoef) + coefs
            c2, c1, c0 = coefs
            cost = (c2 * base * base, c1 * base, c0)
        gens.append(
            Generator(
                id=len(gens),
                bus=pos[int(row[0])],
                p_min=float(row[9]) / base,
                p_max=float(row[8]) / base,
                q_min=float(row[4]) / base,
                q_max=float(row[3]) / base,
                cost=tuple(float(c) for c in cost),
                p_init=float(row[1]) / base,
                q_init=float(row[2]) / base,
                v_set=float(row[5]),
                label=k,
            )
        )
    gen_buses = {g.bus for g in gens}

    lines = []
    for k, row in enumerate(br_t):
        if row[10] <= 0:
            continue
        f, t = int(row[0]), int(row[1])
        if f not in pos or t not in pos:
            continue
        rate = float(row[5])
        i_lim = rate / base if rate > 0 else math.inf
        lines.append(
            Line(
                id=len(lines),
                from_bus=pos[f],
                to_bus=pos[t],
                reactance=float(row[3]),
                i_lim=i_lim,
                i_trip=itrip_factor * i_lim,
                in_failure_set=(pos[f] not in gen_buses or pos[t] not in gen_buses),
                charging=0.0 if zero_shunts else float(row[4]),
                label=k,
            )
        )
    return Network(tuple(buses), tuple(lines), tuple(gens), base, name)


# ---------------------------------------------------------------------------
# native format
# ---------------------------------------------------------------------------

_BUS_FIELDS = [f for f in Bus.__dataclass_fields__]
_LINE_FIELDS = [f for f in Line.__dataclass_fields__]
_GEN_FIELDS = [f for f in Generator.__dataclass_fields__]


def _encode_float(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _decode_float(v):
    if isinstance(v, str):
        return float(v)
    return v


def serialize(network: Network) -> str:
    """Canonical native serialization (JSON, fixed field order)."""
    doc = {
        "format": NATIVE_FORMAT,
        "version": NATIVE_VERSION,
        "name": network.name,
        "base_mva": network.base_mva,
        "buses": [[_encode_float(getattr(b, f)) for f in _BUS_FIELDS] for b in network.buses],
        "lines": [[_encode_float(getattr(l, f)) for f in _LINE_FIELDS] for l in network.lines],
        "generators": [
            [list(g.cost) if f == "cost" else _encode_float(getattr(g, f)) for f in _GEN_FIELDS]
            for g in network.generators
        ],
        "columns": {"buses": _BUS_FIELDS, "lines": _LINE_FIELDS, "generators": _GEN_FIELDS},
    }
    return json.dumps(doc, indent=1) + "\n"


def _from_native(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(exc.msg, exc.lineno) from None
    if doc.get("format") != NATIVE_FORMAT:
        raise CaseParseError("not a native case document")
    cols = doc["columns"]

    def rows(key, cls):
        out = []
        for r in doc[key]:
            kw = {c: _decode_float(v) for c, v in zip(cols[key], r)}
            if "cost" in kw:
                kw["cost"] = tuple(float(c) for c in kw["cost"])
            out.append(cls(**kw))
        return tuple(out)

    return Network(
        rows("buses", Bus), rows("lines", Line), rows("generators", Generator), float(doc["base_mva"]), doc.get("name", "")
    )


def parse_case(
    text: str,
    itrip_factor: float = DEFAULT_ITRIP_FACTOR,
    strict: bool = False,
    zero_shunts: bool = False,
    load_scale: float = 1.0,
    name: str = "",
) -> Network:
    """Parse a MATPOWER-subset or native case into a lossless :class:`Network`.

    ``itrip_factor`` sets the relay trip current relative to the thermal limit and
    ``load_scale`` multiplies all demands; both are ignored for native documents,
    which carry explicit values.
    """
    if text.lstrip().startswith("{"):
        return _from_native(text)
    return _from_matpower(text, itrip_factor, strict, zero_shunts, load_scale, name)


def load_case(path_or_name: str | Path, **kwargs) -> Network:
    """Load a case from a file path or by the name of a bundled case (``case118``, ``case9``...)."""
    p = Path(path_or_name)
    if p.exists():
        return parse_case(p.read_text(encoding="utf-8"), name=p.stem, **kwargs)
    return parse_case(bundled_case_text(str(path_or_name)), name=str(path_or_name), **kwargs)


_BUNDLED = {
    "case3": "pglib_opf_case3_lmbd.m",
    "case5": "pglib_opf_case5_pjm.m",
    "case9": "case9.m",
    "case14": "pglib_opf_case14_ieee.m",
    "case30": "pglib_opf_case30_ieee.m",
    "case3_load": "case3_load.m",
    "case118": "case118.m",
    "pglib_case118": "pglib_opf_case118_ieee.m",
}


def bundled_case_text(name: str) -> str:
    fname = _BUNDLED.get(name, name)
    try:
        return resources.files("cascadeopf.data").joinpath(fname).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"no case file or bundled case named {name!r}") from None


def asdict_network(network: Network) -> dict:
    return asdict(network)
