"""Grid case files: MATPOWER-style `.m` matrices and a native JSON schema.

A parsed `Case` is immutable and always valid. Quantities are stored the way
case files carry them (MW, MVAr, p.u. impedances) and exposed as per-unit
numpy arrays on `base_mva` through cached properties; cost coefficients stay
per-MW.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FORMATS = ('matpower', 'json')

# Minimum column counts of the standard MATPOWER tables
BUS_COLS = 13
GEN_COLS = 10
BRANCH_COLS = 11

_ASSIGN_RE = re.compile(r'\s*mpc\.(\w+)\s*=\s*(.*)$')
_TOKEN_RE = re.compile(r'[^\s,]+')


class CaseSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f'{message} (line {line}, column {column})')
        self.line = line
        self.column = column


class CaseValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    Pd: float
    Qd: float
    Vmin: float
    Vmax: float
    Gs: float = 0.0
    Bs: float = 0.0
    is_ref: bool = False


@dataclass(frozen=True)
class Branch:
    f_bus: int
    t_bus: int
    r: float
    x: float
    b_chg: float = 0.0
    tap: float = 1.0
    shift: float = 0.0  # rad
    rate_a: float = 0.0  # MVA, 0 = unlimited
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    Pmin: float
    Pmax: float
    Qmin: float
    Qmax: float
    in_service: bool = True


@dataclass(frozen=True)
class GenCost:
    a: float  # $/MW^2h
    b: float  # $/MWh
    c: float  # $/h


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Case:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    costs: tuple[GenCost, ...]
    name: str = 'case'

    def __post_init__(self) -> None:
        object.__setattr__(self, 'buses', tuple(self.buses))
        object.__setattr__(self, 'branches', tuple(self.branches))
        object.__setattr__(self, 'generators', tuple(self.generators))
        object.__setattr__(self, 'costs', tuple(self.costs))
        validate_case(self)

    # -- sizes and index sets -------------------------------------------
    @property
    def nb(self) -> int:
        return len(self.buses)

    @property
    def nl(self) -> int:
        return len(self.branches)

    @property
    def ng(self) -> int:
        return len(self.generators)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {bus.id: i for i, bus in enumerate(self.buses)}

    @cached_property
    def ref_index(self) -> int:
        return next(i for i, bus in enumerate(self.buses) if bus.is_ref)

    @cached_property
    def gen_indices(self) -> np.ndarray:
        """n_g: positions of in-service generators."""
        return _frozen(np.array([k for k, g in enumerate(self.generators) if g.in_service], dtype=int))

    @cached_property
    def demand_buses(self) -> np.ndarray:
        """n_b: bus positions with nonzero demand, ascending bus id."""
        idx = [i for i, bus in enumerate(self.buses) if bus.Pd != 0 or bus.Qd != 0]
        return _frozen(np.array(sorted(idx, key=lambda i: self.buses[i].id), dtype=int))

    @cached_property
    def injection_buses(self) -> np.ndarray:
        """n_b': demand buses plus buses hosting an in-service generator."""
        idx = set(self.demand_buses.tolist())
        idx.update(self.bus_index[self.generators[k].bus] for k in self.gen_indices)
        return _frozen(np.array(sorted(idx, key=lambda i: self.buses[i].id), dtype=int))

    @cached_property
    def limited_branches(self) -> np.ndarray:
        return _frozen(np.flatnonzero(self.rate_a_pu > 0))

    # -- per-unit arrays ---------------------------------------------------
    @cached_property
    def pd_pu(self) -> np.ndarray:
        return _frozen(np.array([b.Pd for b in self.buses]) / self.base_mva)

    @cached_property
    def qd_pu(self) -> np.ndarray:
        return _frozen(np.array([b.Qd for b in self.buses]) / self.base_mva)

    @cached_property
    def vmin(self) -> np.ndarray:
        return _frozen(np.array([b.Vmin for b in self.buses], dtype=float))

    @cached_property
    def vmax(self) -> np.ndarray:
        return _frozen(np.array([b.Vmax for b in self.buses], dtype=float))

    @cached_property
    def shunt_pu(self) -> np.ndarray:
        return _frozen(np.array([complex(b.Gs, b.Bs) for b in self.buses]) / self.base_mva)

    @cached_property
    def f_idx(self) -> np.ndarray:
        return _frozen(np.array([self.bus_index[br.f_bus] for br in self.branches], dtype=int))

    @cached_property
    def t_idx(self) -> np.ndarray:
        return _frozen(np.array([self.bus_index[br.t_bus] for br in self.branches], dtype=int))

    @cached_property
    def rate_a_pu(self) -> np.ndarray:
        return _frozen(np.array([br.rate_a for br in self.branches], dtype=float) / self.base_mva)

    @cached_property
    def gen_bus_idx(self) -> np.ndarray:
        return _frozen(np.array([self.bus_index[g.bus] for g in self.generators], dtype=int))

    @cached_property
    def pg_bounds_pu(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([g.Pmin for g in self.generators], dtype=float) / self.base_mva
        hi = np.array([g.Pmax for g in self.generators], dtype=float) / self.base_mva
        return _frozen(lo), _frozen(hi)

    @cached_property
    def qg_bounds_pu(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([g.Qmin for g in self.generators], dtype=float) / self.base_mva
        hi = np.array([g.Qmax for g in self.generators], dtype=float) / self.base_mva
        return _frozen(lo), _frozen(hi)

    @cached_property
    def cost_coeffs(self) -> np.ndarray:
        """(ng, 3) array of a, b, c."""
        return _frozen(np.array([[c.a, c.b, c.c] for c in self.costs], dtype=float).reshape(-1, 3))

    # -- derived cases -----------------------------------------------------
    def with_demand(self, pd_mw: Sequence[float], qd_mw: Sequence[float]) -> 'Case':
        """Return a copy with per-bus demand (MW, MVAr, bus order) replaced."""
        if len(pd_mw) != self.nb or len(qd_mw) != self.nb:
            raise CaseValidationError(f'demand vectors must have {self.nb} entries')
        buses = tuple(replace(bus, Pd=float(p), Qd=float(q))
                      for bus, p, q in zip(self.buses, pd_mw, qd_mw))
        return replace(self, buses=buses)

    def summary(self) -> dict[str, int]:
        return {
            'buses': self.nb,
            'branches': self.nl,
            'generators': len(self.gen_indices),
            'limited_branches': len(self.limited_branches),
            'demand_buses': len(self.demand_buses),
            'injection_buses': len(self.injection_buses),
        }


def validate_case(case: Case) -> None:
    ids = [bus.id for bus in case.buses]
    if not ids:
        raise CaseValidationError('case has no buses')
    seen: set[int] = set()
    for bus_id in ids:
        if bus_id in seen:
            raise CaseValidationError(f'duplicate bus id {bus_id}')
        seen.add(bus_id)
    refs = [bus.id for bus in case.buses if bus.is_ref]
    if len(refs) != 1:
        raise CaseValidationError(f'expected exactly one reference bus, found {len(refs)}')
    for bus in case.buses:
        if not bus.Vmin > 0:
            raise CaseValidationError(f'bus {bus.id}: Vmin must be positive')
        if bus.Vmax < bus.Vmin:
            raise CaseValidationError(f'bus {bus.id}: Vmax < Vmin')
    for k, br in enumerate(case.branches):
        for end in (br.f_bus, br.t_bus):
            if end not in seen:
                raise CaseValidationError(f'branch {k}: bus {end} not found')
        if br.r == 0 and br.x == 0:
            raise CaseValidationError(f'branch {k} ({br.f_bus}-{br.t_bus}): zero impedance')
        if not br.tap > 0:
            raise CaseValidationError(f'branch {k}: tap must be positive')
        if br.rate_a < 0:
            raise CaseValidationError(f'branch {k}: negative rate_a')
    for k, gen in enumerate(case.generators):
        if gen.bus not in seen:
            raise CaseValidationError(f'generator {k}: bus {gen.bus} not found')
        if gen.Pmax < gen.Pmin:
            raise CaseValidationError(f'generator {k}: Pmax < Pmin')
        if gen.Qmax < gen.Qmin:
            raise CaseValidationError(f'generator {k}: Qmax < Qmin')
    if len(case.costs) != len(case.generators):
        raise CaseValidationError(
            f'{len(case.costs)} cost rows for {len(case.generators)} generators')
    for k, cost in enumerate(case.costs):
        if cost.a < 0:
            raise CaseValidationError(f'generator {k}: non-convex cost (a < 0)')
    if not case.base_mva > 0:
        raise CaseValidationError('base_mva must be positive')


# ---------------------------------------------------------------------------
# MATPOWER-style text
# ---------------------------------------------------------------------------

def _number(token: str, line: int, column: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise CaseSyntaxError(f'invalid number {token!r}', line, column) from None


def _rows(body: str, lineno: int, col0: int) -> Iterator[list[tuple[float, int, int]]]:
    start = 0
    for segment in body.split(';'):
        row = [(_number(m.group(0), lineno, col0 + start + m.start() + 1), lineno, col0 + start + m.start() + 1)
               for m in _TOKEN_RE.finditer(segment)]
        if row:
            yield row
        start += len(segment) + 1


def _scan_matpower(text: str) -> tuple[dict[str, float], dict[str, list[list[tuple[float, int, int]]]]]:
    scalars: dict[str, float] = {}
    blocks: dict[str, list] = {}
    current: str | None = None
    cell: str | None = None
    opened_at = (0, 0)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('%', 1)[0]
        if cell is not None:
            if '}' in line:
                cell = None
            continue
        if current is None:
            m = _ASSIGN_RE.match(line)
            if not m:
                continue
            name, rest = m.group(1), m.group(2)
            if rest.lstrip().startswith('{'):
                # cell arrays such as mpc.bus_name hold labels only
                if '}' not in rest:
                    cell = name
                    opened_at = (lineno, m.start(2) + 1)
                continue
            if not rest.lstrip().startswith('['):
                value = rest.strip().rstrip(';').strip()
                if not value.startswith("'"):
                    scalars[name] = _number(value, lineno, m.start(2) + 1)
                continue
            current = name
            opened_at = (lineno, m.start(2) + 1)
            blocks[name] = []
            col0 = m.start(2) + rest.index('[') + 1
            body = line[col0:]
        else:
            col0 = 0
            body = line
        end = body.find(']')
        blocks[current].extend(_rows(body if end < 0 else body[:end], lineno, col0))
        if end >= 0:
            current = None
    if current is not None:
        raise CaseSyntaxError(f'unterminated matrix mpc.{current}', *opened_at)
    if cell is not None:
        raise CaseSyntaxError(f'unterminated cell array mpc.{cell}', *opened_at)
    return scalars, blocks


def _require_width(rows: list, width: int, block: str) -> None:
    for row in rows:
        if len(row) < width:
            _, line, column = row[-1]
            raise CaseSyntaxError(f'mpc.{block} row has {len(row)} columns, expected {width}', line, column)


def _bus_id(value: float, line: int, column: int) -> int:
    if value != int(value):
        raise CaseSyntaxError(f'bus id {value} is not an integer', line, column)
    return int(value)


def _parse_matpower(text: str, name: str) -> Case:
    scalars, blocks = _scan_matpower(text)
    for block in ('bus', 'gen', 'branch', 'gencost'):
        if block not in blocks:
            raise CaseValidationError(f'missing mpc.{block} table')
    _require_width(blocks['bus'], BUS_COLS, 'bus')
    _require_width(blocks['gen'], GEN_COLS, 'gen')
    _require_width(blocks['branch'], BRANCH_COLS, 'branch')

    buses = []
    for row in blocks['bus']:
        v = [c[0] for c in row]
        buses.append(Bus(
            id=_bus_id(v[0], row[0][1], row[0][2]), Pd=v[2], Qd=v[3], Gs=v[4], Bs=v[5],
            Vmax=v[11], Vmin=v[12], is_ref=int(v[1]) == 3,
        ))

    gen_rows = blocks['gen']
    cost_rows = blocks['gencost']
    if len(cost_rows) < len(gen_rows):
        raise CaseValidationError(f'{len(cost_rows)} gencost rows for {len(gen_rows)} generators')
    generators, costs = [], []
    for row, cost_row in zip(gen_rows, cost_rows):
        v = [c[0] for c in row]
        cv = [c[0] for c in cost_row]
        if len(cv) < 4 or int(cv[0]) != 2 or int(cv[3]) != 3 or len(cv) < 7:
            _, line, column = cost_row[0]
            raise CaseValidationError(
                f'only quadratic polynomial costs are supported (line {line}, column {column})')
        if v[7] <= 0:
            continue
        generators.append(Generator(
            bus=_bus_id(v[0], row[0][1], row[0][2]), Qmax=v[3], Qmin=v[4], Pmax=v[8], Pmin=v[9]))
        costs.append(GenCost(a=cv[4], b=cv[5], c=cv[6]))

    branches = []
    for row in blocks['branch']:
        v = [c[0] for c in row]
        if v[10] <= 0:
            continue
        branches.append(Branch(
            f_bus=_bus_id(v[0], row[0][1], row[0][2]), t_bus=_bus_id(v[1], row[1][1], row[1][2]),
            r=v[2], x=v[3], b_chg=v[4], rate_a=v[5],
            tap=v[8] if v[8] != 0 else 1.0, shift=math.radians(v[9]),
        ))

    dropped = len(gen_rows) - len(generators), len(blocks['branch']) - len(branches)
    if any(dropped):
        log.info('%s: dropped %d out-of-service generators and %d branches', name, *dropped)
    return Case(
        base_mva=scalars.get('baseMVA', 100.0), buses=tuple(buses), branches=tuple(branches),
        generators=tuple(generators), costs=tuple(costs), name=name,
    )


def _g(value: float) -> str:
    return format(value, '.17g')


def _serialize_matpower(case: Case) -> str:
    gen_buses = {g.bus for g in case.generators}
    out = [
        f'function mpc = {case.name}',
        "mpc.version = '2';",
        f'mpc.baseMVA = {_g(case.base_mva)};',
        '',
        '%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin',
        'mpc.bus = [',
    ]
    for bus in case.buses:
        kind = 3 if bus.is_ref else 2 if bus.id in gen_buses else 1
        cols = [bus.id, kind, _g(bus.Pd), _g(bus.Qd), _g(bus.Gs), _g(bus.Bs), 1, 1, 0, 0, 1,
                _g(bus.Vmax), _g(bus.Vmin)]
        out.append('\t' + '\t'.join(map(str, cols)) + ';')
    out += ['];', '', '%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin', 'mpc.gen = [']
    for gen in case.generators:
        cols = [gen.bus, 0, 0, _g(gen.Qmax), _g(gen.Qmin), 1, _g(case.base_mva), 1,
                _g(gen.Pmax), _g(gen.Pmin)]
        out.append('\t' + '\t'.join(map(str, cols)) + ';')
    out += ['];', '',
            '%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax',
            'mpc.branch = [']
    for br in case.branches:
        cols = [br.f_bus, br.t_bus, _g(br.r), _g(br.x), _g(br.b_chg), _g(br.rate_a), _g(br.rate_a),
                _g(br.rate_a), _g(br.tap), _g(math.degrees(br.shift)), 1, -360, 360]
        out.append('\t' + '\t'.join(map(str, cols)) + ';')
    out += ['];', '', '%\t2\tstartup\tshutdown\tn\tc2\tc1\tc0', 'mpc.gencost = [']
    for cost in case.costs:
        out.append('\t' + '\t'.join(['2', '0', '0', '3', _g(cost.a), _g(cost.b), _g(cost.c)]) + ';')
    out += ['];', '']
    return '\n'.join(out)


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def case_to_dict(case: Case) -> dict:
    return {
        'schema_version': SCHEMA_VERSION,
        'name': case.name,
        'base_mva': case.base_mva,
        'buses': [
            {'id': b.id, 'Pd': b.Pd, 'Qd': b.Qd, 'Vmin': b.Vmin, 'Vmax': b.Vmax,
             'Gs': b.Gs, 'Bs': b.Bs, 'is_ref': b.is_ref}
            for b in case.buses
        ],
        'branches': [
            {'from': br.f_bus, 'to': br.t_bus, 'r': br.r, 'x': br.x, 'b_chg': br.b_chg,
             'tap': br.tap, 'shift': br.shift, 'rate_a': br.rate_a, 'in_service': br.in_service}
            for br in case.branches
        ],
        'generators': [
            {'bus': g.bus, 'Pmin': g.Pmin, 'Pmax': g.Pmax, 'Qmin': g.Qmin, 'Qmax': g.Qmax,
             'in_service': g.in_service}
            for g in case.generators
        ],
        'costs': [{'a': c.a, 'b': c.b, 'c': c.c} for c in case.costs],
    }


def _parse_json(text: str, name: str) -> Case:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CaseSyntaxError(e.msg, e.lineno, e.colno) from None
    if not isinstance(doc, dict):
        raise CaseValidationError('case document must be a JSON object')
    version = doc.get('schema_version')
    if version != SCHEMA_VERSION:
        raise CaseValidationError(f'unsupported schema_version {version!r}')
    try:
        branches = [
            Branch(f_bus=int(d['from']), t_bus=int(d['to']), r=float(d['r']), x=float(d['x']),
                   b_chg=float(d.get('b_chg', 0.0)), tap=float(d.get('tap', 1.0)),
                   shift=float(d.get('shift', 0.0)), rate_a=float(d.get('rate_a', 0.0)))
            for d in doc['branches'] if d.get('in_service', True)
        ]
        pairs = [
            (Generator(bus=int(d['bus']), Pmin=float(d['Pmin']), Pmax=float(d['Pmax']),
                       Qmin=float(d['Qmin']), Qmax=float(d['Qmax'])),
             GenCost(a=float(c['a']), b=float(c['b']), c=float(c['c'])))
            for d, c in zip(doc['generators'], doc['costs']) if d.get('in_service', True)
        ]
        if len(doc['costs']) != len(doc['generators']):
            raise CaseValidationError(
                f"{len(doc['costs'])} cost rows for {len(doc['generators'])} generators")
        buses = [
            Bus(id=int(d['id']), Pd=float(d['Pd']), Qd=float(d['Qd']), Vmin=float(d['Vmin']),
                Vmax=float(d['Vmax']), Gs=float(d.get('Gs', 0.0)), Bs=float(d.get('Bs', 0.0)),
                is_ref=bool(d.get('is_ref', False)))
            for d in doc['buses']
        ]
    except KeyError as e:
        raise CaseValidationError(f'missing field {e.args[0]!r}') from None
    return Case(
        base_mva=float(doc.get('base_mva', 100.0)), buses=tuple(buses), branches=tuple(branches),
        generators=tuple(g for g, _ in pairs), costs=tuple(c for _, c in pairs),
        name=str(doc.get('name', name)),
    )


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

def parse_case(text: str, format: str = 'matpower', name: str = 'case') -> Case:
    if format == 'matpower':
        m = re.search(r'function\s+\w+\s*=\s*(\w+)', text)
        return _parse_matpower(text, m.group(1) if m else name)
    if format == 'json':
        return _parse_json(text, name)
    raise ValueError(f'unknown case format {format!r}; expected one of {FORMATS}')


def serialize_case(case: Case, format: str = 'matpower') -> str:
    if format == 'matpower':
        return _serialize_matpower(case)
    if format == 'json':
        return json.dumps(case_to_dict(case), indent=2) + '\n'
    raise ValueError(f'unknown case format {format!r}; expected one of {FORMATS}')


def format_for(path: str | Path) -> str:
    return 'json' if Path(path).suffix.lower() == '.json' else 'matpower'


def load_case(path: str | Path) -> Case:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    data = path.read_bytes()
    try:
        text = data.decode('utf-8').lstrip('\ufeff')
    except UnicodeDecodeError as e:
        line_start = data.rfind(b'\n', 0, e.start) + 1
        raise CaseSyntaxError(f'invalid UTF-8 byte 0x{data[e.start]:02x}', data.count(b'\n', 0, e.start) + 1,
                              e.start - line_start + 1) from None
    return parse_case(text, format_for(path), name=path.stem)


def save_case(case: Case, path: str | Path) -> None:
    Path(path).write_text(serialize_case(case, format_for(path)), encoding='utf-8')


def case_hash(case: Case) -> str:
    canonical = json.dumps(case_to_dict(case), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def structurally_equal(a: Case, b: Case, rel: float = 1e-12) -> bool:
    """Field-by-field equality, floats compared within `rel` relative tolerance."""
    def close(x, y) -> bool:
        if isinstance(x, bool) or isinstance(x, int) and isinstance(y, int):
            return x == y
        return math.isclose(x, y, rel_tol=rel, abs_tol=1e-300)

    if not close(a.base_mva, b.base_mva):
        return False
    for left, right in ((a.buses, b.buses), (a.branches, b.branches),
                        (a.generators, b.generators), (a.costs, b.costs)):
        if len(left) != len(right):
            return False
        for x, y in zip(left, right):
            if type(x) is not type(y):
                return False
            for field_name in x.__dataclass_fields__:
                if not close(getattr(x, field_name), getattr(y, field_name)):
                    return False
    return True
