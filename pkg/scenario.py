"""Demand scenarios, their OPF solutions, and the datasets built from them.

Scenario k of a config draws from its own Philox substream keyed by
(seed, stream, k), so results do not depend on worker count or completion
order. Rows are re-ordered by scenario index before anything is written.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from case_io import Case, case_hash
from opf_solver import SolverConfig, label_activity, solve_opf

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CORRELATION_MODES = ('independent_per_bus', 'systemwide')
DATASET_FILES = ('manifest.json', 'D.csv', 'G.csv', 'NI.csv', 'labels_v.csv', 'labels_l.csv', 'solves.csv')
PROGRESS_EVERY = 200


class DatasetError(ValueError):
    pass


class IndexSetMismatch(ValueError):
    pass


def max_workers() -> int:
    env = os.getenv('ACOPF_MAX_WORKERS')
    if env and env.isdigit() and int(env) > 0:
        return int(env)
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ScenarioConfig:
    range_lo: float = 0.70
    range_hi: float = 1.30
    count: int = 1
    seed: int = 0
    correlation_mode: str = 'independent_per_bus'
    stream: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.range_lo <= self.range_hi:
            raise ValueError(f'need 0 < range_lo <= range_hi, got {self.range_lo}, {self.range_hi}')
        if self.count <= 0:
            raise ValueError(f'count must be positive, got {self.count}')
        if self.correlation_mode not in CORRELATION_MODES:
            raise ValueError(f'unknown correlation mode {self.correlation_mode!r}')


@dataclass(frozen=True)
class DemandVector:
    """Demand on the n_b buses (p.u., ascending bus id)."""
    pd: np.ndarray
    qd: np.ndarray

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.pd, self.qd])

    @classmethod
    def from_stacked(cls, d: np.ndarray) -> 'DemandVector':
        d = np.asarray(d, dtype=float)
        if d.ndim != 1 or d.size % 2:
            raise IndexSetMismatch(f'stacked demand must be a 1-D vector of even length, got shape {d.shape}')
        half = d.size // 2
        return cls(d[:half].copy(), d[half:].copy())

    @classmethod
    def base(cls, case: Case) -> 'DemandVector':
        nbd = case.demand_buses
        return cls(np.asarray(case.pd_pu)[nbd].copy(), np.asarray(case.qd_pu)[nbd].copy())


def scenario_rng(seed: int, stream: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream, k))))


def demand_from_eta(case: Case, cfg: ScenarioConfig, eta_p, eta_q) -> DemandVector:
    """Place demand at fraction eta of each bus's [lo, hi] band; eta may be scalar or per bus."""
    base = DemandVector.base(case)

    def place(values, eta):
        lo, hi = cfg.range_lo * values, cfg.range_hi * values
        return lo + np.asarray(eta, dtype=float) * (hi - lo)
    return DemandVector(place(base.pd, eta_p), place(base.qd, eta_q))


def perturb_demand(case: Case, cfg: ScenarioConfig, k: int) -> DemandVector:
    rng = scenario_rng(cfg.seed, cfg.stream, k)
    n = len(case.demand_buses)
    if cfg.correlation_mode == 'systemwide':
        eta_p, eta_q = rng.random(), rng.random()
    else:
        eta_p, eta_q = rng.random(n), rng.random(n)
    return demand_from_eta(case, cfg, eta_p, eta_q)


def apply_demand(case: Case, d: DemandVector) -> Case:
    nbd = case.demand_buses
    if len(d.pd) != len(nbd) or len(d.qd) != len(nbd):
        raise IndexSetMismatch(f'demand vector has {len(d.pd)} buses, case has {len(nbd)} demand buses')
    pd = np.array([b.Pd for b in case.buses], dtype=float)
    qd = np.array([b.Qd for b in case.buses], dtype=float)
    pd[nbd] = d.pd * case.base_mva
    qd[nbd] = d.qd * case.base_mva
    return case.with_demand(pd, qd)


# -- net injection on n_b' ------------------------------------------------------

def _injection_positions(case: Case, bus_positions: np.ndarray) -> np.ndarray:
    where = {int(b): j for j, b in enumerate(case.injection_buses)}
    return np.array([where[int(b)] for b in bus_positions], dtype=int)


def demand_on_injection(case: Case, D: np.ndarray) -> np.ndarray:
    """Stacked n_b demand (vector or rows) scattered onto n_b', zero-filled."""
    D = np.asarray(D, dtype=float)
    rows = np.atleast_2d(D)
    nd, ni = len(case.demand_buses), len(case.injection_buses)
    if rows.shape[1] != 2 * nd:
        raise IndexSetMismatch(f'demand width {rows.shape[1]} does not match 2 x {nd} demand buses')
    pos = _injection_positions(case, case.demand_buses)
    out = np.zeros((rows.shape[0], 2 * ni))
    out[:, pos] = rows[:, :nd]
    out[:, ni + pos] = rows[:, nd:]
    return out if D.ndim == 2 else out[0]


def generation_on_injection(case: Case, G: np.ndarray) -> np.ndarray:
    """Stacked [pg; qg] per generator (vector or rows) summed per bus on n_b'."""
    G = np.asarray(G, dtype=float)
    rows = np.atleast_2d(G)
    ng, ni = case.ng, len(case.injection_buses)
    if rows.shape[1] != 2 * ng:
        raise IndexSetMismatch(f'generation width {rows.shape[1]} does not match 2 x {ng} generators')
    agg = np.zeros((ng, ni))
    agg[np.arange(ng), _injection_positions(case, case.gen_bus_idx)] = 1.0
    out = np.hstack([rows[:, :ng] @ agg, rows[:, ng:] @ agg])
    return out if G.ndim == 2 else out[0]


def net_injection(d_inj: np.ndarray, g_inj: np.ndarray, case: Case | None = None) -> np.ndarray:
    """NI = [Pg - Pd; Qg - Qd] for demand and generation already laid out on n_b'."""
    d_inj, g_inj = np.asarray(d_inj, dtype=float), np.asarray(g_inj, dtype=float)
    if d_inj.shape != g_inj.shape:
        raise IndexSetMismatch(f'demand shape {d_inj.shape} != generation shape {g_inj.shape}')
    if d_inj.shape[-1] % 2:
        raise IndexSetMismatch('stacked vectors must have even length')
    if case is not None and d_inj.shape[-1] != 2 * len(case.injection_buses):
        raise IndexSetMismatch(
            f'expected width {2 * len(case.injection_buses)} on n_b\', got {d_inj.shape[-1]}')
    return g_inj - d_inj


def ni_features(case: Case, D: np.ndarray, G: np.ndarray) -> np.ndarray:
    return net_injection(demand_on_injection(case, D), generation_on_injection(case, G), case)


# -- solving scenarios ----------------------------------------------------------

@dataclass(frozen=True)
class ScenarioRow:
    index: int
    demand: np.ndarray
    status: str
    generation: np.ndarray | None = None
    v_labels: np.ndarray | None = None
    l_labels: np.ndarray | None = None
    objective: float = float('nan')
    iterations: int = 0
    feval_count: int = 0
    wall_time: float = 0.0

    @property
    def kept(self) -> bool:
        return self.generation is not None


def solve_scenario(case: Case, cfg: ScenarioConfig, k: int,
                   solver_config: SolverConfig | None = None) -> ScenarioRow:
    d = perturb_demand(case, cfg, k)
    sol = solve_opf(apply_demand(case, d), config=solver_config)
    diag = dict(status=sol.status.value, objective=sol.objective, iterations=sol.iterations,
                feval_count=sol.feval_count, wall_time=sol.wall_time)
    if not sol.converged:
        return ScenarioRow(k, d.stacked, **diag)
    labels = label_activity(sol, case)
    return ScenarioRow(k, d.stacked, generation=np.concatenate([sol.vars.pg, sol.vars.qg]),
                       v_labels=labels.v_active.astype(np.int8), l_labels=labels.l_active.astype(np.int8),
                       **diag)


def run_batch(fn, jobs: dict[int, tuple], workers: int | None = None,
              label: str = 'scenarios') -> tuple[dict[int, object], dict[int, str]]:
    """Run fn(*args) for every job, in a process pool when workers > 1.

    Failed jobs are retried once serially; what still fails comes back in the
    error dict keyed like `jobs`.
    """
    workers = workers or max_workers()
    results: dict[int, object] = {}
    errors: list[tuple[int, str]] = []

    if workers == 1:
        for completed, (k, args) in enumerate(jobs.items(), start=1):
            try:
                results[k] = fn(*args)
            except Exception as e:
                errors.append((k, str(e)))
            if completed % PROGRESS_EVERY == 0:
                print(f"Solved {completed}/{len(jobs)} {label}")
    else:
        with ProcessPoolExecutor(max_workers=workers) as exe:
            futs = {exe.submit(fn, *args): k for k, args in jobs.items()}
            completed = 0
            for fut in as_completed(futs):
                k = futs[fut]
                try:
                    results[k] = fut.result()
                except Exception as e:
                    errors.append((k, str(e)))
                completed += 1
                if completed % PROGRESS_EVERY == 0:
                    print(f"Solved {completed}/{len(jobs)} {label}")

    failed: dict[int, str] = {}
    if errors:
        print(f"{len(errors)} errors while solving {label}; retrying serially...")
        for k, _ in errors:
            try:
                results[k] = fn(*jobs[k])
            except Exception as e:
                print(f"Failed final solve of {label} item {k} -> {e}")
                failed[k] = str(e)
    return results, failed


def solve_scenarios(case: Case, cfg: ScenarioConfig, solver_config: SolverConfig | None = None,
                    workers: int | None = None, label: str = 'scenarios') -> list[ScenarioRow]:
    """Solve every scenario of `cfg`; the result is ordered by scenario index."""
    jobs = {k: (case, cfg, k, solver_config) for k in range(cfg.count)}
    results, failed = run_batch(solve_scenario, jobs, workers, label)
    for k, err in failed.items():
        results[k] = ScenarioRow(k, perturb_demand(case, cfg, k).stacked, status=f'error: {err}')
    return [results[k] for k in range(cfg.count)]


# -- datasets -------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    case_name: str
    case_hash: str
    config: ScenarioConfig
    indices: np.ndarray
    D: np.ndarray
    G: np.ndarray
    NI: np.ndarray
    v_labels: np.ndarray
    l_labels: np.ndarray
    objective: np.ndarray
    iterations: np.ndarray
    feval_count: np.ndarray
    dropped: tuple[int, ...] = ()
    # wall times go to the solve ledger, not to disk
    wall_time: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        n = len(self.indices)
        for name in ('D', 'G', 'NI', 'v_labels', 'l_labels', 'objective', 'iterations', 'feval_count'):
            if len(getattr(self, name)) != n:
                raise DatasetError(f'{name} has {len(getattr(self, name))} rows, expected {n}')

    @property
    def kept(self) -> int:
        return len(self.indices)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.D, self.G, self.v_labels, self.l_labels):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        return h.hexdigest()

    def check_case(self, case: Case) -> None:
        if self.case_hash != case_hash(case):
            raise DatasetError(f'dataset was generated for case {self.case_name!r} with a different hash')

    def save(self, out_dir: str | os.PathLike, case: Case) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        demand_ids = [case.buses[i].id for i in case.demand_buses]
        inj_ids = [case.buses[i].id for i in case.injection_buses]
        gen_cols = [f'gen{k}_bus{case.generators[k].bus}' for k in range(case.ng)]
        branch_cols = [f'l{k}_{br.f_bus}_{br.t_bus}' for k, br in enumerate(case.branches)]

        write_csv(out / 'D.csv', [f'pd_{i}' for i in demand_ids] + [f'qd_{i}' for i in demand_ids], self.D)
        write_csv(out / 'G.csv', [f'pg_{c}' for c in gen_cols] + [f'qg_{c}' for c in gen_cols], self.G)
        write_csv(out / 'NI.csv', [f'nip_{i}' for i in inj_ids] + [f'niq_{i}' for i in inj_ids], self.NI)
        write_csv(out / 'labels_v.csv', [f'v_{b.id}' for b in case.buses], self.v_labels, fmt='%d')
        write_csv(out / 'labels_l.csv', branch_cols, self.l_labels, fmt='%d')
        solves = np.column_stack([self.indices, self.objective, self.iterations, self.feval_count])
        write_csv(out / 'solves.csv', ['scenario', 'objective', 'iterations', 'feval_count'], solves,
                  fmt=['%d', '%.17g', '%d', '%d'])

        manifest = {
            'schema_version': SCHEMA_VERSION,
            'case_name': self.case_name,
            'case_hash': self.case_hash,
            'config': asdict(self.config),
            'kept': self.kept,
            'dropped': list(self.dropped),
            'fingerprint': self.fingerprint(),
            'demand_bus_ids': demand_ids,
            'injection_bus_ids': inj_ids,
        }
        (out / 'manifest.json').write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n')
        return out

    @classmethod
    def load(cls, in_dir: str | os.PathLike) -> 'Dataset':
        src = Path(in_dir)
        missing = [name for name in DATASET_FILES if not (src / name).exists()]
        if missing:
            raise DatasetError(f'{src}: missing {", ".join(missing)}')
        manifest = json.loads((src / 'manifest.json').read_text())
        if manifest.get('schema_version') != SCHEMA_VERSION:
            raise DatasetError(f'{src}: unsupported schema_version {manifest.get("schema_version")}')
        solves = read_csv(src / 'solves.csv')
        return cls(
            case_name=manifest['case_name'],
            case_hash=manifest['case_hash'],
            config=ScenarioConfig(**manifest['config']),
            indices=solves[:, 0].astype(int),
            D=read_csv(src / 'D.csv'),
            G=read_csv(src / 'G.csv'),
            NI=read_csv(src / 'NI.csv'),
            v_labels=read_csv(src / 'labels_v.csv').astype(np.int8),
            l_labels=read_csv(src / 'labels_l.csv').astype(np.int8),
            objective=solves[:, 1],
            iterations=solves[:, 2].astype(int),
            feval_count=solves[:, 3].astype(int),
            dropped=tuple(manifest['dropped']),
        )


def write_csv(path: Path, header: list[str], rows: np.ndarray, fmt='%.17g') -> None:
    rows = np.asarray(rows)
    if rows.ndim == 1:
        rows = rows.reshape(-1, 1) if len(header) == 1 else rows.reshape(1, -1)
    np.savetxt(path, rows, fmt=fmt, delimiter=',', header=','.join(header), comments='')


def read_csv(path: Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=',', skiprows=1, ndmin=2)


def dataset_from_rows(case: Case, cfg: ScenarioConfig, rows: list[ScenarioRow]) -> Dataset:
    kept = [r for r in rows if r.kept]
    dropped = tuple(r.index for r in rows if not r.kept)
    if not kept:
        statuses: dict[str, int] = {}
        for r in rows:
            statuses[r.status] = statuses.get(r.status, 0) + 1
        summary = ', '.join(f'{n} {s}' for s, n in sorted(statuses.items()))
        raise DatasetError(
            f'all {len(rows)} scenarios of {case.name} in range {cfg.range_lo:g}-{cfg.range_hi:g} '
            f'were infeasible ({summary})')
    D = np.vstack([r.demand for r in kept])
    G = np.vstack([r.generation for r in kept])
    return Dataset(
        case_name=case.name,
        case_hash=case_hash(case),
        config=cfg,
        indices=np.array([r.index for r in kept], dtype=int),
        D=D,
        G=G,
        NI=ni_features(case, D, G),
        v_labels=np.vstack([r.v_labels for r in kept]),
        l_labels=np.vstack([r.l_labels for r in kept]),
        objective=np.array([r.objective for r in kept]),
        iterations=np.array([r.iterations for r in kept], dtype=int),
        feval_count=np.array([r.feval_count for r in kept], dtype=int),
        dropped=dropped,
        wall_time=np.array([r.wall_time for r in kept]),
    )


def build_dataset(case: Case, cfg: ScenarioConfig, solver_config: SolverConfig | None = None,
                  workers: int | None = None, label: str = 'scenarios') -> Dataset:
    start = time.time()
    print(f"Solving {cfg.count} {label} of {case.name} ({cfg.range_lo:.0%}-{cfg.range_hi:.0%} load)...")
    rows = solve_scenarios(case, cfg, solver_config, workers, label)
    ds = dataset_from_rows(case, cfg, rows)
    print(f"Done. Kept {ds.kept}, dropped {len(ds.dropped)} in {time.time() - start:.1f}s")
    return ds


def find_load_range(case: Case, step: float = 0.05, limit: float = 3.0,
                    solver_config: SolverConfig | None = None) -> tuple[float, float]:
    """Widest uniform scaling band around base load over which the OPF still converges."""
    if not 0 < step < 1:
        raise ValueError(f'step must be in (0, 1), got {step}')
    base = DemandVector.base(case)

    def feasible(factor: float) -> bool:
        d = DemandVector(base.pd * factor, base.qd * factor)
        ok = solve_opf(apply_demand(case, d), config=solver_config).converged
        log.debug('load factor %.3f: %s', factor, 'converged' if ok else 'failed')
        return ok

    if not feasible(1.0):
        raise DatasetError(f'{case.name}: OPF does not converge at base load')
    hi = 1.0
    while hi + step <= limit + 1e-12 and feasible(round(hi + step, 10)):
        hi = round(hi + step, 10)
    lo = 1.0
    while lo - step > 1e-12 and feasible(round(lo - step, 10)):
        lo = round(lo - step, 10)
    return lo, hi
