"""Full and truncated AC OPF by a primal-dual interior-point method.

Variables x = [theta; vm; pg; qg] in p.u. Power balance, generator bounds and
the reference angle are always enforced; which bus voltage bounds and branch
flow limits enter the problem is chosen by a `ConstraintSet`.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from case_io import Case
from network import (AdmittanceModel, VoltageState, balance_jacobian, branch_flows,
                     build_admittance, flow_jacobian, lagrangian_hessian)

log = logging.getLogger(__name__)

EPS_ACTIVE = 1e-5
FIXED_BOUND_TOL = 1e-10
INEQ_FAMILIES = ('flow_f', 'flow_t', 'vmin', 'vmax', 'pmin', 'pmax', 'qmin', 'qmax')


def fixed_bounds(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    with np.errstate(invalid='ignore'):
        return np.isfinite(lo) & np.isfinite(hi) & (np.asarray(hi) - np.asarray(lo) <= FIXED_BOUND_TOL)


class SolveStatus(str, Enum):
    CONVERGED = 'converged'
    MAX_ITER = 'max_iter'
    NUMERICAL_FAILURE = 'numerical_failure'


class SolverFailure(RuntimeError):
    def __init__(self, message: str, solution: 'OpfSolution | None' = None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class SolverConfig:
    feastol: float = 1e-6
    gradtol: float = 1e-6
    comptol: float = 1e-6
    costtol: float = 1e-6
    max_iter: int = 150
    sigma: float = 0.1  # barrier reduction factor
    xi: float = 0.99995  # fraction-to-boundary
    z0: float = 1.0
    alpha_min: float = 1e-8
    reg_start: float = 1e-8
    reg_max: float = 1e-2
    refine_steps: int = 2
    cost_scale: float = 1e-4
    # gamma is reduced only once the barrier error is below barrier_kappa * gamma
    barrier_kappa: float = 10.0
    barrier_floor: float = 1e-10


@dataclass(frozen=True)
class ConstraintSet:
    voltage_buses: frozenset[int] = frozenset()
    flow_branches: frozenset[int] = frozenset()
    # power balance, generator bounds and reference angle are never dropped
    chi_always: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, 'voltage_buses', frozenset(int(i) for i in self.voltage_buses))
        object.__setattr__(self, 'flow_branches', frozenset(int(k) for k in self.flow_branches))

    @classmethod
    def full(cls, case: Case) -> 'ConstraintSet':
        return cls(frozenset(range(case.nb)), frozenset(case.limited_branches.tolist()))

    @classmethod
    def empty(cls) -> 'ConstraintSet':
        return cls()

    def include(self, buses: Iterable[int] = (), branches: Iterable[int] = ()) -> 'ConstraintSet':
        return ConstraintSet(self.voltage_buses | set(buses), self.flow_branches | set(branches))

    def issuperset(self, other: 'ConstraintSet') -> bool:
        return self.voltage_buses >= other.voltage_buses and self.flow_branches >= other.flow_branches

    def validate(self, case: Case) -> None:
        bad = [i for i in self.voltage_buses if not 0 <= i < case.nb]
        if bad:
            raise ValueError(f'voltage bus indices out of range: {sorted(bad)}')
        limited = set(case.limited_branches.tolist())
        bad = sorted(self.flow_branches - limited)
        if bad:
            raise ValueError(f'flow limits requested on unlimited or unknown branches: {bad}')

    def inequality_count(self, case: Case) -> int:
        """Enforced inequality rows: both bounds/ends per label plus generator bounds."""
        gen = 0
        for lo, hi in (case.pg_bounds_pu, case.qg_bounds_pu):
            free = ~fixed_bounds(lo, hi)
            gen += int(np.sum(free & np.isfinite(lo))) + int(np.sum(free & np.isfinite(hi)))
        return 2 * len(self.voltage_buses) + 2 * len(self.flow_branches) + gen


@dataclass(frozen=True)
class OpfVariables:
    theta: np.ndarray
    vm: np.ndarray
    pg: np.ndarray
    qg: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.vm, self.pg, self.qg]).astype(float)

    @classmethod
    def from_vector(cls, x: np.ndarray, nb: int, ng: int) -> 'OpfVariables':
        x = np.array(x, dtype=float)
        return cls(x[:nb], x[nb:2 * nb], x[2 * nb:2 * nb + ng], x[2 * nb + ng:])

    @classmethod
    def flat_start(cls, case: Case) -> 'OpfVariables':
        def mid(lo, hi):
            m = (np.asarray(lo) + np.asarray(hi)) / 2
            return np.where(np.isfinite(m), m, 0.0)
        return cls(np.zeros(case.nb), mid(case.vmin, case.vmax),
                   mid(*case.pg_bounds_pu), mid(*case.qg_bounds_pu))


@dataclass(frozen=True)
class OpfSolution:
    """Result of `solve_opf`.

    `objective` is in $/h. The multipliers belong to the objective the solver
    iterates on, i.e. cost times `SolverConfig.cost_scale`; divide by the scale
    for $/h sensitivities.
    """
    vars: OpfVariables
    objective: float
    mult_eq: dict[str, np.ndarray]
    mult_ineq: dict[str, np.ndarray]
    slacks: dict[str, np.ndarray]
    status: SolveStatus
    iterations: int
    wall_time: float
    feval_count: int
    constraint_set: ConstraintSet = field(default_factory=ConstraintSet)

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED


@dataclass(frozen=True)
class ActivityLabels:
    v_active: np.ndarray
    l_active: np.ndarray

    @property
    def counts(self) -> tuple[int, int]:
        return int(self.v_active.sum()), int(self.l_active.sum())


@dataclass(frozen=True)
class Violation:
    kind: str  # vmin, vmax, flow_f, flow_t
    index: int  # bus or branch position
    amount: float  # p.u.


class _OpfProblem:
    """Objective, constraints and derivatives for one (case, constraint set)."""

    def __init__(self, case: Case, cs: ConstraintSet, cost_scale: float,
                 model: AdmittanceModel | None = None):
        self.case = case
        self.cost_scale = cost_scale
        nb, ng = case.nb, case.ng
        self.nb, self.ng = nb, ng
        self.nx = 2 * nb + 2 * ng
        self.model = model or build_admittance(case)
        self.branches = np.array(sorted(cs.flow_branches), dtype=int)
        self.flow_model = self.model.subset(self.branches)
        self.fmax2 = np.asarray(case.rate_a_pu)[self.branches] ** 2
        self.vbuses = np.array(sorted(cs.voltage_buses), dtype=int)
        self.pd, self.qd = np.asarray(case.pd_pu), np.asarray(case.qd_pu)
        self.Cg = sp.csr_matrix((np.ones(ng), (case.gen_bus_idx, np.arange(ng))), shape=(nb, ng))
        self.coeffs = np.asarray(case.cost_coeffs)
        self.feval_count = 0

        pmin, pmax = case.pg_bounds_pu
        qmin, qmax = case.qg_bounds_pu
        p_fixed = fixed_bounds(pmin, pmax)
        q_fixed = fixed_bounds(qmin, qmax)
        self.p_fixed, self.q_fixed = np.flatnonzero(p_fixed), np.flatnonzero(q_fixed)
        # infinite bounds get no row
        self.gen_rows = {
            'pmin': np.flatnonzero(~p_fixed & np.isfinite(pmin)),
            'pmax': np.flatnonzero(~p_fixed & np.isfinite(pmax)),
            'qmin': np.flatnonzero(~q_fixed & np.isfinite(qmin)),
            'qmax': np.flatnonzero(~q_fixed & np.isfinite(qmax)),
        }
        rows = self.gen_rows

        vm0, pg0, qg0 = nb, 2 * nb, 2 * nb + ng
        # linear inequalities: A x + c <= 0
        lin_rows = [
            (vm0 + self.vbuses, -1.0, np.asarray(case.vmin)[self.vbuses]),
            (vm0 + self.vbuses, 1.0, -np.asarray(case.vmax)[self.vbuses]),
            (pg0 + rows['pmin'], -1.0, pmin[rows['pmin']]),
            (pg0 + rows['pmax'], 1.0, -pmax[rows['pmax']]),
            (qg0 + rows['qmin'], -1.0, qmin[rows['qmin']]),
            (qg0 + rows['qmax'], 1.0, -qmax[rows['qmax']]),
        ]
        self.A_lin, self.c_lin = self._stack_rows(lin_rows)
        # linear equalities: reference angle and fixed generator outputs
        eq_rows = [
            (np.array([case.ref_index]), 1.0, np.zeros(1)),
            (pg0 + self.p_fixed, 1.0, -pmin[self.p_fixed]),
            (qg0 + self.q_fixed, 1.0, -qmin[self.q_fixed]),
        ]
        self.A_eq, self.c_eq = self._stack_rows(eq_rows)
        self.nlc = len(self.branches)
        self.neq = 2 * nb + self.A_eq.shape[0]
        self.niq = 2 * self.nlc + self.A_lin.shape[0]

    def _stack_rows(self, parts):
        cols = np.concatenate([p[0] for p in parts]).astype(int)
        vals = np.concatenate([np.full(len(p[0]), p[1]) for p in parts])
        consts = np.concatenate([p[2] for p in parts]).astype(float)
        A = sp.csr_matrix((vals, (np.arange(len(cols)), cols)), shape=(len(cols), self.nx))
        return A, consts

    def voltages(self, x: np.ndarray) -> np.ndarray:
        return x[self.nb:2 * self.nb] * np.exp(1j * x[:self.nb])

    def cost(self, x: np.ndarray) -> float:
        """Generation cost in $/h, unscaled."""
        P = x[2 * self.nb:2 * self.nb + self.ng] * self.case.base_mva
        a, b, c = self.coeffs.T
        return float(np.sum(a * P ** 2 + b * P + c))

    def objective(self, x: np.ndarray) -> tuple[float, np.ndarray, sp.csr_matrix]:
        nb, ng, base = self.nb, self.ng, self.case.base_mva
        a, b, _ = self.coeffs.T
        P = x[2 * nb:2 * nb + ng] * base
        df = np.zeros(self.nx)
        df[2 * nb:2 * nb + ng] = base * (2 * a * P + b)
        d2f = sp.diags(np.r_[np.zeros(2 * nb), 2 * a * base ** 2, np.zeros(ng)])
        s = self.cost_scale
        return s * self.cost(x), s * df, (s * d2f).tocsr()

    def constraints(self, x: np.ndarray):
        self.feval_count += 1
        nb, ng = self.nb, self.ng
        V = self.voltages(x)
        S, dP, dQ = balance_jacobian(self.model, V)
        pg, qg = x[2 * nb:2 * nb + ng], x[2 * nb + ng:]
        g = np.r_[S.real + self.pd - self.Cg @ pg, S.imag + self.qd - self.Cg @ qg,
                  self.A_eq @ x + self.c_eq]
        Z = sp.csr_matrix((nb, ng))
        Jg = sp.vstack([sp.hstack([dP, -self.Cg, Z]), sp.hstack([dQ, Z, -self.Cg]), self.A_eq]).tocsr()

        Sf, St, dAf, dAt = flow_jacobian(self.flow_model, V)
        h = np.r_[np.abs(Sf) ** 2 - self.fmax2, np.abs(St) ** 2 - self.fmax2, self.A_lin @ x + self.c_lin]
        blocks = []
        if self.nlc:
            Zf = sp.csr_matrix((self.nlc, 2 * ng))
            blocks += [sp.hstack([dAf, Zf]), sp.hstack([dAt, Zf])]
        blocks.append(self.A_lin)
        Jh = sp.vstack(blocks).tocsr()
        return g, h, Jg, Jh

    def hessian(self, x: np.ndarray, lam: np.ndarray, mu: np.ndarray, d2f: sp.csr_matrix) -> sp.csr_matrix:
        nb, ng, nlc = self.nb, self.ng, self.nlc
        Hnet = lagrangian_hessian(self.flow_model, self.voltages(x), lam[:nb], lam[nb:2 * nb],
                                  mu[:nlc], mu[nlc:2 * nlc])
        H = sp.block_diag([Hnet, sp.csr_matrix((2 * ng, 2 * ng))]).tocsr()
        return (H + d2f).tocsr()

    # -- multiplier / slack bookkeeping ----------------------------------------
    def ineq_layout(self) -> list[tuple[str, np.ndarray, int]]:
        """(family, positions in the full-length array, full length) in row order."""
        nb, ng, nl = self.nb, self.ng, self.case.nl
        return [
            ('flow_f', self.branches, nl), ('flow_t', self.branches, nl),
            ('vmin', self.vbuses, nb), ('vmax', self.vbuses, nb),
            *((name, self.gen_rows[name], ng) for name in ('pmin', 'pmax', 'qmin', 'qmax')),
        ]

    def unpack_ineq(self, vec: np.ndarray, fill: float) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, idx, size in self.ineq_layout():
            arr = np.full(size, fill)
            arr[idx] = vec[pos:pos + len(idx)]
            out[name] = arr
            pos += len(idx)
        return out

    def pack_ineq(self, fam: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(fam[name])[idx] for name, idx, _ in self.ineq_layout()])

    def unpack_eq(self, lam: np.ndarray) -> dict[str, np.ndarray]:
        nb, ng = self.nb, self.ng
        out = {'p': lam[:nb].copy(), 'q': lam[nb:2 * nb].copy(), 'ref': lam[2 * nb:2 * nb + 1].copy()}
        pos = 2 * nb + 1
        for name, idx in (('pg_fixed', self.p_fixed), ('qg_fixed', self.q_fixed)):
            arr = np.zeros(ng)
            arr[idx] = lam[pos:pos + len(idx)]
            out[name] = arr
            pos += len(idx)
        return out

    def pack_eq(self, fam: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([fam['p'], fam['q'], fam['ref'],
                               np.asarray(fam['pg_fixed'])[self.p_fixed],
                               np.asarray(fam['qg_fixed'])[self.q_fixed]])


def _conditions(x, z, lam, mu, f, f0, g, h, Lx) -> dict[str, float]:
    def inf_norm(v):
        return float(np.max(np.abs(v))) if v.size else 0.0
    max_h = float(np.max(h)) if h.size else 0.0
    return {
        'feascond': max(inf_norm(g), max_h) / (1 + max(inf_norm(x), inf_norm(z))),
        'gradcond': inf_norm(Lx) / (1 + max(inf_norm(lam), inf_norm(mu))),
        'compcond': float(z @ mu) / (1 + inf_norm(x)),
        'costcond': abs(f - f0) / (1 + abs(f0)),
    }


def _is_converged(cond: dict[str, float], cfg: SolverConfig) -> bool:
    return (cond['feascond'] < cfg.feastol and cond['gradcond'] < cfg.gradtol
            and cond['compcond'] < cfg.comptol and cond['costcond'] < cfg.costtol)


def _solve_kkt(K: sp.csc_matrix, rhs: np.ndarray, nx: int, cfg: SolverConfig) -> np.ndarray | None:
    """Solve the KKT system, adding a growing diagonal perturbation on failure."""
    delta = 0.0
    n = K.shape[0]
    while True:
        if delta:
            shift = np.r_[np.full(nx, delta), np.full(n - nx, -delta)]
            Kd = (K + sp.diags(shift)).tocsc()
        else:
            Kd = K
        try:
            lu = splu(Kd)
            sol = lu.solve(rhs)
            # large barrier weights make K badly scaled near the optimum
            for _ in range(cfg.refine_steps):
                sol = sol + lu.solve(rhs - Kd @ sol)
            if np.all(np.isfinite(sol)):
                return sol
        except RuntimeError:
            pass
        delta = cfg.reg_start if delta == 0 else delta * 10
        if delta > cfg.reg_max:
            return None
        log.debug('KKT factorization failed; regularizing with %.0e', delta)


def _step_length(v: np.ndarray, dv: np.ndarray, xi: float) -> float:
    k = dv < 0
    if not np.any(k):
        return 1.0
    return float(min(xi * np.min(v[k] / -dv[k]), 1.0))


def solve_opf(case: Case, cs: ConstraintSet | None = None, start: OpfVariables | None = None,
              config: SolverConfig | None = None) -> OpfSolution:
    """Minimise total generation cost subject to AC power flow and the enforced limits."""
    cfg = config or SolverConfig()
    cs = ConstraintSet.full(case) if cs is None else cs
    cs.validate(case)
    if start is not None and np.any(np.asarray(start.vm) <= 0):
        raise ValueError('start point must have positive voltage magnitudes')

    t0 = time.perf_counter()
    prob = _OpfProblem(case, cs, cfg.cost_scale)
    x = (start or OpfVariables.flat_start(case)).as_vector()
    x[case.ref_index] = 0.0
    nx = prob.nx

    f, df, d2f = prob.objective(x)
    g, h, Jg, Jh = prob.constraints(x)
    niq = len(h)
    z = np.full(niq, cfg.z0)
    k = h < -cfg.z0
    z[k] = -h[k]
    # low enough that niq products of size gamma pass the complementarity test
    floor = min(cfg.barrier_floor, cfg.comptol / (10 * max(niq, 1)))
    gamma = 1.0 if niq else floor
    mu = np.full(niq, cfg.z0)
    k = gamma / z > cfg.z0
    mu[k] = gamma / z[k]
    lam = np.zeros(len(g))
    f0 = f
    Lx = df + Jg.T @ lam + Jh.T @ mu
    cond = _conditions(x, z, lam, mu, f, f0, g, h, Lx)

    status = SolveStatus.MAX_ITER
    it = 0
    if not niq and _is_converged(cond, cfg):
        status = SolveStatus.CONVERGED
    while status is SolveStatus.MAX_ITER and it < cfg.max_iter:
        it += 1
        Lxx = prob.hessian(x, lam, mu, d2f)
        zinv = 1.0 / z
        W = sp.csr_matrix((mu * zinv, (np.arange(niq), np.arange(niq))), shape=(niq, niq))
        M = Lxx + Jh.T @ W @ Jh
        N = Lx + Jh.T @ (zinv * (mu * h + gamma))
        K = sp.bmat([[M, Jg.T], [Jg, None]], format='csc')
        sol = _solve_kkt(K, np.r_[-N, -g], nx, cfg)
        if sol is None:
            status = SolveStatus.NUMERICAL_FAILURE
            break
        dx, dlam = sol[:nx], sol[nx:]
        dz = -h - z - Jh @ dx
        dmu = -mu + zinv * (gamma - mu * dz)

        alphap = _step_length(z, dz, cfg.xi)
        alphad = _step_length(mu, dmu, cfg.xi)
        x = x + alphap * dx
        x[case.ref_index] = 0.0
        z = z + alphap * dz
        lam = lam + alphad * dlam
        mu = mu + alphad * dmu

        f0 = f
        f, df, d2f = prob.objective(x)
        g, h, Jg, Jh = prob.constraints(x)
        Lx = df + Jg.T @ lam + Jh.T @ mu
        cond = _conditions(x, z, lam, mu, f, f0, g, h, Lx)
        centrality = float(np.max(np.abs(z * mu - gamma))) if niq else 0.0
        log.debug('it %3d  f %.6g  feas %.2e  grad %.2e  comp %.2e  gamma %.1e  a_p %.3f  a_d %.3f',
                  it, f / cfg.cost_scale, cond['feascond'], cond['gradcond'], cond['compcond'],
                  gamma, alphap, alphad)

        at_floor = gamma <= floor
        if _is_converged(cond, cfg) and at_floor and centrality <= gamma:
            status = SolveStatus.CONVERGED
            break
        if (not np.all(np.isfinite(x)) or not np.all(np.isfinite(mu))
                or alphap < cfg.alpha_min or alphad < cfg.alpha_min):
            status = SolveStatus.NUMERICAL_FAILURE
            break
        if not at_floor and max(cond['feascond'], cond['gradcond'], centrality) <= cfg.barrier_kappa * gamma:
            gamma = max(floor, min(cfg.sigma * gamma, gamma ** 1.5))

    wall = time.perf_counter() - t0
    if status is not SolveStatus.CONVERGED:
        log.info('%s: OPF %s after %d iterations', case.name, status.value, it)
    return OpfSolution(
        vars=OpfVariables.from_vector(x, case.nb, case.ng),
        objective=prob.cost(x),
        mult_eq=prob.unpack_eq(lam),
        mult_ineq=prob.unpack_ineq(mu, 0.0),
        slacks=prob.unpack_ineq(z, np.nan),
        status=status,
        iterations=it,
        wall_time=wall,
        feval_count=prob.feval_count,
        constraint_set=cs,
    )


def kkt_residuals(case: Case, sol: OpfSolution, config: SolverConfig | None = None) -> dict[str, float]:
    """Stationarity, feasibility and complementarity measures recomputed from a solution.

    Measured on the scaled problem the solver iterates on, so a converged
    solution reports values below the configured tolerances.
    """
    cfg = config or SolverConfig()
    prob = _OpfProblem(case, sol.constraint_set, cfg.cost_scale)
    x = sol.vars.as_vector()
    lam = prob.pack_eq(sol.mult_eq)
    mu = prob.pack_ineq(sol.mult_ineq)
    z = prob.pack_ineq(sol.slacks)
    f, df, _ = prob.objective(x)
    g, h, Jg, Jh = prob.constraints(x)
    Lx = df + Jg.T @ lam + Jh.T @ mu
    cond = _conditions(x, z, lam, mu, f, f, g, h, Lx)
    cond.pop('costcond')
    return cond


def label_activity(sol: OpfSolution, case: Case, eps_active: float = EPS_ACTIVE) -> ActivityLabels:
    """Per-bus and per-branch active flags of a converged solution."""
    if not sol.converged:
        raise ValueError(f'cannot label a solution with status {sol.status.value}')
    vm = np.asarray(sol.vars.vm)
    v_active = np.minimum(np.asarray(case.vmax) - vm, vm - np.asarray(case.vmin)) <= eps_active
    ff, ft = branch_flows(build_admittance(case), VoltageState(sol.vars.theta, vm))
    fmax = np.asarray(case.rate_a_pu)
    l_active = (fmax > 0) & (fmax - np.maximum(ff, ft) <= eps_active * np.maximum(1.0, fmax))
    return ActivityLabels(v_active, l_active)


def check_violations(case: Case, vars: OpfVariables, full_set: ConstraintSet | None = None,
                     tol: float = 1e-6) -> list[Violation]:
    """Voltage and flow limits of `full_set` that `vars` breaks by more than `tol` p.u."""
    full_set = ConstraintSet.full(case) if full_set is None else full_set
    vm = np.asarray(vars.vm)
    found: list[Violation] = []
    for i in sorted(full_set.voltage_buses):
        if vm[i] > case.vmax[i] + tol:
            found.append(Violation('vmax', i, float(vm[i] - case.vmax[i])))
        if vm[i] < case.vmin[i] - tol:
            found.append(Violation('vmin', i, float(case.vmin[i] - vm[i])))
    if full_set.flow_branches:
        ff, ft = branch_flows(build_admittance(case), VoltageState(vars.theta, np.abs(vm)))
        for k in sorted(full_set.flow_branches):
            fmax = case.rate_a_pu[k]
            if ff[k] > fmax + tol:
                found.append(Violation('flow_f', k, float(ff[k] - fmax)))
            if ft[k] > fmax + tol:
                found.append(Violation('flow_t', k, float(ft[k] - fmax)))
    return found


def solution_to_dict(sol: OpfSolution, case: Case, labels: ActivityLabels | None = None) -> dict:
    base = case.base_mva
    out = {
        'case': case.name,
        'status': sol.status.value,
        'objective': sol.objective,
        'iterations': sol.iterations,
        'wall_time': sol.wall_time,
        'feval_count': sol.feval_count,
        'bus_ids': [b.id for b in case.buses],
        'theta': sol.vars.theta.tolist(),
        'vm': sol.vars.vm.tolist(),
        'pg_mw': (sol.vars.pg * base).tolist(),
        'qg_mvar': (sol.vars.qg * base).tolist(),
        'voltage_buses': sorted(sol.constraint_set.voltage_buses),
        'flow_branches': sorted(sol.constraint_set.flow_branches),
    }
    if labels is not None:
        out['labels'] = {'v_active': labels.v_active.astype(int).tolist(),
                         'l_active': labels.l_active.astype(int).tolist()}
    return out


def solution_to_json(sol: OpfSolution, case: Case, labels: ActivityLabels | None = None) -> str:
    return json.dumps(solution_to_dict(sol, case, labels), indent=2)
