"""Bus admittance, nodal injections, branch flows and their derivatives.

Everything here works in polar coordinates on per-unit quantities. Flow
constraints are handled on squared apparent power |S|^2 so the functions stay
smooth at zero flow; `branch_flows` reports magnitudes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from case_io import Case


class DegenerateBranchError(ValueError):
    pass


@dataclass(frozen=True)
class VoltageState:
    theta: np.ndarray
    vm: np.ndarray

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.vm) <= 0):
            raise ValueError('voltage magnitudes must be positive')

    @property
    def complex(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.theta)


@dataclass(frozen=True)
class AdmittanceModel:
    Ybus: sp.csr_matrix
    Yf: sp.csr_matrix
    Yt: sp.csr_matrix
    Cf: sp.csr_matrix
    Ct: sp.csr_matrix
    f: np.ndarray
    t: np.ndarray

    @property
    def nb(self) -> int:
        return self.Ybus.shape[0]

    @property
    def nl(self) -> int:
        return self.Yf.shape[0]

    def subset(self, branches: np.ndarray) -> 'AdmittanceModel':
        """Model restricted to the given branch rows (Ybus unchanged)."""
        branches = np.asarray(branches, dtype=int)
        return AdmittanceModel(self.Ybus, self.Yf[branches], self.Yt[branches],
                               self.Cf[branches], self.Ct[branches],
                               self.f[branches], self.t[branches])


def build_admittance(case: Case) -> AdmittanceModel:
    nb, nl = case.nb, case.nl
    r = np.array([br.r for br in case.branches], dtype=float)
    x = np.array([br.x for br in case.branches], dtype=float)
    bad = np.flatnonzero((r == 0) & (x == 0))
    if bad.size:
        k = int(bad[0])
        raise DegenerateBranchError(
            f'branch {k} ({case.branches[k].f_bus}-{case.branches[k].t_bus}) has r = x = 0')
    b = np.array([br.b_chg for br in case.branches], dtype=float)
    tap = np.array([br.tap * np.exp(1j * br.shift) for br in case.branches], dtype=complex)

    ys = 1.0 / (r + 1j * x)
    ytt = ys + 0.5j * b
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap

    f, t = np.asarray(case.f_idx), np.asarray(case.t_idx)
    rows = np.r_[np.arange(nl), np.arange(nl)]
    Yf = sp.csr_matrix((np.r_[yff, yft], (rows, np.r_[f, t])), shape=(nl, nb))
    Yt = sp.csr_matrix((np.r_[ytf, ytt], (rows, np.r_[f, t])), shape=(nl, nb))
    Cf = sp.csr_matrix((np.ones(nl), (np.arange(nl), f)), shape=(nl, nb))
    Ct = sp.csr_matrix((np.ones(nl), (np.arange(nl), t)), shape=(nl, nb))
    Ybus = (Cf.T @ Yf + Ct.T @ Yt + sp.diags(np.asarray(case.shunt_pu))).tocsr()
    return AdmittanceModel(Ybus, Yf, Yt, Cf, Ct, f.copy(), t.copy())


def complex_injections(model: AdmittanceModel, v: VoltageState) -> np.ndarray:
    V = v.complex
    return V * np.conj(model.Ybus @ V)


def injections(model: AdmittanceModel, v: VoltageState) -> tuple[np.ndarray, np.ndarray]:
    """Net power injected into the network at each bus, (P, Q) in p.u."""
    S = complex_injections(model, v)
    return S.real, S.imag


def complex_flows(model: AdmittanceModel, v: VoltageState) -> tuple[np.ndarray, np.ndarray]:
    V = v.complex
    Sf = V[model.f] * np.conj(model.Yf @ V)
    St = V[model.t] * np.conj(model.Yt @ V)
    return Sf, St


def branch_flows(model: AdmittanceModel, v: VoltageState) -> tuple[np.ndarray, np.ndarray]:
    """Apparent power magnitude at the from and to end of every branch, p.u."""
    Sf, St = complex_flows(model, v)
    return np.abs(Sf), np.abs(St)


# ---------------------------------------------------------------------------
# First derivatives
# ---------------------------------------------------------------------------

def dSbus_dV(Ybus: sp.spmatrix, V: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """dS/dtheta and dS/dvm of the complex bus injections."""
    Ibus = Ybus @ V
    diagV = sp.diags(V)
    diagIbus = sp.diags(Ibus)
    diagVnorm = sp.diags(V / np.abs(V))
    dS_dVa = 1j * diagV @ (diagIbus - Ybus @ diagV).conj()
    dS_dVm = diagV @ (Ybus @ diagVnorm).conj() + diagIbus.conj() @ diagVnorm
    return dS_dVa.tocsr(), dS_dVm.tocsr()


def dSbr_dV(Ybr: sp.spmatrix, idx: np.ndarray, V: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix, np.ndarray]:
    """Derivatives of the complex flow at one branch end (`idx` is that end's bus)."""
    nl, nb = Ybr.shape
    Ibr = Ybr @ V
    Vnorm = V / np.abs(V)
    rows = np.arange(nl)
    diagVbr = sp.diags(V[idx])
    diagIbr = sp.diags(Ibr)
    Vbr_sel = sp.csr_matrix((V[idx], (rows, idx)), shape=(nl, nb))
    Vnorm_sel = sp.csr_matrix((Vnorm[idx], (rows, idx)), shape=(nl, nb))
    dS_dVa = 1j * (diagIbr.conj() @ Vbr_sel - diagVbr @ (Ybr @ sp.diags(V)).conj())
    dS_dVm = diagVbr @ (Ybr @ sp.diags(Vnorm)).conj() + diagIbr.conj() @ Vnorm_sel
    Sbr = V[idx] * np.conj(Ibr)
    return dS_dVa.tocsr(), dS_dVm.tocsr(), Sbr


def dAbr_dV(dS_dVa: sp.spmatrix, dS_dVm: sp.spmatrix, Sbr: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Derivatives of |S|^2 from those of S."""
    dP = sp.diags(2 * Sbr.real)
    dQ = sp.diags(2 * Sbr.imag)
    dA_dVa = dP @ dS_dVa.real + dQ @ dS_dVa.imag
    dA_dVm = dP @ dS_dVm.real + dQ @ dS_dVm.imag
    return dA_dVa.tocsr(), dA_dVm.tocsr()


# ---------------------------------------------------------------------------
# Second derivatives, contracted with a multiplier vector
# ---------------------------------------------------------------------------

def d2Sbus_dV2(Ybus: sp.spmatrix, V: np.ndarray, lam: np.ndarray):
    n = len(V)
    Ibus = Ybus @ V
    diaglam = sp.diags(lam)
    diagV = sp.diags(V)
    A = sp.diags(lam * V)
    B = Ybus @ diagV
    C = A @ B.conj()
    D = Ybus.conj().T @ diagV
    E = diagV.conj() @ (D @ diaglam - sp.diags(D @ lam))
    F = C - A @ sp.diags(np.conj(Ibus))
    G = sp.diags(np.ones(n) / np.abs(V))
    Gaa = E + F
    Gva = 1j * G @ (E - F)
    Gav = Gva.T
    Gvv = G @ (C + C.T) @ G
    return Gaa, Gav, Gva, Gvv


def d2Sbr_dV2(Cbr: sp.spmatrix, Ybr: sp.spmatrix, V: np.ndarray, lam: np.ndarray):
    nb = len(V)
    diaglam = sp.diags(lam)
    diagV = sp.diags(V)
    A = Ybr.T @ diaglam @ Cbr
    B = diagV.conj() @ A @ diagV
    D = sp.diags((A @ V) * np.conj(V))
    E = sp.diags((A.T @ np.conj(V)) * V)
    F = B + B.T
    G = sp.diags(np.ones(nb) / np.abs(V))
    Haa = F - D - E
    Hva = 1j * G @ (B - B.T - D + E)
    Hav = Hva.T
    Hvv = G @ F @ G
    return Haa, Hav, Hva, Hvv


def d2ASbr_dV2(dS_dVa, dS_dVm, Sbr, Cbr, Ybr, V, lam):
    """Hessian of lam' |S|^2, as the four (theta, vm) blocks."""
    diaglam = sp.diags(lam)
    Saa, Sav, Sva, Svv = d2Sbr_dV2(Cbr, Ybr, V, np.conj(Sbr) * lam)
    Haa = 2 * (Saa + dS_dVa.T @ diaglam @ dS_dVa.conj()).real
    Hva = 2 * (Sva + dS_dVm.T @ diaglam @ dS_dVa.conj()).real
    Hav = 2 * (Sav + dS_dVa.T @ diaglam @ dS_dVm.conj()).real
    Hvv = 2 * (Svv + dS_dVm.T @ diaglam @ dS_dVm.conj()).real
    return Haa, Hav, Hva, Hvv


# ---------------------------------------------------------------------------
# Assembled blocks on raw complex voltages (used directly by the solver)
# ---------------------------------------------------------------------------

def balance_jacobian(model: AdmittanceModel, V: np.ndarray) -> tuple[np.ndarray, sp.csr_matrix, sp.csr_matrix]:
    """Complex injections S and the nb x 2nb blocks dP, dQ w.r.t. [theta; vm]."""
    S = V * np.conj(model.Ybus @ V)
    dS_dVa, dS_dVm = dSbus_dV(model.Ybus, V)
    dP = sp.hstack([dS_dVa.real, dS_dVm.real]).tocsr()
    dQ = sp.hstack([dS_dVa.imag, dS_dVm.imag]).tocsr()
    return S, dP, dQ


def flow_jacobian(model: AdmittanceModel, V: np.ndarray):
    """Complex end flows Sf, St and the nl x 2nb blocks of |Sf|^2, |St|^2."""
    nb, nl = model.nb, model.nl
    if not nl:
        empty = sp.csr_matrix((0, 2 * nb))
        return np.zeros(0, dtype=complex), np.zeros(0, dtype=complex), empty, empty
    dSf_dVa, dSf_dVm, Sf = dSbr_dV(model.Yf, model.f, V)
    dSt_dVa, dSt_dVm, St = dSbr_dV(model.Yt, model.t, V)
    dAf = sp.hstack(dAbr_dV(dSf_dVa, dSf_dVm, Sf)).tocsr()
    dAt = sp.hstack(dAbr_dV(dSt_dVa, dSt_dVm, St)).tocsr()
    return Sf, St, dAf, dAt


def lagrangian_hessian(model: AdmittanceModel, V: np.ndarray, lam_p: np.ndarray, lam_q: np.ndarray,
                       mu_f: np.ndarray, mu_t: np.ndarray) -> sp.csr_matrix:
    """2nb x 2nb Hessian of lam_p'P + lam_q'Q + mu_f'|Sf|^2 + mu_t'|St|^2."""
    Gp = d2Sbus_dV2(model.Ybus, V, lam_p)
    Gq = d2Sbus_dV2(model.Ybus, V, lam_q)
    H = sp.bmat([[Gp[0].real + Gq[0].imag, Gp[1].real + Gq[1].imag],
                 [Gp[2].real + Gq[2].imag, Gp[3].real + Gq[3].imag]])
    if model.nl:
        dSf_dVa, dSf_dVm, Sf = dSbr_dV(model.Yf, model.f, V)
        dSt_dVa, dSt_dVm, St = dSbr_dV(model.Yt, model.t, V)
        Hf = d2ASbr_dV2(dSf_dVa, dSf_dVm, Sf, model.Cf, model.Yf, V, mu_f)
        Ht = d2ASbr_dV2(dSt_dVa, dSt_dVm, St, model.Ct, model.Yt, V, mu_t)
        H = H + sp.bmat([[Hf[0] + Ht[0], Hf[1] + Ht[1]],
                         [Hf[2] + Ht[2], Hf[3] + Ht[3]]])
    return sp.csr_matrix(H)


@dataclass(frozen=True)
class Jacobians:
    """Blocks of d(P, Q, |Sf|^2, |St|^2)/d(theta, vm), each rows x 2nb."""
    dP: sp.csr_matrix
    dQ: sp.csr_matrix
    dAf: sp.csr_matrix
    dAt: sp.csr_matrix


def derivatives(model: AdmittanceModel, v: VoltageState, order: str = 'jacobian',
                lam_p: np.ndarray | None = None, lam_q: np.ndarray | None = None,
                mu_f: np.ndarray | None = None, mu_t: np.ndarray | None = None):
    """Analytic derivatives of injections and squared flow magnitudes.

    order='jacobian' returns `Jacobians`. order='hessian' returns the
    multiplier-weighted Hessian (see `lagrangian_hessian`); omitted
    multipliers are zero.
    """
    V = v.complex
    nb, nl = model.nb, model.nl
    if order == 'jacobian':
        _, dP, dQ = balance_jacobian(model, V)
        _, _, dAf, dAt = flow_jacobian(model, V)
        return Jacobians(dP, dQ, dAf, dAt)
    if order == 'hessian':
        def weights(w, n):
            return np.zeros(n) if w is None else np.asarray(w, dtype=float)
        return lagrangian_hessian(model, V, weights(lam_p, nb), weights(lam_q, nb),
                                  weights(mu_f, nl), weights(mu_t, nl))
    raise ValueError(f'unsupported derivative order {order!r}')
