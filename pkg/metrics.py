"""Confusion statistics, optimality gap, timing and constraint-count reports."""
from __future__ import annotations

from dataclasses import dataclass, fields
from fractions import Fraction
from statistics import median
from typing import Sequence

import numpy as np

from case_io import Case
from opf_solver import ConstraintSet, fixed_bounds

METRIC_NAMES = ('accuracy', 'misclassification', 'tpr', 'fnr', 'tnr', 'fpr', 'ppv', 'fdr', 'npv', 'for_')


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if int(value) != value or value < 0:
                raise ValueError(f'{f.name} must be a non-negative integer, got {value}')
            object.__setattr__(self, f.name, int(value))

    def __add__(self, other: 'ConfusionCounts') -> 'ConfusionCounts':
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> dict[str, int]:
        return {'tp': self.tp, 'tn': self.tn, 'fp': self.fp, 'fn': self.fn}


@dataclass(frozen=True)
class MetricSet:
    """Exact ratios; None where the denominator is zero."""
    accuracy: Fraction | None
    misclassification: Fraction | None
    tpr: Fraction | None
    fnr: Fraction | None
    tnr: Fraction | None
    fpr: Fraction | None
    ppv: Fraction | None
    fdr: Fraction | None
    npv: Fraction | None
    for_: Fraction | None

    def percent(self) -> dict[str, float | None]:
        return {name: None if getattr(self, name) is None else float(getattr(self, name) * 100)
                for name in METRIC_NAMES}


@dataclass(frozen=True)
class GapReport:
    gaps: tuple[float, ...]
    fallback_used: tuple[bool, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.gaps)) if self.gaps else float('nan')

    @property
    def mean_without_fallback(self) -> float:
        clean = [g for g, used in zip(self.gaps, self.fallback_used) if not used]
        return float(np.mean(clean)) if clean else float('nan')


@dataclass(frozen=True)
class SolveTiming:
    wall_times: tuple[float, ...]
    iterations: int
    feval_count: int


@dataclass(frozen=True)
class TimingReport:
    scenarios: int
    iterations_original: float
    iterations_truncated: float
    time_original: float
    time_truncated: float
    feval_original: float
    feval_truncated: float

    @property
    def time_saving(self) -> float:
        """Percent of original wall time saved by the truncated solve."""
        return (1 - self.time_truncated / self.time_original) * 100

    @property
    def feval_saving(self) -> float:
        return (1 - self.feval_truncated / self.feval_original) * 100


@dataclass(frozen=True)
class ConstraintCounts:
    voltage: int  # enforced inequality rows, both bounds
    flow: int  # both ends
    generator: int
    equality: int

    @property
    def inequality(self) -> int:
        return self.voltage + self.flow + self.generator

    @property
    def total(self) -> int:
        return self.inequality + self.equality


@dataclass(frozen=True)
class RegressionErrors:
    mae: float
    rmse: float


def accumulate_confusion(predicted: np.ndarray, actual: np.ndarray) -> ConfusionCounts:
    p = np.asarray(predicted).astype(bool)
    a = np.asarray(actual).astype(bool)
    if p.shape != a.shape:
        raise ValueError(f'predicted shape {p.shape} != actual shape {a.shape}')
    return ConfusionCounts(tp=int(np.sum(p & a)), tn=int(np.sum(~p & ~a)),
                           fp=int(np.sum(p & ~a)), fn=int(np.sum(~p & a)))


def _ratio(num: int, den: int) -> Fraction | None:
    return Fraction(num, den) if den else None


def compute_metrics(c: ConfusionCounts) -> MetricSet:
    if c.total == 0:
        raise ValueError('cannot compute metrics from all-zero counts')
    pos, neg = c.tp + c.fn, c.tn + c.fp
    pred_pos, pred_neg = c.tp + c.fp, c.tn + c.fn
    return MetricSet(
        accuracy=_ratio(c.tp + c.tn, c.total),
        misclassification=_ratio(c.fp + c.fn, c.total),
        tpr=_ratio(c.tp, pos),
        fnr=_ratio(c.fn, pos),
        tnr=_ratio(c.tn, neg),
        fpr=_ratio(c.fp, neg),
        ppv=_ratio(c.tp, pred_pos),
        fdr=_ratio(c.fp, pred_pos),
        npv=_ratio(c.tn, pred_neg),
        for_=_ratio(c.fn, pred_neg),
    )


def optimality_gap(f_truncated: float, f_original: float) -> float:
    """Percent difference of the truncated objective from the original."""
    if not f_original > 0:
        raise ValueError(f'original objective must be positive, got {f_original}')
    return abs(f_truncated - f_original) / f_original * 100


def gap_report(pairs: Sequence[tuple[float, float]], fallback_used: Sequence[bool]) -> GapReport:
    return GapReport(tuple(optimality_gap(t, o) for t, o in pairs), tuple(bool(u) for u in fallback_used))


def timing_compare(runs: Sequence[tuple[SolveTiming, SolveTiming]]) -> TimingReport:
    """Median wall time per scenario, then means across (original, truncated) pairs."""
    if not runs:
        raise ValueError('timing comparison needs at least one scenario')
    for orig, trunc in runs:
        if not orig.wall_times or not trunc.wall_times:
            raise ValueError('every solve needs at least one timed run')
    return TimingReport(
        scenarios=len(runs),
        iterations_original=float(np.mean([o.iterations for o, _ in runs])),
        iterations_truncated=float(np.mean([t.iterations for _, t in runs])),
        time_original=float(np.mean([median(o.wall_times) for o, _ in runs])),
        time_truncated=float(np.mean([median(t.wall_times) for _, t in runs])),
        feval_original=float(np.mean([o.feval_count for o, _ in runs])),
        feval_truncated=float(np.mean([t.feval_count for _, t in runs])),
    )


def constraint_counts(case: Case, cs: ConstraintSet) -> ConstraintCounts:
    pfix = int(np.sum(fixed_bounds(*case.pg_bounds_pu)))
    qfix = int(np.sum(fixed_bounds(*case.qg_bounds_pu)))
    voltage, flow = 2 * len(cs.voltage_buses), 2 * len(cs.flow_branches)
    return ConstraintCounts(
        voltage=voltage,
        flow=flow,
        generator=cs.inequality_count(case) - voltage - flow,
        equality=2 * case.nb + 1 + pfix + qfix,
    )


def reduction(original: int, truncated: int) -> float:
    return (1 - truncated / original) * 100 if original else 0.0


def regression_errors(pred: np.ndarray, actual: np.ndarray) -> RegressionErrors:
    pred, actual = np.asarray(pred, dtype=float), np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise ValueError(f'prediction shape {pred.shape} != actual shape {actual.shape}')
    err = pred - actual
    return RegressionErrors(float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2))))


# -- report text ----------------------------------------------------------------

def _pct(value: float | None, digits: int = 2) -> str:
    return 'undefined' if value is None else f'{value:.{digits}f}%'


def metric_table(rows: dict[str, tuple[ConfusionCounts, MetricSet]]) -> str:
    """Aligned text table, one row per classifier."""
    header = ['classifier', 'TP', 'TN', 'FP', 'FN'] + [n.rstrip('_').upper() for n in METRIC_NAMES]
    lines = [header]
    for name, (c, m) in rows.items():
        pct = m.percent()
        lines.append([name, str(c.tp), str(c.tn), str(c.fp), str(c.fn)] + [_pct(pct[n]) for n in METRIC_NAMES])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return '\n'.join('  '.join(cell.rjust(w) for cell, w in zip(row, widths)) for row in lines)


def metrics_to_dict(c: ConfusionCounts, m: MetricSet) -> dict:
    return {'counts': c.to_dict(), 'percent': m.percent(),
            'exact': {n: None if getattr(m, n) is None else str(getattr(m, n)) for n in METRIC_NAMES}}


def timing_text(t: TimingReport) -> str:
    return (f'Timing over {t.scenarios} scenarios\n'
            f'  iterations   original {t.iterations_original:.1f}  truncated {t.iterations_truncated:.1f}\n'
            f'  feval count  original {t.feval_original:.1f}  truncated {t.feval_truncated:.1f}\n'
            f'  wall time    original {t.time_original:.4f}s  truncated {t.time_truncated:.4f}s\n'
            f'  time saving  {t.time_saving:.1f}%')


def gap_text(g: GapReport) -> str:
    return (f'Optimality gap over {len(g.gaps)} scenarios: mean {g.mean:.3g}%'
            f' ({sum(g.fallback_used)} needed fallback; mean without fallback {g.mean_without_fallback:.3g}%)')


def constraint_text(full_total: int, full_inequality: int, truncated_total: float,
                    truncated_inequality: float) -> str:
    """Constraint reduction line; the truncated figures may be means over scenarios."""
    return (f'Constraints: original {full_total}, truncated mean {truncated_total:.1f}, '
            f'reduction {reduction(full_total, truncated_total):.1f}% '
            f'(inequalities {full_inequality} -> {truncated_inequality:.1f}, '
            f'{reduction(full_inequality, truncated_inequality):.1f}%)')
