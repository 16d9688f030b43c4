"""Two-dataset training, predict -> truncate -> solve, and evaluation runs."""
from __future__ import annotations

import json
import logging
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from case_io import Case, case_hash
from learner import PROB_CLAMP, TrainConfig, TrainedModel, load_model, predict, save_model, train
from metrics import (ConfusionCounts, GapReport, MetricSet, RegressionErrors, SolveTiming, TimingReport,
                     accumulate_confusion, compute_metrics, constraint_counts, constraint_text, gap_report,
                     gap_text, metric_table, metrics_to_dict, regression_errors, timing_compare,
                     timing_text)
from opf_solver import (ConstraintSet, OpfSolution, SolverConfig, SolverFailure, Violation,
                        check_violations, solve_opf)
from scenario import (Dataset, DatasetError, DemandVector, apply_demand, ni_features, run_batch,
                      write_csv)
from solve_log import SolveRecord

log = logging.getLogger(__name__)

FEATURE_MODES = ('net_injection', 'demand_only')
FALLBACK_MODES = ('iterative_inclusion', 'warm_start_full', 'none')
DEFAULT_THRESHOLD = 0.5
ROUND_CAP = 5
MODEL_FILES = {'regressor': 'regressor.json', 'classifier_v': 'classifier_v.json',
               'classifier_l': 'classifier_l.json'}


class ModelMismatchError(ValueError):
    pass


class LeakageWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TrainedModels:
    regressor: TrainedModel
    classifier_v: TrainedModel
    classifier_l: TrainedModel
    case_hash: str
    feature_mode: str = 'net_injection'
    manifest: dict = field(default_factory=dict, compare=False)

    def check_case(self, case: Case) -> None:
        if case_hash(case) != self.case_hash:
            raise ModelMismatchError(f'models were trained for a different case than {case.name!r}')
        nd, ni = len(case.demand_buses), len(case.injection_buses)
        feat = 2 * ni if self.feature_mode == 'net_injection' else 2 * nd
        expected = {
            'regressor': (2 * nd, 2 * case.ng),
            'classifier_v': (feat, case.nb),
            'classifier_l': (feat, case.nl),
        }
        for name, (n_in, n_out) in expected.items():
            model = getattr(self, name)
            if (model.input_width, model.output_width) != (n_in, n_out):
                raise ModelMismatchError(f'{name} maps {model.input_width} -> {model.output_width}, '
                                         f'case needs {n_in} -> {n_out}')


@dataclass(frozen=True)
class Prediction:
    g_tilde: np.ndarray
    ni_tilde: np.ndarray
    v_scores: np.ndarray
    l_scores: np.ndarray
    threshold: float = DEFAULT_THRESHOLD

    @property
    def v_active_pred(self) -> np.ndarray:
        return self.v_scores >= self.threshold

    @property
    def l_active_pred(self) -> np.ndarray:
        return self.l_scores >= self.threshold

    def row(self, i: int) -> 'Prediction':
        return Prediction(self.g_tilde[i], self.ni_tilde[i], self.v_scores[i], self.l_scores[i], self.threshold)


@dataclass(frozen=True)
class FallbackResult:
    solution: OpfSolution
    rounds: int
    constraint_set: ConstraintSet
    feasible: bool
    first_violations: tuple[Violation, ...] = ()
    first_solution: OpfSolution | None = None

    @property
    def flagged(self) -> bool:
        return not self.feasible


# -- training -------------------------------------------------------------------

def classifier_features(case: Case, models_or_regressor, D: np.ndarray, feature_mode: str) -> tuple[np.ndarray, np.ndarray]:
    """(predicted generation, classifier inputs) for demand rows."""
    regressor = getattr(models_or_regressor, 'regressor', models_or_regressor)
    G = predict(regressor, D)
    if feature_mode == 'demand_only':
        return G, np.asarray(D, dtype=float)
    return G, ni_features(case, D, G)


def train_all(case: Case, dataset1: Dataset, dataset2: Dataset, reg_config: TrainConfig | None = None,
              clf_config: TrainConfig | None = None, feature_mode: str = 'net_injection') -> TrainedModels:
    if feature_mode not in FEATURE_MODES:
        raise ValueError(f'unknown feature mode {feature_mode!r}')
    dataset1.check_case(case)
    dataset2.check_case(case)
    if dataset1.fingerprint() == dataset2.fingerprint() or (
            dataset1.config.seed, dataset1.config.stream) == (dataset2.config.seed, dataset2.config.stream):
        warnings.warn('regressor and classifiers share a dataset; classifier accuracy will look '
                      'better than it is on unseen demand', LeakageWarning, stacklevel=2)

    reg_config = replace(reg_config or TrainConfig(), task='regression')
    clf_config = replace(clf_config or TrainConfig(), task='classification')
    start = time.time()
    print(f"Training regressor on {dataset1.kept} rows ({dataset1.D.shape[1]} -> {dataset1.G.shape[1]})...")
    regressor = train(dataset1.D, dataset1.G, reg_config)
    _, X2 = classifier_features(case, regressor, dataset2.D, feature_mode)

    print(f"Training classifiers on {dataset2.kept} rows ({feature_mode}, {X2.shape[1]} features)...")
    with ThreadPoolExecutor(max_workers=2) as exe:
        fut_v = exe.submit(train, X2, dataset2.v_labels, clf_config)
        fut_l = exe.submit(train, X2, dataset2.l_labels, clf_config)
        classifier_v, classifier_l = fut_v.result(), fut_l.result()
    print(f"Done. Trained 3 models in {time.time() - start:.1f}s")

    manifest = {
        'case_name': case.name,
        'feature_mode': feature_mode,
        'datasets': {'dataset1': dataset1.fingerprint(), 'dataset2': dataset2.fingerprint()},
        'regressor_config': asdict(reg_config),
        'classifier_config': asdict(clf_config),
    }
    return TrainedModels(regressor, classifier_v, classifier_l, case_hash(case), feature_mode, manifest)


# -- inference ------------------------------------------------------------------

def predict_dataset(models: TrainedModels, case: Case, D: np.ndarray,
                    threshold: float = DEFAULT_THRESHOLD) -> Prediction:
    """Predictions for demand rows; every field gains a leading row axis."""
    if not 0 <= threshold <= 1:
        raise ValueError(f'threshold must be in [0, 1], got {threshold}')
    models.check_case(case)
    D = np.atleast_2d(np.asarray(D, dtype=float))
    G, X = classifier_features(case, models, D, models.feature_mode)
    ni = ni_features(case, D, G)
    v = np.clip(predict(models.classifier_v, X), PROB_CLAMP, 1 - PROB_CLAMP)
    l = np.clip(predict(models.classifier_l, X), PROB_CLAMP, 1 - PROB_CLAMP)
    return Prediction(G, ni, v, l, threshold)


def predict_active(models: TrainedModels, case: Case, d: DemandVector,
                   threshold: float = DEFAULT_THRESHOLD) -> Prediction:
    return predict_dataset(models, case, d.stacked, threshold).row(0)


def build_truncated(case: Case, pred: Prediction) -> ConstraintSet:
    v = np.asarray(pred.v_active_pred, dtype=bool)
    l = np.asarray(pred.l_active_pred, dtype=bool) & (np.asarray(case.rate_a_pu) > 0)
    return ConstraintSet(frozenset(np.flatnonzero(v).tolist()), frozenset(np.flatnonzero(l).tolist()))


def truncated_from_labels(case: Case, v_labels: np.ndarray, l_labels: np.ndarray) -> ConstraintSet:
    scores_v = np.asarray(v_labels, dtype=float)
    scores_l = np.asarray(l_labels, dtype=float)
    return build_truncated(case, Prediction(np.zeros(0), np.zeros(0), scores_v, scores_l, 0.5))


def _include_violations(cs: ConstraintSet, violations: list[Violation]) -> ConstraintSet:
    buses = [v.index for v in violations if v.kind in ('vmin', 'vmax')]
    branches = [v.index for v in violations if v.kind in ('flow_f', 'flow_t')]
    return cs.include(buses, branches)


def solve_with_fallback(case: Case, cs: ConstraintSet, mode: str = 'iterative_inclusion',
                        round_cap: int = ROUND_CAP, solver_config: SolverConfig | None = None,
                        tol: float | None = None) -> FallbackResult:
    """Solve a truncated OPF and repair it until the full problem's limits hold."""
    if mode not in FALLBACK_MODES:
        raise ValueError(f'unknown fallback mode {mode!r}')
    solver_config = solver_config or SolverConfig()
    tol = solver_config.feastol if tol is None else tol
    full = ConstraintSet.full(case)

    sol = solve_opf(case, cs, config=solver_config)
    first = sol
    if not sol.converged and mode != 'none' and not cs.issuperset(full):
        log.info('%s: truncated OPF %s; solving with every limit', case.name, sol.status.value)
        full_sol = solve_opf(case, full, config=solver_config)
        if not full_sol.converged:
            raise SolverFailure(f'{case.name}: full OPF {full_sol.status.value}', full_sol)
        return FallbackResult(full_sol, 1, full, True, (), first)
    if not sol.converged:
        raise SolverFailure(f'{case.name}: OPF {sol.status.value} after {sol.iterations} iterations', sol)
    violations = check_violations(case, sol.vars, full, tol)
    first_violations = tuple(violations)

    if mode == 'none':
        return FallbackResult(sol, 0, cs, not violations, first_violations, first)

    if mode == 'warm_start_full':
        warm = solve_opf(case, full, start=sol.vars, config=solver_config)
        if not warm.converged:
            raise SolverFailure(f'{case.name}: warm-started full OPF {warm.status.value}', warm)
        return FallbackResult(warm, 1, full, True, first_violations, first)

    rounds = 0
    while violations:
        if rounds == round_cap:
            log.warning('%s: %d limits still violated after %d inclusion rounds',
                        case.name, len(violations), rounds)
            return FallbackResult(sol, rounds, cs, False, first_violations, first)
        cs = _include_violations(cs, violations)
        rounds += 1
        sol = solve_opf(case, cs, config=solver_config)
        if not sol.converged:
            raise SolverFailure(f'{case.name}: OPF {sol.status.value} in inclusion round {rounds}', sol)
        violations = check_violations(case, sol.vars, full, tol)
    return FallbackResult(sol, rounds, cs, True, first_violations, first)


# -- evaluation -----------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioEval:
    index: int
    objective_original: float
    objective_truncated: float
    rounds: int
    feasible: bool
    first_violations: int
    iterations: int
    feval_count: int
    wall_time: float
    truncated_inequalities: int
    error: str = ''


@dataclass(frozen=True)
class EvalResult:
    case_name: str
    threshold: float
    fallback: str
    prediction: Prediction
    scenarios: tuple[ScenarioEval, ...]
    confusion: dict[str, ConfusionCounts]
    metrics: dict[str, MetricSet]
    gaps: GapReport
    timing: TimingReport | None
    timing_rows: tuple[tuple[int, SolveTiming, SolveTiming], ...]
    constraints_full: int
    constraints_truncated_mean: float
    inequalities_full: int
    inequalities_truncated_mean: float
    regression: RegressionErrors
    comparison: dict[str, dict] = field(default_factory=dict)

    def ledger_records(self) -> list[SolveRecord]:
        out = []
        for s in self.scenarios:
            out.append(SolveRecord(s.index, 'truncated', 'error' if s.error else 'converged',
                                   s.iterations, s.feval_count, s.wall_time, s.objective_truncated,
                                   0, s.rounds))
        for k, orig, trunc in self.timing_rows:
            for r, t in enumerate(orig.wall_times):
                out.append(SolveRecord(k, 'timing_full', 'converged', orig.iterations, orig.feval_count, t, None, r))
            for r, t in enumerate(trunc.wall_times):
                out.append(SolveRecord(k, 'timing_truncated', 'converged', trunc.iterations,
                                       trunc.feval_count, t, None, r))
        return out


def evaluate_scenario(case: Case, index: int, d: np.ndarray, cs: ConstraintSet, f_original: float,
                      mode: str, solver_config: SolverConfig | None) -> ScenarioEval:
    sc = apply_demand(case, DemandVector.from_stacked(d))
    res = solve_with_fallback(sc, cs, mode, solver_config=solver_config)
    n_ineq = res.constraint_set.inequality_count(case)
    return ScenarioEval(index, float(f_original), res.solution.objective, res.rounds, res.feasible,
                        len(res.first_violations), res.solution.iterations, res.solution.feval_count,
                        res.solution.wall_time, n_ineq)


def time_scenario(case: Case, d: np.ndarray, cs: ConstraintSet, repeats: int,
                  solver_config: SolverConfig | None) -> tuple[SolveTiming, SolveTiming]:
    """Repeated original and truncated solves of one scenario, serially."""
    sc = apply_demand(case, DemandVector.from_stacked(d))
    out = []
    for constraint_set in (ConstraintSet.full(case), cs):
        times, sol = [], None
        for _ in range(repeats):
            sol = solve_opf(sc, constraint_set, config=solver_config)
            times.append(sol.wall_time)
        out.append(SolveTiming(tuple(times), sol.iterations, sol.feval_count))
    return out[0], out[1]


def classifier_comparison(case: Case, test_ds: Dataset, models: TrainedModels, threshold: float) -> dict:
    pred = predict_dataset(models, case, test_ds.D, threshold)
    out = {}
    for name, p, actual in (('voltage', pred.v_active_pred, test_ds.v_labels),
                            ('branch', pred.l_active_pred, test_ds.l_labels)):
        c = accumulate_confusion(p, actual)
        out[name] = {'fn': c.fn, 'fp': c.fp, 'counts': c.to_dict()}
    return out


def evaluate(case: Case, test_ds: Dataset, models: TrainedModels | None, threshold: float = DEFAULT_THRESHOLD,
             fallback: str = 'iterative_inclusion', solver_config: SolverConfig | None = None,
             timing_scenarios: int = 50, repeats: int = 5, workers: int | None = None,
             baseline: TrainedModels | None = None, prediction: Prediction | None = None) -> EvalResult:
    """Screen every test scenario, solve the truncated OPFs and compare with the full solves.

    `prediction` overrides the models' output (oracle or degenerate predictors).
    """
    test_ds.check_case(case)
    if test_ds.kept == 0:
        raise DatasetError('empty test set')
    if prediction is None and models is None:
        raise ValueError("evaluation needs models or an explicit prediction")
    pred = prediction if prediction is not None else predict_dataset(models, case, test_ds.D, threshold)
    v_pred = np.atleast_2d(pred.v_active_pred)
    l_pred = np.atleast_2d(pred.l_active_pred)
    if v_pred.shape != test_ds.v_labels.shape or l_pred.shape != test_ds.l_labels.shape:
        raise ModelMismatchError('prediction shape does not match the test labels')
    sets = [truncated_from_labels(case, v_pred[i], l_pred[i]) for i in range(test_ds.kept)]

    jobs = {i: (case, int(test_ds.indices[i]), test_ds.D[i], sets[i], test_ds.objective[i], fallback, solver_config)
            for i in range(test_ds.kept)}
    start = time.time()
    print(f"Evaluating {test_ds.kept} test scenarios (threshold {threshold:g}, fallback {fallback})...")
    results, failed = run_batch(evaluate_scenario, jobs, workers, 'test scenarios')
    for i, err in failed.items():
        results[i] = ScenarioEval(int(test_ds.indices[i]), float(test_ds.objective[i]), float('nan'), 0, False,
                                  0, 0, 0, 0.0, sets[i].inequality_count(case), err)
    scenarios = tuple(results[i] for i in range(test_ds.kept))

    timing_rows = []
    n_timed = min(timing_scenarios, test_ds.kept)
    if n_timed and repeats:
        print(f"Timing {n_timed} scenarios x {repeats} repeats...")
        for i in range(n_timed):
            orig, trunc = time_scenario(case, test_ds.D[i], sets[i], repeats, solver_config)
            timing_rows.append((int(test_ds.indices[i]), orig, trunc))
    timing = timing_compare([(o, t) for _, o, t in timing_rows]) if timing_rows else None

    ok = [s for s in scenarios if not s.error]
    gaps = gap_report([(s.objective_truncated, s.objective_original) for s in ok], [s.rounds > 0 for s in ok])
    confusion = {'voltage': accumulate_confusion(v_pred, test_ds.v_labels),
                 'branch': accumulate_confusion(l_pred, test_ds.l_labels)}
    full_counts = constraint_counts(case, ConstraintSet.full(case))
    trunc_counts = [constraint_counts(case, cs) for cs in sets]
    comparison = {}
    if baseline is not None and models is not None:
        comparison[baseline.feature_mode] = classifier_comparison(case, test_ds, baseline, threshold)
        comparison[models.feature_mode] = classifier_comparison(case, test_ds, models, threshold)
    print(f"Done. Evaluated {len(ok)}/{len(scenarios)} scenarios in {time.time() - start:.1f}s")

    return EvalResult(
        case_name=case.name,
        threshold=threshold,
        fallback=fallback,
        prediction=pred,
        scenarios=scenarios,
        confusion=confusion,
        metrics={name: compute_metrics(c) for name, c in confusion.items()},
        gaps=gaps,
        timing=timing,
        timing_rows=tuple(timing_rows),
        constraints_full=full_counts.total,
        constraints_truncated_mean=float(np.mean([c.total for c in trunc_counts])),
        inequalities_full=full_counts.inequality,
        inequalities_truncated_mean=float(np.mean([c.inequality for c in trunc_counts])),
        regression=regression_errors(pred.g_tilde, test_ds.G) if pred.g_tilde.size else RegressionErrors(
            float('nan'), float('nan')),
        comparison=comparison,
    )


def report_text(result: EvalResult) -> str:
    rows = {name: (result.confusion[name], result.metrics[name]) for name in result.confusion}
    parts = [
        f'Case {result.case_name}: {len(result.scenarios)} test scenarios, threshold {result.threshold:g}, '
        f'fallback {result.fallback}',
        '',
        metric_table(rows),
        '',
        gap_text(result.gaps),
        f'Infeasible after fallback: {sum(not s.feasible for s in result.scenarios)}',
        constraint_text(result.constraints_full, result.inequalities_full,
                        result.constraints_truncated_mean, result.inequalities_truncated_mean),
        f'Regressor: MAE {result.regression.mae:.4g} p.u., RMSE {result.regression.rmse:.4g} p.u.',
    ]
    if result.timing is not None:
        parts += ['', timing_text(result.timing)]
    if result.comparison:
        parts += ['', 'Feature mode comparison (FN / FP):']
        for mode, per in result.comparison.items():
            parts.append(f'  {mode:>14}: voltage {per["voltage"]["fn"]} / {per["voltage"]["fp"]}, '
                         f'branch {per["branch"]["fn"]} / {per["branch"]["fp"]}')
    return '\n'.join(parts) + '\n'


def confusion_dict(result: EvalResult) -> dict:
    out = {name: metrics_to_dict(result.confusion[name], result.metrics[name]) for name in result.confusion}
    out['gap'] = {'mean_percent': result.gaps.mean, 'mean_without_fallback_percent': result.gaps.mean_without_fallback}
    if result.comparison:
        out['comparison'] = result.comparison
    return out


def write_run(run_dir: str | os.PathLike, case: Case, test_ds: Dataset, result: EvalResult,
              models: TrainedModels | None = None, manifest: dict | None = None) -> Path:
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    if models is not None:
        save_models(models, out / 'models')

    v_pred = np.atleast_2d(result.prediction.v_active_pred).astype(int)
    l_pred = np.atleast_2d(result.prediction.l_active_pred).astype(int)
    header = (['scenario'] + [f'v_{b.id}' for b in case.buses]
              + [f'l{k}_{br.f_bus}_{br.t_bus}' for k, br in enumerate(case.branches)])
    write_csv(out / 'predictions.csv', header, np.column_stack([test_ds.indices, v_pred, l_pred]), fmt='%d')

    gaps = np.array([[s.index, s.objective_original, s.objective_truncated,
                      abs(s.objective_truncated - s.objective_original) / s.objective_original * 100,
                      s.rounds, int(s.feasible), s.first_violations, s.truncated_inequalities]
                     for s in result.scenarios])
    write_csv(out / 'gaps.csv', ['scenario', 'objective_original', 'objective_truncated', 'gap_percent',
                                 'rounds', 'feasible', 'first_violations', 'truncated_inequalities'], gaps,
              fmt=['%d', '%.17g', '%.17g', '%.17g', '%d', '%d', '%d', '%d'])

    # wall times stay in the solve ledger and report.txt
    timing = np.array([[k, o.iterations, t.iterations, o.feval_count, t.feval_count]
                       for k, o, t in result.timing_rows], dtype=float).reshape(-1, 5)
    write_csv(out / 'timing.csv', ['scenario', 'iterations_original', 'iterations_truncated',
                                   'feval_original', 'feval_truncated'], timing, fmt='%d')

    (out / 'confusion.json').write_text(json.dumps(confusion_dict(result), indent=2, sort_keys=True) + '\n')
    (out / 'report.txt').write_text(report_text(result))
    run_manifest = {'case_name': case.name, 'case_hash': case_hash(case), 'test_dataset': test_ds.fingerprint(),
                    'threshold': result.threshold, 'fallback': result.fallback}
    run_manifest.update(manifest or {})
    (out / 'manifest.json').write_text(json.dumps(run_manifest, indent=2, sort_keys=True) + '\n')
    return out


# -- persistence ----------------------------------------------------------------

def save_models(models: TrainedModels, model_dir: str | os.PathLike) -> Path:
    out = Path(model_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, filename in MODEL_FILES.items():
        model = getattr(models, name)
        save_model(model, out / filename)
        curves = np.column_stack([np.arange(1, len(model.report.train_loss) + 1),
                                  model.report.train_loss, model.report.val_loss])
        write_csv(out / f'loss_{name}.csv', ['epoch', 'train_loss', 'val_loss'], curves.reshape(-1, 3),
                  fmt=['%d', '%.17g', '%.17g'])
    manifest = dict(models.manifest, case_hash=models.case_hash, feature_mode=models.feature_mode)
    (out / 'manifest.json').write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    return out


def load_models(model_dir: str | os.PathLike, case: Case | None = None) -> TrainedModels:
    src = Path(model_dir)
    if not (src / 'manifest.json').exists():
        raise ModelMismatchError(f'{src}: no model manifest')
    manifest = json.loads((src / 'manifest.json').read_text())
    loaded = {name: load_model(src / filename) for name, filename in MODEL_FILES.items()}
    models = TrainedModels(loaded['regressor'], loaded['classifier_v'], loaded['classifier_l'],
                           manifest['case_hash'], manifest['feature_mode'], manifest)
    if case is not None:
        models.check_case(case)
    return models


def solve_for_demand(case: Case, d: DemandVector, models: TrainedModels | None = None,
                     threshold: float = DEFAULT_THRESHOLD, fallback: str = 'iterative_inclusion',
                     solver_config: SolverConfig | None = None) -> tuple[OpfSolution, FallbackResult | None]:
    """Full OPF without models; predict, truncate and repair with them."""
    sc = apply_demand(case, d)
    if models is None:
        sol = solve_opf(sc, config=solver_config)
        if not sol.converged:
            raise SolverFailure(f'{case.name}: OPF {sol.status.value} after {sol.iterations} iterations', sol)
        return sol, None
    pred = predict_active(models, case, d, threshold)
    res = solve_with_fallback(sc, build_truncated(case, pred), fallback, solver_config=solver_config)
    return res.solution, res
