"""Command-line entry point: gen-data, train, eval, solve, report, fetch-case, load-range."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from case_io import Case, case_hash, load_case
from fetch_case import DATA_DIR, fetch_cases
from learner import TrainConfig, TrainingError, depth_sweep
from metrics import ConfusionCounts, compute_metrics, metric_table
from opf_solver import SolverConfig, SolverFailure, label_activity, solution_to_dict
from pipeline import (DEFAULT_THRESHOLD, FALLBACK_MODES, FEATURE_MODES, Prediction, evaluate, load_models,
                      save_models, solve_for_demand, train_all, write_run)
from scenario import Dataset, DatasetError, DemandVector, ScenarioConfig, build_dataset, find_load_range, read_csv, write_csv
import solve_log

__version__ = '1.0.0'

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER, EXIT_TRAINING = 0, 1, 2, 3, 4
DATASETS = ('dataset1', 'dataset2', 'test')
PREDICTORS = ('models', 'oracle', 'all_active', 'all_inactive')


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


@dataclass(frozen=True)
class RunConfig:
    case: str | None = None
    out: str = 'runs'
    seed: int = 0
    workers: int | None = None
    range_lo: float = 0.70
    range_hi: float = 1.30
    counts: tuple[int, int, int] = (2000, 2000, 882)
    correlation_mode: str = 'independent_per_bus'
    hidden_layers: int = 1
    hidden_width: int = 256
    epochs: int = 1000
    batch_size: int = 100
    validation_split: float = 0.20
    feature_mode: str = 'net_injection'
    threshold: float = DEFAULT_THRESHOLD
    fallback: str = 'iterative_inclusion'
    feastol: float = 1e-6
    max_iter: int = 150
    repeats: int = 5
    timing_scenarios: int = 50
    ledger: str = solve_log.LEDGER_PATH

    def validate(self, need_case: bool = True) -> None:
        if need_case:
            if not self.case:
                raise UsageError('--case is required')
            if not Path(self.case).exists():
                raise FileNotFoundError(f'case file not found: {self.case}')
        if self.feature_mode not in FEATURE_MODES:
            raise UsageError(f'unknown feature mode {self.feature_mode!r}')
        if self.fallback not in FALLBACK_MODES:
            raise UsageError(f'unknown fallback mode {self.fallback!r}')
        if not 0 <= self.threshold <= 1:
            raise UsageError(f'threshold must be in [0, 1], got {self.threshold}')
        if len(self.counts) != 3 or min(self.counts) <= 0:
            raise UsageError(f'counts must be three positive integers, got {self.counts}')

    def scenario_config(self, which: str) -> ScenarioConfig:
        k = DATASETS.index(which)
        return ScenarioConfig(self.range_lo, self.range_hi, self.counts[k], self.seed,
                              self.correlation_mode, stream=k + 1)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(feastol=self.feastol, gradtol=self.feastol, comptol=self.feastol,
                            costtol=self.feastol, max_iter=self.max_iter)

    def train_config(self, task: str, hidden_layers: int | None = None) -> TrainConfig:
        return TrainConfig(task=task, hidden_layers=self.hidden_layers if hidden_layers is None else hidden_layers,
                           hidden_width=self.hidden_width, epochs=self.epochs, batch_size=self.batch_size,
                           validation_split=self.validation_split, seed=self.seed)

    def echo(self) -> dict:
        return dict(asdict(self), version=__version__)


def load_config_file(path: str) -> dict:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise UsageError(f'{path}: config must be a JSON object')
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f'{path}: unknown config keys {", ".join(unknown)}')
    if 'counts' in data:
        data['counts'] = tuple(int(c) for c in data['counts'])
    return data


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated integers, got {text!r}') from None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the --config file, then flags given on the command line."""
    values = {}
    if getattr(args, 'config', None):
        values.update(load_config_file(args.config))
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    if isinstance(values.get('hidden_layers'), tuple):
        values['hidden_layers'] = values['hidden_layers'][0]
    return RunConfig(**values)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n')


# -- commands -------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    cfg.validate()
    case = load_case(cfg.case)
    out = Path(cfg.out)
    print(f"Case {case.name}: {case.summary()}")
    conn = solve_log.connect(cfg.ledger)
    try:
        run_id = solve_log.start_run(conn, 'gen-data', case.name, case_hash(case))
        for which in DATASETS:
            ds = build_dataset(case, cfg.scenario_config(which), cfg.solver_config(), cfg.workers, label=which)
            ds.save(out / which, case)
            solve_log.record_solves(conn, run_id, (
                solve_log.SolveRecord(int(k), which, 'converged', int(it), int(fe), float(t), float(obj))
                for k, it, fe, t, obj in zip(ds.indices, ds.iterations, ds.feval_count, ds.wall_time, ds.objective)))
    finally:
        conn.close()
    _write_json(out / 'run.json', cfg.echo())
    return EXIT_OK


def cmd_train(cfg: RunConfig, data_dir: str, sweep: tuple[int, ...] = ()) -> int:
    cfg.validate()
    case = load_case(cfg.case)
    data = Path(data_dir)
    ds1, ds2 = Dataset.load(data / 'dataset1'), Dataset.load(data / 'dataset2')
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if len(sweep) > 1:
        rmse = depth_sweep(ds1.D, ds1.G, sweep, cfg.train_config('regression'))
        write_csv(out / 'depth_sweep.csv', ['hidden_layers', 'val_rmse'],
                  np.array([[d, r] for d, r in rmse.items()]), fmt=['%d', '%.17g'])
    models = train_all(case, ds1, ds2, cfg.train_config('regression'), cfg.train_config('classification'),
                       cfg.feature_mode)
    models = replace(models, manifest=dict(models.manifest, run=cfg.echo()))
    save_models(models, out)
    print(f"Saved models to {out}")
    return EXIT_OK


def _override_prediction(predictor: str, test: Dataset) -> Prediction | None:
    if predictor == 'models':
        return None
    if predictor == 'oracle':
        v, l = test.v_labels.astype(float), test.l_labels.astype(float)
    elif predictor == 'all_active':
        v, l = np.ones(test.v_labels.shape), np.ones(test.l_labels.shape)
    else:
        v, l = np.zeros(test.v_labels.shape), np.zeros(test.l_labels.shape)
    return Prediction(np.zeros((test.kept, 0)), np.zeros((test.kept, 0)), v, l, 0.5)


def cmd_eval(cfg: RunConfig, models_dir: str | None, test_dir: str, predictor: str = 'models',
             baseline_dir: str | None = None) -> int:
    cfg.validate()
    case = load_case(cfg.case)
    test = Dataset.load(test_dir)
    if predictor == 'models' and not models_dir:
        raise UsageError('--models is required unless --predictor overrides it')
    models = load_models(models_dir, case) if models_dir else None
    baseline = load_models(baseline_dir, case) if baseline_dir else None
    result = evaluate(case, test, models, cfg.threshold, cfg.fallback, cfg.solver_config(),
                      cfg.timing_scenarios, cfg.repeats, cfg.workers, baseline,
                      _override_prediction(predictor, test))
    out = write_run(cfg.out, case, test, result, models, {'run': cfg.echo(), 'predictor': predictor})
    conn = solve_log.connect(cfg.ledger)
    try:
        run_id = solve_log.start_run(conn, 'eval', case.name, case_hash(case))
        solve_log.record_solves(conn, run_id, result.ledger_records())
    finally:
        conn.close()
    print((out / 'report.txt').read_text(), end='')
    return EXIT_OK


def _load_demand(case: Case, path: str | None, row: int) -> DemandVector:
    if path is None:
        return DemandVector.base(case)
    p = Path(path)
    if p.suffix == '.json':
        data = json.loads(p.read_text())
        if not isinstance(data, dict) or not {'pd', 'qd'} <= data.keys():
            raise DatasetError(f'{p}: demand file needs "pd" and "qd" lists')
        try:
            pd, qd = (np.asarray(data[k], dtype=float) for k in ('pd', 'qd'))
        except (TypeError, ValueError):
            raise DatasetError(f'{p}: "pd" and "qd" must be lists of numbers') from None
        if pd.ndim != 1 or pd.shape != qd.shape:
            raise DatasetError(f'{p}: "pd" and "qd" must be flat lists of equal length')
        return DemandVector(pd, qd)
    rows = np.atleast_2d(read_csv(p))
    if not 0 <= row < len(rows):
        raise DatasetError(f'{p}: row {row} out of range (file has {len(rows)} rows)')
    return DemandVector.from_stacked(rows[row])


def cmd_solve(cfg: RunConfig, demand: str | None = None, models_dir: str | None = None, row: int = 0,
              out_file: str | None = None) -> int:
    cfg.validate()
    case = load_case(cfg.case)
    d = _load_demand(case, demand, row)
    models = load_models(models_dir, case) if models_dir else None
    sol, res = solve_for_demand(case, d, models, cfg.threshold, cfg.fallback, cfg.solver_config())
    payload = solution_to_dict(sol, case, label_activity(sol, case) if sol.converged else None)
    if res is not None:
        payload['fallback'] = {'mode': cfg.fallback, 'rounds': res.rounds, 'feasible': res.feasible,
                               'first_violations': len(res.first_violations)}
    text = json.dumps(payload, indent=2) + '\n'
    if out_file:
        Path(out_file).write_text(text)
        print(f"Wrote {out_file}")
    else:
        sys.stdout.write(text)
    if res is not None and res.flagged:
        return EXIT_SOLVER
    return EXIT_OK


def cmd_report(run_dir: str | None = None, counts: tuple[int, ...] | None = None) -> int:
    if counts:
        if len(counts) != 4:
            raise UsageError('--counts takes tp,tn,fp,fn')
        c = ConfusionCounts(*counts)
        print(metric_table({'counts': (c, compute_metrics(c))}))
        return EXIT_OK
    if not run_dir:
        raise UsageError('report needs --run or --counts')
    report = Path(run_dir) / 'report.txt'
    if not report.exists():
        raise FileNotFoundError(f'no report.txt in {run_dir}')
    print(report.read_text(), end='')
    return EXIT_OK


def cmd_fetch_case(names: list[str], dest: str, force: bool = False) -> int:
    fetched = fetch_cases(names, dest, force)
    return EXIT_OK if len(fetched) == len(names) else EXIT_DATA


def cmd_load_range(cfg: RunConfig, step: float, limit: float) -> int:
    cfg.validate()
    case = load_case(cfg.case)
    lo, hi = find_load_range(case, step, limit, cfg.solver_config())
    print(f"{case.name}: OPF converges from {lo:.0%} to {hi:.0%} of base load")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='acopf-screen', description=__doc__)
    parser.add_argument('--version', action='version', version=__version__)
    parser.add_argument('-v', '--verbose', action='count', default=0)
    sub = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    def common(p, out_help: str):
        p.add_argument('--case')
        p.add_argument('--config')
        p.add_argument('--seed', type=int)
        p.add_argument('--out', help=out_help)
        p.add_argument('--workers', type=int)
        p.add_argument('--ledger')
        p.add_argument('--feastol', type=float)
        p.add_argument('--max-iter', dest='max_iter', type=int)

    p = sub.add_parser('gen-data', help='generate dataset1, dataset2 and test')
    common(p, 'directory receiving the three datasets')
    p.add_argument('--counts', type=_int_list, help='dataset1,dataset2,test scenario counts')
    p.add_argument('--range-lo', dest='range_lo', type=float)
    p.add_argument('--range-hi', dest='range_hi', type=float)
    p.add_argument('--correlation-mode', dest='correlation_mode', choices=('independent_per_bus', 'systemwide'))

    p = sub.add_parser('train', help='train the regressor and both classifiers')
    common(p, 'model directory')
    p.add_argument('--data', required=True, help='directory holding dataset1/ and dataset2/')
    p.add_argument('--hidden-layers', dest='hidden_layers', type=_int_list,
                   help='hidden layer count; a list such as 1,2,3 also runs a depth sweep')
    p.add_argument('--hidden-width', dest='hidden_width', type=int)
    p.add_argument('--epochs', type=int)
    p.add_argument('--batch-size', dest='batch_size', type=int)
    p.add_argument('--feature-mode', dest='feature_mode', choices=FEATURE_MODES)

    p = sub.add_parser('eval', help='screen, truncate and solve the test scenarios')
    common(p, 'run directory')
    p.add_argument('--models')
    p.add_argument('--data', required=True, help='test dataset directory')
    p.add_argument('--baseline', help='second model directory for the feature-mode comparison')
    p.add_argument('--predictor', choices=PREDICTORS, default='models')
    p.add_argument('--threshold', type=float)
    p.add_argument('--fallback', choices=FALLBACK_MODES)
    p.add_argument('--repeats', type=int)
    p.add_argument('--timing-scenarios', dest='timing_scenarios', type=int)

    p = sub.add_parser('solve', help='solve one demand vector')
    common(p, 'solution JSON file (stdout when omitted)')
    p.add_argument('--demand', help='JSON {"pd": [...], "qd": [...]} or a D.csv file')
    p.add_argument('--row', type=int, default=0)
    p.add_argument('--models')
    p.add_argument('--threshold', type=float)
    p.add_argument('--fallback', choices=FALLBACK_MODES)

    p = sub.add_parser('report', help='print a run report or metrics for raw counts')
    p.add_argument('--run')
    p.add_argument('--counts', type=_int_list, help='tp,tn,fp,fn')

    p = sub.add_parser('fetch-case', help='download PGLib-OPF cases')
    p.add_argument('names', nargs='+')
    p.add_argument('--dest', default=DATA_DIR)
    p.add_argument('--force', action='store_true', help='download even if the file exists')

    p = sub.add_parser('load-range', help='find the feasible uniform load scaling band')
    common(p, 'unused')
    p.add_argument('--step', type=float, default=0.05)
    p.add_argument('--limit', type=float, default=3.0)
    return parser


def dispatch(args: argparse.Namespace) -> int:
    if args.command == 'report':
        return cmd_report(args.run, args.counts)
    if args.command == 'fetch-case':
        return cmd_fetch_case(args.names, args.dest, args.force)
    sweep = ()
    if args.command == 'train' and args.hidden_layers:
        sweep = args.hidden_layers
    cfg = resolve_config(args)
    if args.command == 'gen-data':
        return cmd_gen_data(cfg)
    if args.command == 'train':
        return cmd_train(cfg, args.data, sweep)
    if args.command == 'eval':
        return cmd_eval(cfg, args.models, args.data, args.predictor, args.baseline)
    if args.command == 'solve':
        return cmd_solve(cfg, args.demand, args.models, args.row, args.out)
    if args.command == 'load-range':
        return cmd_load_range(cfg, args.step, args.limit)
    raise UsageError(f'unknown command {args.command!r}')


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logging.captureWarnings(True)
    warnings.simplefilter('default')
    try:
        return dispatch(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as e:
        print(f"training failed: {e} (after {len(e.history)} epochs)", file=sys.stderr)
        return EXIT_TRAINING
    except SolverFailure as e:
        print(f"solver failed: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == '__main__':
    sys.exit(main())
