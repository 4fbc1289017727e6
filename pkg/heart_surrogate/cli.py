"""
`heart-surrogate` command line: data generation, training, evaluation, sensitivity analysis,
calibration and report rendering. Every run directory receives `config.json` (the resolved
settings), `timings.json` and `run.log`.

Exit codes: 0 success, 1 computation failure, 2 invalid configuration or input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Optional, Sequence

import numpy as np

from heart_surrogate import calibration, gsa, plots, refmodel
from heart_surrogate.dataset import Dataset, read_dataset, write_dataset
from heart_surrogate.errors import ConfigurationError, DatasetError, HeartSurrogateError
from heart_surrogate.lnode import (
    LnodeModel,
    load_checkpoint,
    read_trajectory_csv,
    save_checkpoint,
    write_trajectory_csv,
)
from heart_surrogate.parallel import WorkerPool, default_workers
from heart_surrogate.parameters import ParameterSpace
from heart_surrogate.sampling import NutsConfig, read_chain_csv
from heart_surrogate.training import (
    HyperConfig,
    HyperSpace,
    LossConfig,
    TrainSettings,
    evaluate,
    fold_scores,
    holdout_split,
    hyper_search,
    predict,
    train,
    write_search_table,
)
from heart_surrogate.wiring import SCOPES, Component, Registry, ScopedRegistries, ScopedResolver
from heart_surrogate.wiring import create_scoped_resolver

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


@dataclass(frozen=True)
class RunConfig:
    out: Optional[str] = None
    seed: int = 0
    # 0 means one worker per available core
    workers: int = 0
    log_level: str = 'INFO'


@dataclass(frozen=True)
class GenDataConfig(RunConfig):
    n: int = 405
    n_test: int = 0
    family: str = 'circulation'
    n_beats: int = 5
    t_hb: float = refmodel.CIRCULATION_DEFAULTS['T_HB']
    dt: float = 1e-3

    def __post_init__(self) -> None:
        if self.family not in ('circulation', 'benchmark', 'exponential'):
            raise ConfigurationError(f'Unknown dataset family {self.family!r}')


@dataclass(frozen=True)
class TrainConfig(RunConfig):
    data: Optional[str] = None
    kfold: int = 10
    # score every fold of the training split on top of the held-out fit
    cv: bool = False
    search_budget: int = 0
    layers: int = 3
    neurons: int = 13
    num_states: int = 8
    dt_ref: float = 0.0285
    iota: float = 1e-4
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.1
    eta: float = 0.1
    adam_iters: int = 1000
    bfgs_iters: int = 10000
    lr: float = 1e-2
    dt: float = 1e-3

    def __post_init__(self) -> None:
        if self.kfold < 2:
            raise ConfigurationError(f'--kfold must be at least 2, got {self.kfold}')


@dataclass(frozen=True)
class EvalConfig(RunConfig):
    model: Optional[str] = None
    data: Optional[str] = None


@dataclass(frozen=True)
class GsaConfig(RunConfig):
    model: Optional[str] = None
    n: int = 8000
    n_bootstrap: int = 1000
    plan: bool = False


@dataclass(frozen=True)
class MapConfig(RunConfig):
    model: Optional[str] = None
    problem: Optional[str] = None
    data: Optional[str] = None
    sample: Optional[str] = None
    case: str = 'T_LV'
    starts: int = 4
    max_iter: int = 500


@dataclass(frozen=True)
class HmcConfig(MapConfig):
    map: Optional[str] = None
    gp: Optional[str] = None
    iters: int = 750
    burn: int = 250
    step: float = 1e-3
    max_depth: int = 10
    no_adapt: bool = False
    chi: float = calibration.PRIOR_HALF_WIDTH


@dataclass(frozen=True)
class ReportConfig(RunConfig):
    run: Optional[str] = None


class StageTimer:
    def __init__(self) -> None:
        self.stages: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - start
            logger.info('Stage %s took %.2f s', name, self.stages[name])

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.stages, indent=2, sort_keys=True))


def resolve_config(
    cls: type[RunConfig], overrides: Mapping[str, Any], config_file: Optional[str] = None
) -> RunConfig:
    """Dataclass defaults, then the JSON file, then explicit flags."""
    known = {f.name for f in fields(cls)}
    values: dict[str, Any] = {}
    if config_file is not None:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f'Could not read --config {config_file}: {exc}') from exc
        loaded.pop('command', None)
        unknown = sorted(set(loaded) - known)
        if unknown:
            raise ConfigurationError(f'Unknown settings in {config_file}: {unknown}')
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if k in known and v is not None})
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f'Invalid settings: {exc}') from exc


def _require(config: RunConfig, name: str) -> str:
    value = getattr(config, name, None)
    if value is None:
        raise ConfigurationError(f'--{name.replace("_", "-")} is required')
    return str(value)


def _run_dir(config: RunConfig) -> Path:
    path = Path(_require(config, 'out'))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset(config: RunConfig) -> Dataset:
    return read_dataset(_require(config, 'data'))


def _model(config: RunConfig) -> LnodeModel:
    return load_checkpoint(_require(config, 'model'))


def _problem(config: RunConfig) -> calibration.CalibrationProblem:
    if getattr(config, 'problem', None) is not None:
        return calibration.load_problem(_require(config, 'problem'))
    if getattr(config, 'data', None) is None or getattr(config, 'sample', None) is None:
        raise ConfigurationError('--problem or both --data and --sample are required')
    data = _require(config, 'data')
    dataset = read_dataset(data)
    sample_id = _require(config, 'sample')
    if sample_id not in dataset.ids:
        raise ConfigurationError(f'Sample {sample_id!r} is not in {data}')
    sample = dataset.samples[dataset.ids.index(sample_id)]
    return calibration.test_case(getattr(config, 'case'), sample, dataset.space)


def build_registries(config: RunConfig, timer: StageTimer) -> ScopedRegistries[str]:
    process = Registry.of(
        Component.value('config', type(config), config),
        Component.value('timer', StageTimer, timer),
        Component.create(
            'pool',
            WorkerPool,
            {'config': RunConfig},
            lambda config: WorkerPool(config.workers),
            is_context_manager=True,
        ),
    )
    command = Registry.of(
        Component.create('run_dir', Path, {'config': RunConfig}, _run_dir),
        Component.create('dataset', Dataset, {'config': RunConfig}, _dataset),
        Component.create('model', LnodeModel, {'config': RunConfig}, _model),
        Component.create(
            'problem', calibration.CalibrationProblem, {'config': RunConfig}, _problem
        ),
    )
    return ScopedRegistries(SCOPES, {'process': process, 'command': command})


def cmd_gen_data(scope: ScopedResolver[str]) -> None:
    config = scope.resolve('config', GenDataConfig)
    out = scope.resolve('run_dir', Path)
    timer = scope.resolve('timer', StageTimer)
    with timer.stage('generate'):
        if config.family == 'exponential':
            dataset = refmodel.exponential_dataset(
                config.n, config.seed, t_hb=config.t_hb, dt=config.dt, n_test=config.n_test
            )
        else:
            space = (
                refmodel.benchmark_space()
                if config.family == 'benchmark'
                else refmodel.circulation_space()
            )
            settings = refmodel.CirculationSettings(
                t_hb=config.t_hb, n_beats=config.n_beats, dt_output=config.dt
            )
            dataset = refmodel.generate_dataset(
                space,
                config.n,
                config.seed,
                settings,
                n_test=config.n_test,
                pool=scope.resolve('pool', WorkerPool),
            )
    with timer.stage('write'):
        write_dataset(dataset, out)


def cmd_train(scope: ScopedResolver[str]) -> None:
    config = scope.resolve('config', TrainConfig)
    out = scope.resolve('run_dir', Path)
    timer = scope.resolve('timer', StageTimer)
    pool = scope.resolve('pool', WorkerPool)
    dataset = scope.resolve('dataset', Dataset)
    train_set = dataset.split('train')
    settings = TrainSettings(
        adam_iters=config.adam_iters,
        lr=config.lr,
        bfgs_iters=config.bfgs_iters,
        dt=config.dt,
        loss=LossConfig(alpha=config.alpha, beta=config.beta, gamma=config.gamma, eta=config.eta),
    )
    hyper = HyperConfig(
        layers=config.layers,
        neurons=config.neurons,
        num_states=config.num_states,
        dt_ref=config.dt_ref,
        iota=config.iota,
    )
    if config.search_budget > 0:
        with timer.stage('search'):
            hyper, table = hyper_search(
                HyperSpace(),
                config.search_budget,
                train_set,
                config.seed,
                settings,
                k=config.kfold,
                pool=pool,
            )
        write_search_table(table, out / 'search.csv')
        (out / 'hyper.json').write_text(json.dumps(asdict(hyper), indent=2, sort_keys=True))
        logger.info('Selected hyperparameters %s', hyper)
    if config.cv:
        with timer.stage('cross_validate'):
            scores = fold_scores(train_set, hyper, config.kfold, config.seed, settings, pool)
        cv = {'k': config.kfold, 'folds': scores, 'mean': float(np.mean(scores))}
        (out / 'cv_scores.json').write_text(json.dumps(cv, indent=2))
        logger.info('%d-fold CV loss %.6e', config.kfold, cv['mean'])
    fit_set, valid_set = holdout_split(train_set, config.kfold, config.seed)
    logger.info('Fitting on %d samples, validating on %d', len(fit_set), len(valid_set))
    with timer.stage('train'):
        model, report = train(
            fit_set, hyper, config.seed, settings, validation=valid_set, pool=pool
        )
    save_checkpoint(model, out / 'checkpoint.json')
    report.write(out / 'fit_report.json')
    report.write_history(out / 'history.csv')


def cmd_eval(scope: ScopedResolver[str]) -> None:
    config = scope.resolve('config', EvalConfig)
    out = scope.resolve('run_dir', Path)
    timer = scope.resolve('timer', StageTimer)
    pool = scope.resolve('pool', WorkerPool)
    model = scope.resolve('model', LnodeModel)
    dataset = scope.resolve('dataset', Dataset)
    testset = dataset.split('test')
    if not len(testset):
        logger.warning('Dataset %s has no test split; evaluating every sample', config.data)
        testset = dataset
    with timer.stage('evaluate'):
        predictions = predict(model, testset.samples, pool)
        report = evaluate(model, testset, pool)
    report.write(out / 'fit_report.json')
    (out / 'predictions').mkdir(exist_ok=True)
    for sample, traj in zip(testset.samples, predictions):
        write_trajectory_csv(traj, out / 'predictions' / f'{sample.sample_id}.csv')


def cmd_gsa(scope: ScopedResolver[str]) -> None:
    config = scope.resolve('config', GsaConfig)
    out = scope.resolve('run_dir', Path)
    timer = scope.resolve('timer', StageTimer)
    model = scope.resolve('model', LnodeModel)
    space = model.parameter_space
    with timer.stage('design'):
        design = gsa.saltelli_sample(space, config.n, config.seed)
    logger.info('Saltelli design: %d evaluations', design.n_evals)
    with timer.stage('evaluate'):
        evals = gsa.evaluate_design(model, design, pool=scope.resolve('pool', WorkerPool))
    with timer.stage('indices'):
        result = gsa.sobol_indices(
            design, evals, n_bootstrap=config.n_bootstrap, seed=config.seed, labels=gsa.QOI_LABELS
        )
    result.write_csv(out)
    (out / 'parameters.json').write_text(json.dumps(space.to_json(), indent=2))


def _map_result(
    config: MapConfig,
    prob: calibration.CalibrationProblem,
    model: LnodeModel,
    pool: WorkerPool,
) -> calibration.MapResult:
    theta_init = 0.5 * (prob.free_space.lower + prob.free_space.upper)
    return calibration.map_estimate(
        prob,
        theta_init,
        model,
        n_starts=config.starts,
        max_iter=config.max_iter,
        seed=config.seed,
        pool=pool,
    )


def cmd_map(scope: ScopedResolver[str]) -> None:
    config = scope.resolve('config', MapConfig)
    out = scope.resolve('run_dir', Path)
    timer = scope.resolve('timer', StageTimer)
    prob = scope.resolve('problem', calibration.CalibrationProblem)
    model = scope.resolve('model', LnodeModel)
    calibration.write_problem(prob, out / 'problem.json')
    with timer.stage('map'):
        result = _map_result(config, prob, model, scope.resolve('pool', WorkerPool))
    result.write(out / 'map.json')


def _read_map(path: str, space: ParameterSpace) -> np.ndarray:
    try:
        data = json.loads(Path(path).read_text())
        return space.vector(data['theta'])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DatasetError(f'Could not read MAP estimate {path}: {exc}') from exc


def _gp_model(
    config: HmcConfig, prob: calibration.CalibrationProblem, model: LnodeModel, pool: WorkerPool
) -> calibration.GpErrorModel:
    if config.gp is not None:
        try:
            return calibration.GpErrorModel.from_json(json.loads(Path(config.gp).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DatasetError(f'Could not read GP error model {config.gp}: {exc}') from exc
    if config.data is None:
        raise ConfigurationError('--gp or --data (for surrogate residuals) is required')
    dataset = read_dataset(config.data)
    testset = dataset.split('test') if len(dataset.split('test')) else dataset
    predictions = predict(model, testset.samples, pool)
    residuals, times = calibration.residual_traces(predictions, testset.samples, prob.observed)
    return calibration.fit_gp_error(residuals, times)


def cmd_hmc(scope: ScopedResolver[str]) -> None:
    config = scope.resolve('config', HmcConfig)
    out = scope.resolve('run_dir', Path)
    timer = scope.resolve('timer', StageTimer)
    pool = scope.resolve('pool', WorkerPool)
    prob = scope.resolve('problem', calibration.CalibrationProblem)
    model = scope.resolve('model', LnodeModel)
    calibration.write_problem(prob, out / 'problem.json')
    if config.map is not None:
        theta_map = _read_map(config.map, prob.free_space)
    else:
        with timer.stage('map'):
            result = _map_result(config, prob, model, pool)
        result.write(out / 'map.json')
        theta_map = result.theta
    with timer.stage('gp'):
        gp = _gp_model(config, prob, model, pool)
    (out / 'gp.json').write_text(json.dumps(gp.to_json(), indent=2, sort_keys=True))
    nuts = NutsConfig(
        iters=config.iters,
        burn_in=config.burn,
        step_size=config.step,
        max_tree_depth=config.max_depth,
        adapt_step=not config.no_adapt,
    )
    with timer.stage('hmc'):
        chain = calibration.run_hmc(prob, gp, theta_map, model, nuts, config.seed, config.chi)
    chain.write_csv(out / 'chain.csv')
    chain.write_summary(out / 'summary.json', prob.truth)


def _posterior_table(run: Path) -> Path:
    summary = json.loads((run / 'summary.json').read_text())
    names, draws = read_chain_csv(run / 'chain.csv')
    truth = summary.get('truth')
    plots.corner_plot(
        names, draws, run / 'corner.png', None if truth is None else np.array(truth)
    )
    path = run / 'posterior_table.csv'
    with path.open('w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['parameter', 'truth', 'mean', 'lower_2sigma', 'upper_2sigma', 'captured'])
        for i, name in enumerate(names):
            lo, hi = summary['lower_2sigma'][i], summary['upper_2sigma'][i]
            value = None if truth is None else truth[i]
            captured = '' if value is None else int(lo <= value <= hi)
            writer.writerow([name, value, summary['mean'][i], lo, hi, captured])
    return path


def _prediction_plots(run: Path, max_samples: int = 4) -> None:
    try:
        data = json.loads((run / 'config.json').read_text())['data']
        dataset = read_dataset(data)
    except (OSError, KeyError, json.JSONDecodeError, TypeError) as exc:
        raise DatasetError(f'Run {run} does not record its evaluation dataset: {exc}') from exc
    by_id = dict(zip(dataset.ids, dataset.samples))
    files = sorted((run / 'predictions').glob('*.csv'))[:max_samples]
    preds, targets = [], []
    for path in files:
        sample = by_id.get(path.stem)
        if sample is None:
            raise DatasetError(f'Prediction {path.name} has no matching sample in {data}')
        preds.append(read_trajectory_csv(path, sample.av_delay))
        targets.append(sample.trajectory)
    plots.trace_plot(preds, targets, run / 'traces.png')
    plots.pv_loops(preds, targets, run / 'pv_loops.png')


def cmd_report(scope: ScopedResolver[str]) -> None:
    config = scope.resolve('config', ReportConfig)
    run = Path(_require(config, 'run'))
    if not run.is_dir():
        raise ConfigurationError(f'--run {run} is not a directory')
    rendered = 0
    if (run / 's1.csv').exists() and (run / 'st.csv').exists():
        result = gsa.SobolResult.read_csv(run)
        groups = None
        if (run / 'parameters.json').exists():
            space = ParameterSpace.from_json(json.loads((run / 'parameters.json').read_text()))
            groups = [e.group for e in space.entries]
        plots.sobol_heatmap(result, run / 's1.png', 's1', groups)
        plots.sobol_heatmap(result, run / 'st.png', 'st', groups)
        rendered += 1
    if (run / 'chain.csv').exists() and (run / 'summary.json').exists():
        _posterior_table(run)
        rendered += 1
    if (run / 'predictions').is_dir():
        _prediction_plots(run)
        rendered += 1
    if not rendered:
        raise ConfigurationError(f'Nothing to report in {run}')


COMMANDS: dict[str, tuple[type[RunConfig], Callable[[ScopedResolver[str]], None], str]] = {
    'gen-data': (GenDataConfig, cmd_gen_data, 'simulate a training dataset'),
    'train': (TrainConfig, cmd_train, 'fit the latent neural ODE surrogate'),
    'eval': (EvalConfig, cmd_eval, 'score a checkpoint on the test split'),
    'gsa': (GsaConfig, cmd_gsa, 'Sobol sensitivity indices of the surrogate'),
    'map': (MapConfig, cmd_map, 'maximum a posteriori calibration'),
    'hmc': (HmcConfig, cmd_hmc, 'posterior sampling with NUTS'),
    'report': (ReportConfig, cmd_report, 'render plots and tables of a run directory'),
}

_HELP = {
    'n': 'number of samples (gen-data) or Saltelli base size (gsa)',
    'case': f'calibration test case, one of {list(calibration.TEST_CASES)}',
    'family': 'circulation | benchmark | exponential',
    'plan': 'print the evaluation count and exit',
    'kfold': 'number of folds; one fold of the training split validates the final fit',
    'cv': 'also train every fold and write cv_scores.json',
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='heart-surrogate', description=__doc__.split('\n')[1])
    sub = parser.add_subparsers(dest='command', required=True)
    for name, (cls, _, help_text) in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument('--config', help='JSON file with settings; flags take precedence')
        for f in fields(cls):
            flag = f'--{f.name.replace("_", "-")}'
            if f.type in ('bool', bool):
                cmd.add_argument(
                    flag, dest=f.name, action='store_true', default=None, help=_HELP.get(f.name)
                )
                continue
            kind = {'int': int, 'float': float}.get(str(f.type), str)
            cmd.add_argument(flag, dest=f.name, type=kind, default=None, help=_HELP.get(f.name))
    return parser


@contextmanager
def _logging(level: str) -> Iterator[Callable[[Path], None]]:
    root = logging.getLogger()
    added: list[logging.Handler] = []
    previous = root.level

    def attach(path: Path) -> None:
        handler = logging.FileHandler(path)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
        added.append(handler)

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(console)
    added.append(console)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
    try:
        yield attach
    finally:
        for handler in added:
            root.removeHandler(handler)
            handler.close()
        root.setLevel(previous)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    cls, handler, _ = COMMANDS[args.command]
    overrides = {k: v for k, v in vars(args).items() if k not in ('command', 'config')}
    level = overrides.get('log_level') or 'INFO'
    with _logging(level) as attach_log:
        try:
            config = resolve_config(cls, overrides, args.config)
            logging.getLogger().setLevel(getattr(logging, config.log_level.upper(), logging.INFO))
            # a report rendered into the run it reads keeps that run's own snapshots
            prefix = ''
            if isinstance(config, ReportConfig) and config.out in (None, config.run):
                config = replace(config, out=config.run)
                prefix = 'report_'
            if isinstance(config, GsaConfig) and config.plan:
                space = load_checkpoint(_require(config, 'model')).parameter_space
                print(gsa.plan_size(config.n, space.dim))
                return EXIT_OK
            if config.workers < 1:
                config = replace(config, workers=default_workers())
            out = _run_dir(config)
            attach_log(out / 'run.log')
            snapshot = {'command': args.command, **asdict(config)}
            snapshot_json = json.dumps(snapshot, indent=2, sort_keys=True)
            (out / f'{prefix}config.json').write_text(snapshot_json)
            timer = StageTimer()
            with create_scoped_resolver(build_registries(config, timer)) as root:
                with root.next_scope('command') as scope:
                    handler(scope)
            timer.write(out / f'{prefix}timings.json')
        except (ConfigurationError, DatasetError) as exc:
            logger.error('%s', exc)
            return EXIT_CONFIG
        except (HeartSurrogateError, ArithmeticError) as exc:
            logger.error('%s failed: %s', args.command, exc)
            logger.debug('Traceback', exc_info=True)
            return EXIT_FAILURE
        except OSError as exc:
            # unreadable inputs and unwritable run directories
            logger.error('%s', exc)
            return EXIT_CONFIG
        except Exception as exc:
            logger.exception('%s failed: %s', args.command, exc)
            return EXIT_FAILURE
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == '__main__':
    main()
