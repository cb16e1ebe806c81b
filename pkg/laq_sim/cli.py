#!/usr/bin/env python3
"""
LAQ simulator command line.
Subcommands: `run` trains one or more configurations and writes telemetry,
`verify` runs property suites, `dataset` checks or fetches cached datasets.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from laq_sim import __version__
from laq_sim.constants import (
    CSV_EXTENSION, SUMMARY_FILENAME, DATASETS, SYNTHETIC_DATASETS, Algorithm, ModelKind,
    PartitionMode, VerifyTarget, ExitCode, Messages, Errors
)
from laq_sim.data import (
    check_dataset, fetch_dataset, load_named_dataset, synthetic_quadratic
)
from laq_sim.engine import (
    Problem, RunConfig, problem_from_dataset, quadratic_problem, reference_optimum, run,
    validate_recipe
)
from laq_sim.exceptions import ConfigError, DataError, DivergenceError, LAQError
from laq_sim.losses import LogisticModel, smoothness_constant
from laq_sim.metrics import TelemetryLog, export_csv, format_summary
from laq_sim.settings import PRESET_NAMES, ExperimentFile, Settings
from laq_sim.verification import run_suite

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# flag dest -> experiment key
FLAG_KEYS: Dict[str, str] = {
    "model": "model", "dataset": "dataset", "workers": "workers", "bits": "bits",
    "alpha": "alpha", "bigD": "bigD", "xi": "xi", "max_staleness": "max_staleness",
    "iters": "iters", "target_residual": "target_residual", "minibatch": "minibatch",
    "seed": "seed", "p": "p", "mu": "mu", "smoothness": "smoothness", "lam": "lambda",
    "partition": "partition", "samples": "samples", "check_descent": "check_descent",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="laq-sim",
        description="Simulate lazily aggregated quantized gradient descent",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--settings", default=None, help="Path to a JSON settings file")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    verbosity.add_argument("--quiet", action="store_true", help="Log warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="Run experiments and write telemetry")
    source = run_parser.add_mutually_exclusive_group()
    source.add_argument("--experiment", help="INI experiment file")
    source.add_argument("--preset", choices=PRESET_NAMES, help="Built-in experiment")
    run_parser.add_argument("--algorithm", nargs="+", choices=[a.value for a in Algorithm],
                            help="Algorithms to run (overrides the experiment's list)")
    run_parser.add_argument("--model", choices=[m.value for m in ModelKind])
    run_parser.add_argument("--dataset", choices=sorted(set(DATASETS) | set(SYNTHETIC_DATASETS)))
    run_parser.add_argument("--workers", type=int, help="Number of workers M")
    run_parser.add_argument("--bits", type=int, help="Bits per coordinate b")
    run_parser.add_argument("--alpha", type=float, help="Stepsize")
    run_parser.add_argument("--bigD", type=int, help="History depth D")
    run_parser.add_argument("--xi", help="`recipe`, `experiment`, one weight or D weights")
    run_parser.add_argument("--max-staleness", dest="max_staleness", type=int,
                            help="Staleness bound t-bar")
    run_parser.add_argument("--iters", type=int, help="Maximum iterations K")
    run_parser.add_argument("--target-residual", dest="target_residual", type=float,
                            help="Stop once the loss residual reaches this value")
    run_parser.add_argument("--minibatch", type=int, help="Minibatch size for sgd/slaq")
    run_parser.add_argument("--seed", type=int)
    run_parser.add_argument("--p", type=int, help="Dimension of the synthetic quadratic")
    run_parser.add_argument("--mu", type=float, help="Strong convexity of the synthetic quadratic")
    run_parser.add_argument("--smoothness", help="Per-worker L_m of the synthetic quadratic")
    run_parser.add_argument("--lambda", dest="lam", type=float, help="L2 regularization")
    run_parser.add_argument("--partition", choices=[m.value for m in PartitionMode])
    run_parser.add_argument("--samples", type=int, help="Samples of the synthetic logistic task")
    run_parser.add_argument("--check-descent", dest="check_descent", action="store_true",
                            default=None, help="Count violations of the per-step descent bound")
    run_parser.add_argument("--out", help="Output directory")
    run_parser.add_argument("--cache-dir", dest="cache_dir", help="Dataset cache directory")

    verify_parser = commands.add_parser("verify", help="Run property suites")
    verify_parser.add_argument("targets", nargs="+", choices=[t.value for t in VerifyTarget])

    dataset_parser = commands.add_parser("dataset", help="Check or fetch a dataset")
    dataset_parser.add_argument("action", choices=["check", "fetch"])
    dataset_parser.add_argument("name", choices=sorted(DATASETS))
    dataset_parser.add_argument("--cache-dir", dest="cache_dir", help="Dataset cache directory")
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False, default_level: str = "INFO") -> None:
    """--verbose and --quiet win over the settings file's log_level"""
    named = logging.getLevelName(str(default_level).upper())
    level = named if isinstance(named, int) else logging.INFO
    if verbose:
        level = logging.DEBUG
    elif quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    if not isinstance(named, int):
        logger.warning("Unknown log_level %r in settings; using INFO", default_level)


def run_names(config: RunConfig, tag_bits: bool = False) -> Tuple[str, str]:
    """File stem and summary label of one run"""
    name = config.algorithm.value
    if tag_bits:
        return f"{name}_b{config.bits}_seed{config.seed}", f"{name} b={config.bits} (seed {config.seed})"
    return f"{name}_seed{config.seed}", f"{name} (seed {config.seed})"


class SimulatorApp:
    """Command dispatcher"""

    def __init__(self, settings: Settings):
        self.settings = settings
        self._problems: Dict[Tuple, Problem] = {}

    def dispatch(self, args: argparse.Namespace) -> int:
        if args.command == "run":
            return self.cmd_run(args)
        if args.command == "verify":
            return self.cmd_verify([VerifyTarget(t) for t in args.targets])
        return self.cmd_dataset(args.action, args.name, args.cache_dir)

    def experiment(self, args: argparse.Namespace) -> ExperimentFile:
        if args.experiment:
            return ExperimentFile.load(args.experiment)
        if args.preset:
            return ExperimentFile.from_preset(args.preset)
        return ExperimentFile.from_dict({"experiment": {}}, "command line")

    def cmd_run(self, args: argparse.Namespace) -> int:
        experiment = self.experiment(args)
        overrides = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items()}
        algorithms = [Algorithm(a) for a in args.algorithm] if args.algorithm else None
        configs = experiment.run_configs(overrides, algorithms)
        out_dir = Path(args.out or experiment.output_dir or self.settings.get("output_dir"))
        cache_dir = self.settings.cache_dir(args.cache_dir)

        tag_bits = bool(experiment.bits_sweep()) and args.bits is None
        finished: List[Tuple[str, TelemetryLog]] = []
        for config in configs:
            stem, label = run_names(config, tag_bits and config.algorithm.quantized)
            problem = self.problem_for(config, cache_dir)
            if config.algorithm.lazy and problem.smoothness is not None:
                validate_recipe(config, problem.smoothness)
            _, log = run(config, problem)
            path = out_dir / f"{stem}{CSV_EXTENSION}"
            export_csv(log, path)
            logger.info("Telemetry written to %s", path)
            finished.append((label, log))

        summary = format_summary(finished)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / SUMMARY_FILENAME).write_text(summary, encoding="utf-8")
        print(summary, end="")
        return ExitCode.SUCCESS

    def problem_for(self, config: RunConfig, cache_dir: Path) -> Problem:
        """Build (or reuse) the problem a configuration runs on"""
        problem = self._shared_problem(replace(config, smoothness=None), cache_dir)
        if config.smoothness is not None:
            problem = replace(problem, smoothness=config.smoothness)
        return problem

    def _shared_problem(self, config: RunConfig, cache_dir: Path) -> Problem:
        key = (config.model, config.dataset, config.seed, config.num_workers, config.partition,
               config.dimension, config.mu, config.worker_smoothness, config.samples,
               config.lam, config.hidden, config.target_residual is not None, config.check_descent)
        if key in self._problems:
            return self._problems[key]

        if config.model == ModelKind.QUADRATIC:
            if config.dataset != "synthetic-quadratic":
                raise ConfigError(Errors.INVALID_VALUE.value.format(key="dataset", value=config.dataset))
            smoothness = config.worker_smoothness or (2.0 * config.mu,) * config.num_workers
            synthetic = synthetic_quadratic(config.dimension, config.num_workers, smoothness,
                                            config.mu, config.seed)
            problem = quadratic_problem(config, synthetic)
        else:
            if config.dataset == "synthetic-quadratic":
                raise ConfigError(Errors.INVALID_VALUE.value.format(key="model", value=config.model.value))
            try:
                train, test = load_named_dataset(config.dataset, cache_dir, config.seed, config.samples)
            except DataError as e:
                if config.dataset in DATASETS:
                    raise DataError(f"{e}. " + Messages.FETCH_HINT.value.format(
                        name=config.dataset, cache_dir=cache_dir)) from e
                raise
            problem = problem_from_dataset(config, train, test)
            if isinstance(problem.model, LogisticModel):
                if problem.smoothness is None:
                    problem = replace(problem, smoothness=sum(
                        smoothness_constant(problem.model, s) for s in problem.shards))
                if config.target_residual is not None:
                    optimum = reference_optimum(
                        problem, int(self.settings.get("reference_iterations")),
                        cache_dir=cache_dir, key=f"{config.dataset}:lam={config.lam!r}:seed={config.seed}")
                    problem = problem.with_optimal_loss(optimum)
        self._problems[key] = problem
        return problem

    def cmd_verify(self, targets: Sequence[VerifyTarget]) -> int:
        passed = True
        for target in targets:
            for result in run_suite(target):
                print(result.line())
                passed &= result.passed
        return ExitCode.SUCCESS if passed else ExitCode.FAILURE

    def cmd_dataset(self, action: str, name: str, cache_flag: Optional[str]) -> int:
        cache_dir = self.settings.cache_dir(cache_flag)
        if action == "fetch":
            for path in fetch_dataset(name, cache_dir):
                print(Messages.DATASET_OK.value.format(name=name, path=path))
            return ExitCode.SUCCESS
        problems = check_dataset(name, cache_dir)
        for problem in problems:
            print(f"{name}: {problem}")
        if problems:
            print(Messages.FETCH_HINT.value.format(name=name, cache_dir=cache_dir))
            return ExitCode.DATA_ERROR
        print(Messages.DATASET_OK.value.format(name=name, path=cache_dir / name))
        return ExitCode.SUCCESS


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    settings = Settings(args.settings) if args.settings else Settings()
    configure_logging(args.verbose, args.quiet, settings.get("log_level", "INFO"))
    try:
        return int(SimulatorApp(settings).dispatch(args))
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return ExitCode.CONFIG_ERROR
    except DivergenceError as e:
        logger.error("Run diverged at iteration %d: %s", e.iteration, e)
        return ExitCode.DIVERGENCE
    except DataError as e:
        logger.error("Data error: %s", e)
        return ExitCode.DATA_ERROR
    except LAQError as e:
        logger.error("%s", e)
        return ExitCode.FAILURE
    except Exception as e:
        logger.exception("Fatal error: %s", e)
        return ExitCode.FAILURE


if __name__ == "__main__":
    sys.exit(main())
