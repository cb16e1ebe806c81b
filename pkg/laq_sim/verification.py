"""
Property suites behind `laq-sim verify`.
Each suite runs with fixed seeds and returns one CheckResult per check; the
command prints them as `PASS target.check key=value ...` lines.
"""

import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np

from laq_sim.codec import (
    WireMessage, decode_innovation, decode_message, encode_message,
    pack_codes, quantize_innovation, unpack_codes, levels
)
from laq_sim.constants import Algorithm, ModelKind, VerifyTarget
from laq_sim.criterion import recipe_xi
from laq_sim.data import synthetic_logistic, synthetic_quadratic
from laq_sim.engine import Problem, RunConfig, problem_from_dataset, quadratic_problem, run
from laq_sim.losses import (
    DataShard, LogisticModel, MLPModel, QuadraticModel, QuadraticShard,
    finite_diff_gradient, gradient, smoothness_constant
)
from laq_sim.metrics import (
    export_csv, fit_linear_rate, prop1_check, rate_burn_in, staleness_ok
)

logger = logging.getLogger(__name__)

ERROR_BOUND_SLACK = 2.0 ** -40
GRADIENT_RTOL = 1e-5
REDUCTION_RTOL = 1e-3
RATE_MIN_R2 = 0.98
RECIPE_TARGET = 1e-10
SAVINGS_TARGET = 1e-6


@dataclass
class CheckResult:
    """Outcome of one named check"""
    target: str
    check: str
    passed: bool
    details: Dict[str, object] = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = " ".join(f"{k}={v}" for k, v in self.details.items())
        return f"{status} {self.target}.{self.check}" + (f" {extra}" if extra else "")


# Problem builders shared with the acceptance tests

def reduction_setup(seed: int = 0, iterations: int = 200) -> Tuple[RunConfig, Problem]:
    """LAQ with no history, no staleness and 24-bit codes on a small logistic task"""
    dataset = synthetic_logistic(500, 10, 2, seed)
    config = RunConfig(algorithm=Algorithm.LAQ, alpha=1.0, bits=24, xi=(), max_staleness=0,
                       num_workers=5, max_iterations=iterations, model=ModelKind.LOGISTIC,
                       dataset="synthetic-logistic", seed=seed)
    problem = problem_from_dataset(config, dataset)
    smoothness = sum(smoothness_constant(problem.model, shard) for shard in problem.shards)
    return config.with_overrides(alpha=1.0 / smoothness), problem


def recipe_setup(seed: int = 0, target: float = RECIPE_TARGET) -> Tuple[RunConfig, Problem]:
    """Strongly convex quadratic with mu = 1, L = 10 and the simple parameter choice"""
    smoothness = (2.0,) * 5
    synthetic = synthetic_quadratic(20, 5, smoothness, 1.0, seed)
    global_smoothness = sum(smoothness)
    config = RunConfig(algorithm=Algorithm.LAQ, alpha=1.0 / (8.0 * global_smoothness), bits=8,
                       xi=recipe_xi(5), max_staleness=20, num_workers=5, max_iterations=20000,
                       target_residual=target, model=ModelKind.QUADRATIC,
                       dataset="synthetic-quadratic", dimension=20, mu=1.0,
                       worker_smoothness=smoothness, seed=seed)
    return config, quadratic_problem(config, synthetic)


def prop1_setup(seed: int = 0, iterations: int = 2000) -> Tuple[RunConfig, Problem]:
    """Four workers with L_m of 0.1, 0.1, 1 and 10"""
    smoothness = (0.1, 0.1, 1.0, 10.0)
    synthetic = synthetic_quadratic(20, 4, smoothness, 0.4, seed)
    config = RunConfig(algorithm=Algorithm.LAQ, alpha=1.0 / (8.0 * sum(smoothness)), bits=8,
                       xi=recipe_xi(5), max_staleness=20, num_workers=4,
                       max_iterations=iterations, model=ModelKind.QUADRATIC,
                       dataset="synthetic-quadratic", dimension=20, mu=0.4,
                       worker_smoothness=smoothness, seed=seed)
    return config, quadratic_problem(config, synthetic)


def _codec_suite() -> List[CheckResult]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        p = int(rng.integers(1, 257))
        bits = int(rng.integers(1, 17))
        center = rng.standard_normal(p)
        grad = center + rng.standard_normal(p) * 10.0 ** rng.uniform(-3, 3)
        qi = quantize_innovation(grad, center, bits)
        error = float(np.max(np.abs((grad - center) - decode_innovation(qi))))
        worst = max(worst, error / (qi.tau * qi.radius) if qi.radius else 0.0)
    results = [CheckResult("codec", "error_bound", worst <= 1.0 + ERROR_BOUND_SLACK,
                           {"trials": 10_000, "worst_ratio": f"{worst:.12f}"})]

    failures = 0
    cases = 0
    for bits in (1, 2, 3, 4, 8):
        top = levels(bits)
        for p in range(1, 17):
            vectors = [np.zeros(p, dtype=np.uint64), np.full(p, top, dtype=np.uint64)]
            for position in range(p):
                for value in range(top + 1):
                    codes = rng.integers(0, top + 1, size=p).astype(np.uint64)
                    codes[position] = value
                    vectors.append(codes)
            for codes in vectors:
                cases += 1
                if not np.array_equal(unpack_codes(pack_codes(codes, bits), bits, p), codes):
                    failures += 1
    results.append(CheckResult("codec", "pack_roundtrip", failures == 0,
                               {"cases": cases, "failures": failures}))

    nested_ok = True
    for _ in range(1000):
        center = rng.standard_normal(32)
        grad = center + rng.standard_normal(32)
        errors = [float(np.max(np.abs((grad - center)
                                      - decode_innovation(quantize_innovation(grad, center, b)))))
                  for b in (1, 2, 4, 8, 16)]
        nested_ok &= all(a >= b - 1e-12 for a, b in zip(errors, errors[1:]))
    results.append(CheckResult("codec", "nested_refinement", bool(nested_ok), {"widths": "1,2,4,8,16"}))

    qi = quantize_innovation(rng.standard_normal(100), np.zeros(100), 5)
    message = WireMessage.from_innovation(3, 7, qi)
    results.append(CheckResult("codec", "wire_roundtrip",
                               decode_message(encode_message(message)) == message,
                               {"bytes": len(encode_message(message))}))
    return results


def _random_spd(rng: np.random.Generator, p: int) -> np.ndarray:
    basis = rng.standard_normal((p, p))
    return basis @ basis.T / p + np.eye(p)


def _gradient_suite() -> List[CheckResult]:
    rng = np.random.default_rng(1)
    features = rng.standard_normal((12, 4))
    labels = np.eye(3)[rng.integers(3, size=12)]
    data = DataShard(features, labels, total_samples=30.0)
    variants: List[Tuple[str, object, object, Callable[[], np.ndarray]]] = []

    quadratic = QuadraticModel(6)
    shard = QuadraticShard(_random_spd(rng, 6), rng.standard_normal(6))
    variants.append(("quadratic", quadratic, shard, lambda: rng.standard_normal(6)))
    logistic = LogisticModel(3, 4, 0.01)
    variants.append(("logistic", logistic, data, lambda: rng.standard_normal(logistic.dimension)))
    mlp = MLPModel((4, 5, 3), 0.01)

    def mlp_point() -> np.ndarray:
        # keep every hidden pre-activation away from the ReLU kink
        while True:
            params = rng.standard_normal(mlp.dimension)
            w1, b1, _, _ = mlp.unflatten(params)
            if np.min(np.abs(features @ w1.T + b1)) > 1e-3:
                return params

    variants.append(("mlp", mlp, data, mlp_point))

    results = []
    for name, model, local, draw in variants:
        worst = 0.0
        for _ in range(100):
            params = draw()
            analytic = gradient(model, params, local)
            numeric = finite_diff_gradient(model, params, local)
            scale = max(float(np.linalg.norm(numeric)), 1e-12)
            worst = max(worst, float(np.linalg.norm(analytic - numeric)) / scale)
        results.append(CheckResult("gradients", name, worst <= GRADIENT_RTOL,
                                   {"points": 100, "worst_rel_error": f"{worst:.3e}"}))
    return results


def max_relative_deviation(params: np.ndarray, reference: np.ndarray) -> float:
    """Largest coordinate deviation relative to the scale of the reference"""
    scale = max(float(np.max(np.abs(reference))), 1e-300)
    return float(np.max(np.abs(params - reference))) / scale


def _reduction_suite() -> List[CheckResult]:
    config, problem = reduction_setup()
    laq_params, laq_log = run(config, problem)
    gd_params, _ = run(config.with_overrides(algorithm=Algorithm.GD), problem)
    deviation = max_relative_deviation(laq_params, gd_params)
    results = [CheckResult("reductions", "laq_to_gd", deviation <= REDUCTION_RTOL,
                           {"iterations": config.max_iterations, "deviation": f"{deviation:.3e}"})]

    lag_params, _ = run(config.with_overrides(algorithm=Algorithm.LAG), problem)
    deviation = max_relative_deviation(lag_params, gd_params)
    results.append(CheckResult("reductions", "lag_to_gd", deviation <= 1e-12,
                               {"deviation": f"{deviation:.3e}"}))

    single = config.with_overrides(algorithm=Algorithm.QGD, bits=32, num_workers=1)
    problem_one = problem_from_dataset(single, synthetic_logistic(500, 10, 2, 0))
    qgd_params, _ = run(single, problem_one)
    serial_params, _ = run(single.with_overrides(algorithm=Algorithm.GD), problem_one)
    deviation = max_relative_deviation(qgd_params, serial_params)
    results.append(CheckResult("reductions", "single_worker_qgd", deviation <= REDUCTION_RTOL,
                               {"deviation": f"{deviation:.3e}"}))
    results.append(CheckResult("reductions", "staleness", staleness_ok(laq_log, config.max_staleness)))
    return results


def _prop1_suite() -> List[CheckResult]:
    config, problem = prop1_setup()
    _, log = run(config, problem)
    bounds = prop1_check(log, problem.worker_smoothness, config.skip_config())
    results = [CheckResult("prop1", f"worker{b.worker_id}", b.passed,
                           {"d_m": b.depth, "bound": b.bound, "uploads": b.actual})
               for b in bounds]
    uploads = log.worker_uploads
    ordered = max(uploads[0], uploads[1]) < uploads[3]
    results.append(CheckResult("prop1", "smooth_workers_upload_less", ordered,
                               {"uploads": ",".join(str(u) for u in uploads)}))
    return results


def _rate_suite() -> List[CheckResult]:
    config, problem = recipe_setup()
    _, log = run(config, problem)
    final = log.records[-1].residual
    reached = final is not None and final <= RECIPE_TARGET
    window = [r for r in log.residuals[rate_burn_in(config.depth):] if r is not None and r > 0.0]
    rate, r_squared = fit_linear_rate(window)
    results = [
        CheckResult("rate", "target_reached", reached,
                    {"iterations": log.iterations, "residual": f"{final:.3e}"}),
        CheckResult("rate", "linear_fit", r_squared >= RATE_MIN_R2 and rate < 1.0,
                    {"rate": f"{rate:.6f}", "r2": f"{r_squared:.4f}"}),
    ]

    savings = config.with_overrides(target_residual=SAVINGS_TARGET)
    totals = {}
    for algorithm in (Algorithm.GD, Algorithm.QGD, Algorithm.LAQ):
        _, algorithm_log = run(savings.with_overrides(algorithm=algorithm), problem)
        totals[algorithm] = algorithm_log
    laq, qgd, gd = totals[Algorithm.LAQ], totals[Algorithm.QGD], totals[Algorithm.GD]
    results.append(CheckResult("rate", "upload_savings", laq.total_uploads <= 0.5 * qgd.total_uploads,
                               {"laq": laq.total_uploads, "qgd": qgd.total_uploads}))
    results.append(CheckResult("rate", "bit_savings", laq.total_bits <= 0.2 * gd.total_bits,
                               {"laq": laq.total_bits, "gd": gd.total_bits}))
    return results


def _staleness_suite() -> List[CheckResult]:
    results = []
    for name, setup in (("reduction", reduction_setup), ("recipe", recipe_setup), ("prop1", prop1_setup)):
        config, problem = setup()
        _, log = run(config, problem)
        results.append(CheckResult("staleness", name, staleness_ok(log, config.max_staleness),
                                   {"max_staleness": config.max_staleness}))
    return results


def _determinism_suite() -> List[CheckResult]:
    results = []
    with tempfile.TemporaryDirectory() as tmp:
        for name, setup in (("reduction", reduction_setup), ("recipe", recipe_setup)):
            paths = []
            for attempt in range(2):
                config, problem = setup(seed=3)
                _, log = run(config, problem)
                paths.append(export_csv(log, Path(tmp) / f"{name}_{attempt}.csv"))
            identical = paths[0].read_bytes() == paths[1].read_bytes()
            results.append(CheckResult("determinism", name, identical))
    return results


SUITES: Dict[VerifyTarget, Callable[[], List[CheckResult]]] = {
    VerifyTarget.CODEC: _codec_suite,
    VerifyTarget.GRADIENTS: _gradient_suite,
    VerifyTarget.REDUCTIONS: _reduction_suite,
    VerifyTarget.PROP1: _prop1_suite,
    VerifyTarget.RATE: _rate_suite,
    VerifyTarget.STALENESS: _staleness_suite,
    VerifyTarget.DETERMINISM: _determinism_suite,
}


def run_suite(target: VerifyTarget) -> List[CheckResult]:
    logger.info("Running %s suite", target.value)
    return SUITES[target]()
