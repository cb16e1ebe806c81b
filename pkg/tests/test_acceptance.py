"""End-to-end checks on the reference problems"""

import pytest

from laq_sim.cli import main
from laq_sim.constants import Algorithm, VerifyTarget
from laq_sim.data import check_dataset
from laq_sim.engine import run
from laq_sim.metrics import export_csv, fit_linear_rate, prop1_check, rate_burn_in, read_csv, staleness_ok
from laq_sim.settings import Settings
from laq_sim.verification import (
    max_relative_deviation, prop1_setup, recipe_setup, reduction_setup, run_suite
)


@pytest.fixture(scope="module")
def recipe_runs():
    config, problem = recipe_setup()
    logs = {"recipe": run(config, problem)[1]}
    savings = config.with_overrides(target_residual=1e-6)
    for algorithm in (Algorithm.GD, Algorithm.QGD, Algorithm.LAQ):
        logs[algorithm.value] = run(savings.with_overrides(algorithm=algorithm), problem)[1]
    return config, logs


def test_laq_reduces_to_gd():
    config, problem = reduction_setup()
    laq_params, laq_log = run(config, problem)
    gd_params, gd_log = run(config.with_overrides(algorithm=Algorithm.GD), problem)
    assert max_relative_deviation(laq_params, gd_params) <= 1e-3
    assert laq_log.total_uploads == gd_log.total_uploads == 5 * 200
    assert staleness_ok(laq_log, 0)


def test_recipe_converges_linearly(recipe_runs):
    config, logs = recipe_runs
    log = logs["recipe"]
    assert log.records[-1].residual <= 1e-10
    rate, r_squared = fit_linear_rate(log.residuals[rate_burn_in(config.depth):])
    assert rate < 1.0
    assert r_squared >= 0.98
    assert staleness_ok(log, config.max_staleness)


def test_lyapunov_bounds_residual(recipe_runs):
    for record in recipe_runs[1]["recipe"].records:
        assert record.residual >= 0.0
        assert record.lyapunov >= record.residual


def test_lyapunov_decreases_with_fine_quantization():
    config, problem = recipe_setup()
    _, log = run(config.with_overrides(bits=16), problem)
    values = [r.lyapunov for r in log.records[config.depth:]]
    steps = list(zip(values, values[1:]))
    assert len(steps) > 100
    decreasing = sum(after <= before * (1.0 + 1e-12) for before, after in steps)
    assert decreasing >= 0.99 * len(steps)


def test_recipe_saves_communication(recipe_runs):
    _, logs = recipe_runs
    laq, qgd, gd = logs["laq"], logs["qgd"], logs["gd"]
    assert laq.total_uploads <= 0.5 * qgd.total_uploads
    assert laq.total_bits <= 0.2 * gd.total_bits


def test_upload_frequency_bound():
    config, problem = prop1_setup()
    _, log = run(config, problem)
    bounds = prop1_check(log, problem.worker_smoothness, config.skip_config())
    assert all(b.passed for b in bounds), bounds
    assert [b.depth for b in bounds][:2] == [5, 5]
    uploads = log.worker_uploads
    assert max(uploads[0], uploads[1]) < uploads[3]
    assert staleness_ok(log, config.max_staleness)


@pytest.mark.parametrize("setup", [reduction_setup, recipe_setup, prop1_setup])
def test_same_seed_gives_identical_csv(tmp_path, setup):
    paths = []
    for attempt in range(2):
        config, problem = setup(seed=3)
        paths.append(export_csv(run(config, problem)[1], tmp_path / f"run{attempt}.csv"))
    assert paths[0].read_bytes() == paths[1].read_bytes()


@pytest.mark.parametrize("target", [VerifyTarget.GRADIENTS, VerifyTarget.STALENESS])
def test_verify_suites_pass(target):
    results = run_suite(target)
    assert results
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


@pytest.mark.extended
def test_mnist_logistic_preset(tmp_path):
    cache_dir = Settings().cache_dir()
    if check_dataset("mnist", cache_dir):
        pytest.skip("MNIST not cached; run `laq-sim dataset fetch mnist`")
    out = tmp_path / "mnist"
    code = main(["--quiet", "run", "--preset", "paper-gd-suite", "--algorithm", "qgd", "laq",
                 "--out", str(out)])
    assert code == 0
    laq, qgd = read_csv(out / "laq_seed0.csv"), read_csv(out / "qgd_seed0.csv")
    assert laq.final_accuracy == pytest.approx(0.9082, abs=0.01)
    assert laq.total_uploads < 0.1 * qgd.total_uploads
