import math

import numpy as np
import pytest

from laq_sim.constants import Algorithm
from laq_sim.criterion import SkipConfig
from laq_sim.exceptions import ConfigError
from laq_sim.metrics import (
    TelemetryLog, TelemetryRecord, bits_accounting, clearance_depth, export_csv,
    fit_linear_rate, format_summary, lyapunov, max_consecutive_skips, prop1_check,
    rate_burn_in, read_csv, staleness_ok, upload_bits
)


def make_log(uploads, clocks=None, workers=2):
    log = TelemetryLog(config={"algorithm": "laq"}, worker_uploads=[0] * workers)
    cumulative = 0
    for k, count in enumerate(uploads):
        cumulative += count
        log.append(TelemetryRecord(
            iteration=k, loss=1.0 / (k + 1), residual=0.5 ** k, grad_norm=0.1, uploads=count,
            cumulative_uploads=cumulative, cumulative_bits=cumulative * 100,
            clocks=clocks[k] if clocks else (0,) * workers))
    return log


def test_lyapunov_example():
    cfg = SkipConfig(1.0, 1, (1.0, 1.0), 2)
    history = [np.array([3.0]), np.array([2.0]), np.array([1.0])]
    # residual 1 + (2/1) * 1 + (1/1) * 1
    assert lyapunov(history, 1.0, cfg) == pytest.approx(4.0)
    assert lyapunov(history, 5.0, cfg) == pytest.approx(8.0)


def test_lyapunov_without_history_terms():
    cfg = SkipConfig(0.5, 1, (), 0)
    assert lyapunov([np.zeros(2)], 0.25, cfg) == 0.25
    short = SkipConfig(0.5, 1, (0.2, 0.1), 2)
    assert lyapunov([np.ones(2)], 0.25, short) == 0.25
    with pytest.raises(ConfigError):
        lyapunov([np.zeros(2)], None, cfg)


def test_bits_accounting_examples():
    assert bits_accounting(Algorithm.LAQ, 7850, 3, 620) == 620 * (32 + 3 * 7850)
    assert bits_accounting(Algorithm.GD, 100, 3, 10) == 32000
    assert upload_bits(Algorithm.QGD, 1, 1) == 33
    assert upload_bits(Algorithm.LAG, 10, 8) == 320


def test_rate_burn_in():
    assert rate_burn_in(0) == 20
    assert rate_burn_in(30) == 30


def test_fit_linear_rate_recovers_geometric_decay():
    rate, r_squared = fit_linear_rate([0.9 ** k for k in range(50)])
    assert rate == pytest.approx(0.9)
    assert r_squared == pytest.approx(1.0)

    scaled, _ = fit_linear_rate([1e-3 * 0.9 ** k for k in range(50)])
    assert scaled == pytest.approx(rate)


def test_fit_linear_rate_constant_sequence():
    rate, r_squared = fit_linear_rate([2.0] * 12)
    assert rate == pytest.approx(1.0)
    assert r_squared == 1.0


def test_fit_linear_rate_errors():
    with pytest.raises(ConfigError):
        fit_linear_rate([0.5] * 9)
    with pytest.raises(ConfigError):
        fit_linear_rate([1.0] * 10 + [0.0])


def test_clearance_depth():
    cfg = SkipConfig(0.1, 2, (0.3, 0.12, 0.03), 5)
    # xi_d / (3 * 0.01 * 4 * 3) = xi_d / 0.36
    assert clearance_depth(math.sqrt(0.3 / 0.36), cfg) == 1
    assert clearance_depth(math.sqrt(0.03 / 0.36), cfg) == 3
    assert clearance_depth(1.0, cfg) == 0
    assert clearance_depth(1.0, SkipConfig(0.1, 2, (), 0)) == 0


def test_prop1_check():
    cfg = SkipConfig(0.1, 2, (0.3, 0.12, 0.03), 5)
    log = make_log([0] + [1] * 12)
    log.worker_uploads = [4, 13]
    results = prop1_check(log, [math.sqrt(0.03 / 0.36), 5.0], cfg)
    assert [(r.depth, r.bound) for r in results] == [(3, 4), (0, 13)]
    assert all(r.passed for r in results)

    log.worker_uploads = [5, 13]
    assert not prop1_check(log, [math.sqrt(0.03 / 0.36), 5.0], cfg)[0].passed

    with pytest.raises(ConfigError):
        prop1_check(log, [1.0, 1.0], SkipConfig(0.1, 2, (0.1, 0.2), 5))
    with pytest.raises(ConfigError):
        prop1_check(log, [1.0], cfg)


def test_staleness_from_clocks():
    log = make_log([0, 2, 1, 1], clocks=[(0, 0), (0, 0), (1, 0), (2, 0)])
    assert max_consecutive_skips(log) == 2
    assert staleness_ok(log, 1)
    assert not staleness_ok(log, 0)
    assert max_consecutive_skips(TelemetryLog()) == 0


def test_csv_export_and_read(tmp_path):
    log = make_log([0, 2, 1], clocks=[(0, 0), (0, 0), (0, 1)])
    log.records[1].residual = None
    log.records[2].lyapunov = 0.1 + 0.2
    log.worker_uploads = [2, 1]
    log.descent_violations = 1
    log.final_accuracy = 0.875
    path = export_csv(log, tmp_path / "nested" / "laq_seed0.csv")

    lines = path.read_text().splitlines()
    assert lines[0] == "# algorithm=laq"
    assert "# worker_uploads=2 1" in lines
    assert lines[4] == ("iteration,loss,residual,grad_norm,quant_error,uploads,cumulative_uploads,"
                        "cumulative_bits,lyapunov,clocks")
    assert len(lines) == 5 + 3

    parsed = read_csv(path)
    assert parsed.config == {"algorithm": "laq"}
    assert parsed.worker_uploads == [2, 1]
    assert parsed.descent_violations == 1
    assert parsed.final_accuracy == 0.875
    assert parsed.records[1].residual is None
    assert parsed.records[2].lyapunov == 0.1 + 0.2
    assert parsed.records[2].clocks == (0, 1)
    assert parsed.total_bits == 300


def test_log_dict_roundtrip():
    log = make_log([0, 1])
    assert TelemetryLog.from_dict(log.to_dict()).to_dict() == log.to_dict()


def test_format_summary():
    log = make_log([0, 2, 2])
    log.final_accuracy = 0.91234
    text = format_summary([("laq (seed 0)", log), ("gd (seed 0)", TelemetryLog())])
    lines = text.splitlines()
    assert lines[0].split() == ["Algorithm", "Iteration", "#", "Communication", "#", "Bit", "#",
                                "Accuracy"]
    assert set(lines[1].replace(" ", "")) == {"-"}
    assert lines[2].split() == ["laq", "(seed", "0)", "2", "4", "4.000e+02", "0.9123"]
    assert lines[3].split()[-1] == "-"
    assert len({len(line.rstrip()) for line in lines[:2]}) == 1


def test_format_summary_lists_uploads_per_worker():
    log = make_log([0, 2, 1])
    log.worker_uploads = [2, 1]
    lines = format_summary([("laq (seed 0)", log), ("gd (seed 0)", TelemetryLog())]).splitlines()
    block = lines[lines.index("") + 1:]
    assert block[0].split() == ["Algorithm", "Uploads", "per", "worker"]
    assert set(block[1].replace(" ", "")) == {"-"}
    assert block[2].split() == ["laq", "(seed", "0)", "2", "1"]
    assert block[3].split() == ["gd", "(seed", "0)", "-"]
