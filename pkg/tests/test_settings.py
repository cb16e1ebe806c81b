import json
import logging
from pathlib import Path

import pytest

from laq_sim.constants import CACHE_DIR_ENV, Algorithm, ModelKind, PartitionMode
from laq_sim.criterion import experiment_xi, recipe_xi
from laq_sim.exceptions import ConfigError
from laq_sim.settings import PRESETS, ExperimentFile, Settings, resolve_xi


def test_settings_defaults_and_roundtrip(tmp_path):
    path = tmp_path / "settings.json"
    settings = Settings(str(path))
    assert settings.get("output_dir") == "runs"
    settings.set("output_dir", "elsewhere")
    settings.save()
    assert json.loads(path.read_text())["output_dir"] == "elsewhere"
    assert Settings(str(path)).get("output_dir") == "elsewhere"
    settings.reset_to_defaults()
    assert settings.get("output_dir") == "runs"


def test_settings_ignores_unreadable_file(tmp_path, caplog):
    path = tmp_path / "settings.json"
    path.write_text("{not json")
    with caplog.at_level(logging.WARNING):
        settings = Settings(str(path))
    assert "Could not load settings" in caplog.text
    assert settings.get("reference_iterations") == 100_000


def test_cache_dir_precedence(tmp_path, monkeypatch):
    path = tmp_path / "settings.json"
    path.write_text(json.dumps({"cache_dir": str(tmp_path / "from-file")}))
    settings = Settings(str(path))
    monkeypatch.delenv(CACHE_DIR_ENV, raising=False)
    assert settings.cache_dir() == tmp_path / "from-file"
    monkeypatch.setenv(CACHE_DIR_ENV, str(tmp_path / "from-env"))
    assert settings.cache_dir() == tmp_path / "from-env"
    assert settings.cache_dir(str(tmp_path / "from-flag")) == tmp_path / "from-flag"


def test_resolve_xi():
    assert resolve_xi(None, None) is None
    assert resolve_xi(4, None) == experiment_xi(4)
    assert resolve_xi(None, "recipe") == recipe_xi(10)
    assert resolve_xi(3, "recipe") == recipe_xi(3)
    assert resolve_xi(0, "experiment") == ()
    assert resolve_xi(3, "0.1") == (0.1, 0.1, 0.1)
    assert resolve_xi(2, "0.3, 0.2") == (0.3, 0.2)
    assert resolve_xi(None, "0.3 0.2") == (0.3, 0.2)
    with pytest.raises(ConfigError):
        resolve_xi(3, "0.3 0.2")


def write_experiment(tmp_path, text):
    path = tmp_path / "experiment.ini"
    path.write_text(text)
    return str(path)


def test_experiment_file_layers(tmp_path):
    path = write_experiment(tmp_path, """
[experiment]
dataset = synthetic-logistic
algorithms = gd laq
workers = 4
alpha = 0.05
bigD = 2
xi = 0.3
max_staleness = 5
seeds = 1 2
partition = heterogeneous

[laq]
alpha = 0.01
bits = 6
""")
    experiment = ExperimentFile.load(path)
    assert experiment.algorithms() == [Algorithm.GD, Algorithm.LAQ]
    configs = experiment.run_configs()
    assert [(c.algorithm, c.seed) for c in configs] == [
        (Algorithm.GD, 1), (Algorithm.GD, 2), (Algorithm.LAQ, 1), (Algorithm.LAQ, 2)]
    gd, laq = configs[0], configs[2]
    assert gd.alpha == 0.05 and laq.alpha == 0.01
    assert laq.bits == 6
    assert laq.xi == (0.3, 0.3)
    assert laq.partition == PartitionMode.HETEROGENEOUS

    flagged = experiment.run_configs({"alpha": 0.2, "seed": 9, "bits": None}, [Algorithm.LAQ])
    assert [(c.alpha, c.seed, c.bits) for c in flagged] == [(0.2, 9, 6)]


def test_experiment_file_rejects_unknown_entries(tmp_path):
    with pytest.raises(ConfigError, match="Unknown key"):
        ExperimentFile.load(write_experiment(tmp_path, "[experiment]\nstepsize = 0.1\n"))
    with pytest.raises(ConfigError, match="Unknown section"):
        ExperimentFile.load(write_experiment(tmp_path, "[experiment]\n[adam]\nalpha = 0.1\n"))
    with pytest.raises(ConfigError):
        ExperimentFile.load(write_experiment(tmp_path, "[experiment]\nalgorithms = gd adam\n"))
    with pytest.raises(ConfigError):
        ExperimentFile.load(str(tmp_path / "missing.ini"))


def test_experiment_file_rejects_bad_values():
    experiment = ExperimentFile.from_dict({"experiment": {"workers": "many"}})
    with pytest.raises(ConfigError, match="workers"):
        experiment.run_configs()
    experiment = ExperimentFile.from_dict({"experiment": {"algorithms": "laq", "bigD": "6",
                                                          "max_staleness": "3"}})
    with pytest.raises(ConfigError):
        experiment.run_configs()


def test_quadratic_model_selects_its_dataset():
    configs = ExperimentFile.from_dict({"experiment": {"model": "quadratic", "algorithms": "gd",
                                                       "smoothness": "1 2"}}).run_configs()
    assert configs[0].dataset == "synthetic-quadratic"
    assert configs[0].worker_smoothness == (1.0, 2.0)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build(name):
    configs = ExperimentFile.from_preset(name).run_configs()
    assert configs
    assert all(c.depth <= c.max_staleness for c in configs)


def test_gd_suite_preset_values():
    configs = ExperimentFile.from_preset("paper-gd-suite").run_configs()
    assert [c.algorithm for c in configs] == [Algorithm.GD, Algorithm.QGD, Algorithm.LAG, Algorithm.LAQ]
    laq = configs[-1]
    assert (laq.alpha, laq.bits, laq.depth, laq.max_staleness, laq.num_workers) == (0.02, 3, 10, 100, 10)
    assert sum(laq.xi) == pytest.approx(0.8)
    assert laq.model == ModelKind.LOGISTIC
    with pytest.raises(ConfigError):
        ExperimentFile.from_preset("nope")


def test_output_dir(tmp_path):
    experiment = ExperimentFile.load(write_experiment(tmp_path, "[experiment]\nout = results  # run folder\n"))
    assert experiment.output_dir == "results"
    assert Path(experiment.output_dir).name == "results"


@pytest.mark.parametrize("name", ["paper-gd-suite", "paper-sgd-suite"])
def test_mnist_suites_and_their_aliases(name):
    configs = ExperimentFile.from_preset(name).run_configs()
    aliased = ExperimentFile.from_preset(name.replace("paper-", "mnist-")).run_configs()
    assert [c.to_dict() for c in configs] == [c.to_dict() for c in aliased]
    assert all(c.dataset == "mnist" and c.max_staleness == 100 for c in configs)


def test_sgd_suite_preset_values():
    configs = ExperimentFile.from_preset("paper-sgd-suite").run_configs()
    assert [c.algorithm for c in configs] == [Algorithm.SGD, Algorithm.SLAQ]
    assert all((c.alpha, c.minibatch) == (0.008, 500) for c in configs)


def test_bits_sweep_repeats_quantized_algorithms():
    configs = ExperimentFile.from_preset("mnist-bits-sweep").run_configs()
    assert [(c.algorithm, c.bits) for c in configs] == [
        (Algorithm.LAQ, 2), (Algorithm.LAQ, 3), (Algorithm.LAQ, 4), (Algorithm.LAQ, 8)]

    experiment = ExperimentFile.from_dict({"experiment": {
        "model": "quadratic", "algorithms": "gd laq", "sweep_bits": "2 4", "seeds": "0 1"}})
    assert experiment.bits_sweep() == [2, 4]
    configs = experiment.run_configs()
    assert [(c.algorithm, c.seed) for c in configs] == [
        (Algorithm.GD, 0), (Algorithm.GD, 1),
        (Algorithm.LAQ, 0), (Algorithm.LAQ, 1), (Algorithm.LAQ, 0), (Algorithm.LAQ, 1)]
    assert [c.bits for c in configs[2:]] == [2, 2, 4, 4]
    assert [c.bits for c in experiment.run_configs({"bits": 6})] == [6, 6, 6, 6]


def test_bits_sweep_rejects_bad_entries():
    with pytest.raises(ConfigError, match="sweep_bits"):
        ExperimentFile.from_dict({"experiment": {"sweep_bits": "two"}})
    with pytest.raises(ConfigError, match="Unknown key"):
        ExperimentFile.from_dict({"experiment": {}, "laq": {"sweep_bits": "2"}})


def test_heterogeneous_preset():
    configs = ExperimentFile.from_preset("mnist-heterogeneous").run_configs()
    assert [c.algorithm for c in configs] == [Algorithm.LAG, Algorithm.LAQ]
    assert all(c.partition == PartitionMode.HETEROGENEOUS for c in configs)
