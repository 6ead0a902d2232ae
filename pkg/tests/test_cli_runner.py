"""Config plumbing, stage orchestration, and exit codes."""

import argparse
import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from hamgraph.cli_runner import (
    RunConfig,
    apply_overrides,
    config_hash,
    data_hash,
    main,
    preset,
    run_config_from_dict,
    run_config_to_dict,
    _resolve_config,
)
from hamgraph.errors import ValidationError
from hamgraph.lattice_bench import GenConfig
from hamgraph.structure_learner import (
    TrainConfig,
    build_structure_model,
    model_to_dict,
    train_config_to_dict,
)

from helpers import ring_distance

PRESET_NAMES = ["kg_lri-desk", "dnls_hom-desk", "dnls_het-desk",
                "kg_lri-paper", "dnls_hom-paper", "dnls_het-paper"]


def micro_config(out_dir, **kwargs):
    """Seconds-scale run: tiny lattice, two epochs, short horizons."""
    base = RunConfig(
        data=GenConfig(system="kg_lri", n_sites=8, n_train=1, n_val=1,
                       n_test=1, t_train=2.0, t_test=5.0, master_seed=5),
        structure=TrainConfig(epochs=2, batch_size=256,
                              lr_schedule=((1, 1e-3),), hidden=(8,), seed=0),
        predictor=TrainConfig(epochs=2, batch_size=256, gamma=0.0,
                              lr_schedule=((1, 1e-3),), hidden=(8,), seed=1),
        out_dir=str(out_dir),
    )
    return replace(base, **kwargs) if kwargs else base


def banded_ring_weights(n=8):
    """Idealized converged adjacency: coupling bands plus a strong diagonal.
    Needs n >= 8 so some pairs sit beyond range 3 and form a zero cluster."""
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            w[i, j] = {1: 0.25, 2: 0.15, 3: 0.10}.get(ring_distance(i, j, n), 0.0)
    np.fill_diagonal(w, 0.45)
    return w


def write_structure_artifact(config, out):
    """Fabricate a structure checkpoint with an ideal adjacency, so the
    downstream stages can be exercised without a long training run."""
    model = build_structure_model(config.data.n_sites,
                                  hidden=config.structure.hidden, seed=0)
    model.weights = banded_ring_weights(config.data.n_sites)
    doc = {
        "schema_version": 1,
        "config_hash": config_hash(config),
        "config": train_config_to_dict(config.structure),
        "model": model_to_dict(model),
        "history": [1.0, 0.5],
    }
    path = Path(config.out_dir) / "structure.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def run_cli(config, command, *extra):
    path = Path(config.out_dir) / "cli_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(run_config_to_dict(config)))
    return main([command, "--config", str(path), *extra])


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    """One micro pipeline driven end to end through the CLI entry point."""
    out = tmp_path_factory.mktemp("micro")
    config = micro_config(out)
    assert run_cli(config, "generate") == 0
    write_structure_artifact(config, out)
    for command in ("cluster", "train-predictor", "rollout", "evaluate",
                    "ablate-oracle"):
        assert run_cli(config, command) == 0, command
    return config, out


def test_presets_round_trip_and_hash():
    for name in PRESET_NAMES:
        config = preset(name)
        doc = run_config_to_dict(config)
        assert run_config_to_dict(run_config_from_dict(doc)) == doc
        h = config_hash(config)
        assert h == config_hash(run_config_from_dict(doc))
        assert len(h) == 16 and int(h, 16) >= 0


def test_preset_scales():
    desk = preset("kg_lri-desk")
    paper = preset("kg_lri-paper")
    assert desk.data.n_sites == 16 and paper.data.n_sites == 32
    assert (paper.data.n_train, paper.data.n_val, paper.data.n_test) == (50, 30, 30)
    assert paper.predictor.epochs == 10000
    assert paper.predictor.lr_schedule[1][0] == 3000
    assert preset("dnls_het-paper").data.n_sites == 16
    with pytest.raises(ValidationError):
        preset("kg_lri-huge")
    with pytest.raises(ValidationError):
        preset("desk")


def test_config_hash_scope():
    config = preset("kg_lri-desk")
    assert config_hash(replace(config, out_dir="elsewhere")) == config_hash(config)
    assert config_hash(replace(config, oracle=True)) == config_hash(config)
    assert config_hash(replace(config, k_max=5)) != config_hash(config)
    assert config_hash(replace(config, noise_sigma=0.01)) != config_hash(config)
    assert data_hash(config.data) == data_hash(replace(config.data))


def test_run_config_rejects_unknown_keys():
    doc = run_config_to_dict(preset("kg_lri-desk"))
    doc["typo"] = 1
    with pytest.raises(ValidationError):
        run_config_from_dict(doc)
    doc = run_config_to_dict(preset("kg_lri-desk"))
    doc["structure"]["momentum"] = 0.9
    with pytest.raises(ValidationError):
        run_config_from_dict(doc)
    doc = run_config_to_dict(preset("kg_lri-desk"))
    doc["data"]["n_site"] = 4
    with pytest.raises(ValidationError):
        run_config_from_dict(doc)


def test_run_config_validates_fields():
    config = preset("kg_lri-desk")
    with pytest.raises(ValidationError):
        replace(config, k_max=1)
    with pytest.raises(ValidationError):
        replace(config, noise_sigma=-0.1)
    with pytest.raises(ValidationError):
        replace(config, data=replace(config.data, system="dnls_het", n_sites=8))


def test_apply_overrides():
    doc = run_config_to_dict(preset("kg_lri-desk"))
    out = apply_overrides(doc, ["data.n_sites=8", "structure.hidden=[4,4]",
                                "structure.regularizer=l1", "k_max=5"])
    assert out["data"]["n_sites"] == 8
    assert out["structure"]["hidden"] == [4, 4]
    assert out["structure"]["regularizer"] == "l1"
    assert out["k_max"] == 5
    with pytest.raises(ValidationError):
        apply_overrides(doc, ["data.n_trajectories=9"])
    with pytest.raises(ValidationError):
        apply_overrides(doc, ["nosuch.section=1"])
    with pytest.raises(ValidationError):
        apply_overrides(doc, ["missing_equals"])


def test_generate_system_flag_maps_to_paper_preset():
    args = argparse.Namespace(preset=None, config=None, set=[], out=None,
                              oracle=False, system="kg-lri", n=32)
    config = _resolve_config(args)
    assert config.data.system == "kg_lri"
    assert config.data.n_sites == 32
    assert (config.data.n_train, config.data.n_val, config.data.n_test) == (50, 30, 30)


def test_cli_rejects_small_heterogeneous_lattice(capsys):
    assert main(["generate", "--system", "dnls-het", "--n", "8"]) == 1
    assert "16" in capsys.readouterr().out


def test_cli_usage_errors_exit_1():
    assert main(["generate"]) == 1          # no preset/config/system
    assert main(["nosuchcommand"]) == 1     # argparse usage error
    config = preset("kg_lri-desk")
    assert main(["generate", "--preset", "kg_lri-desk", "--config", "x.json"]) == 1
    assert main(["evaluate", "--config", "/nonexistent/config.json"]) == 1


def test_generate_digest_deterministic(tmp_path, capsys):
    config = micro_config(tmp_path / "a")
    assert run_cli(config, "generate") == 0
    first = capsys.readouterr().out
    assert run_cli(config, "generate") == 0
    second = capsys.readouterr().out
    assert first.split()[1] == second.split()[1]
    data = (tmp_path / "a" / "dataset.json").read_bytes()
    assert hashlib.sha256(data).hexdigest()[:16] == first.split()[1]


def test_stage_artifacts_exist(micro_run):
    _, out = micro_run
    for name in ("config.json", "dataset.json", "structure.json",
                 "partition.json", "predictor.json", "rollouts.json",
                 "report.json", "report_series.csv", "oracle.json",
                 "oracle_rollouts.json", "oracle_report.json",
                 "oracle_report_series.csv"):
        assert (out / name).exists(), name


def test_partition_summary_contents(micro_run):
    _, out = micro_run
    doc = json.loads((out / "partition.json").read_text())
    summary = doc["summary"]
    assert summary["off_clusters"] == 3
    assert summary["diag_clusters"] == 1
    assert summary["lifted"] is False
    assert summary["parity_counts"]["non-even"] == 0
    assert summary["non_even_pairs"] == []


def test_report_contents(micro_run):
    config, out = micro_run
    doc = json.loads((out / "report.json").read_text())
    assert set(doc["scalars"]) == {"train_loss", "test_loss", "energy_mse",
                                   "trajectory_mse"}
    assert doc["metadata"]["config_hash"] == config_hash(config)
    assert len(doc["series"]["t"]) == len(doc["series"]["mse"]) == 101
    header = (out / "report_series.csv").read_text().splitlines()[0]
    assert header == "mse,t"


def test_stage_rerun_is_byte_identical(micro_run):
    config, out = micro_run
    before = (out / "predictor.json").read_bytes()
    assert run_cli(config, "train-predictor") == 0
    assert (out / "predictor.json").read_bytes() == before
    before = (out / "rollouts.json").read_bytes()
    assert run_cli(config, "rollout") == 0
    assert (out / "rollouts.json").read_bytes() == before


def test_evaluate_refuses_mismatched_hash_unless_forced(micro_run, capsys):
    config, out = micro_run
    tampered = replace(config, k_max=7)
    assert run_cli(tampered, "evaluate") == 1
    assert "config hash" in capsys.readouterr().out
    assert run_cli(tampered, "evaluate", "--force") == 0


def test_missing_artifact_is_validation_error(tmp_path, capsys):
    config = micro_config(tmp_path / "empty")
    assert run_cli(config, "train-structure") == 1
    assert "generate" in capsys.readouterr().out
    assert run_cli(config, "cluster") == 1


def test_noise_stage(tmp_path):
    out = tmp_path / "noisy"
    clean = micro_config(out)
    assert run_cli(clean, "generate") == 0
    config = replace(clean, noise_sigma=0.01, noise_seed=3)
    assert run_cli(config, "noise") == 0
    noisy_doc = json.loads((out / "dataset_noisy.json").read_text())
    assert noisy_doc["header"]["provenance"]["noise"] == {"sigma": 0.01, "seed": 3}
    # the training loader insists the noise record matches the config
    stale = replace(clean, noise_sigma=0.02)
    assert run_cli(stale, "train-structure") == 1
    assert run_cli(config, "train-structure") == 0


def test_cli_set_overrides_reach_the_run(tmp_path, capsys):
    config = micro_config(tmp_path / "ov")
    assert run_cli(config, "generate", "--set", "data.n_sites=4") == 0
    line = capsys.readouterr().out
    assert "n=4" in line
    saved = json.loads((tmp_path / "ov" / "config.json").read_text())
    assert saved["data"]["n_sites"] == 4
