"""CLI tests: config validation, subcommands, run artifacts, reproducibility."""

import json

import numpy as np
import pytest

from qfed.cli import (
    ConfigError,
    ExperimentConfig,
    MetricsWriter,
    dump_config,
    load_config,
    main,
    read_metrics,
)
from qfed.data import save_idx, synthesize_images


@pytest.fixture(scope="module")
def idx_dataset(tmp_path_factory):
    """Small synthetic IDX dataset shared across CLI tests.

    56 samples per class: divisible by 7 and 8, so star fixed-class chunks and
    cycle-8 chunks are even and the hand EMD values (1.5 and 0) are exact."""
    root = tmp_path_factory.mktemp("idxdata")
    train = synthesize_images(56, seed=0)
    test = synthesize_images(4, seed=1)
    save_idx([img for img, _ in train], [lab for _, lab in train],
             root / "train-images", root / "train-labels")
    save_idx([img for img, _ in test], [lab for _, lab in test],
             root / "test-images", root / "test-labels")
    return root


def write_config(path, idx_root, out, **overrides):
    cfg = ExperimentConfig(
        train_images=str(idx_root / "train-images"),
        train_labels=str(idx_root / "train-labels"),
        test_images=str(idx_root / "test-images"),
        test_labels=str(idx_root / "test-labels"),
        per_class_train=0,
        test_size=0,
        depth=1,
        local_depth=1,
        epochs=1,
        batch_size=16,
        eval_every=1,
        gmm_modes=2,
        out=str(out),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    dump_config(cfg, path)
    return cfg


class TestConfig:
    def test_round_trip(self, tmp_path, idx_dataset):
        path = tmp_path / "exp.ini"
        cfg = write_config(path, idx_dataset, tmp_path / "runs", scheme="cycle", m=4,
                           algorithm="fedavg", seeds=(3, 4))
        loaded = load_config(path)
        assert loaded == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[train]\nwarp_speed = 9\n")
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.ini")

    def test_sync_period_only_with_fedavg(self, tmp_path, idx_dataset):
        cfg = write_config(tmp_path / "x.ini", idx_dataset, tmp_path,
                           algorithm="centralized", scheme="centralized", sync_period=3)
        with pytest.raises(ConfigError, match="fedavg"):
            cfg.validate()

    def test_cycle_needs_m(self, tmp_path, idx_dataset):
        cfg = write_config(tmp_path / "x.ini", idx_dataset, tmp_path,
                           algorithm="fedavg", scheme="cycle", m=0)
        with pytest.raises(ConfigError, match="m in 1..8"):
            cfg.validate()

    def test_m_only_with_cycle(self, tmp_path, idx_dataset):
        cfg = write_config(tmp_path / "x.ini", idx_dataset, tmp_path,
                           algorithm="fedavg", scheme="star", m=2)
        with pytest.raises(ConfigError, match="only meaningful"):
            cfg.validate()

    def test_full_scale_resolution(self, tmp_path, idx_dataset):
        cfg = write_config(tmp_path / "x.ini", idx_dataset, tmp_path, full_scale=True)
        resolved = cfg.resolved()
        assert resolved.depth == 48
        assert resolved.local_depth == 6
        assert resolved.epochs == 5
        assert resolved.batch_size == 128


class TestMetrics:
    def test_stream_round_trip(self, tmp_path):
        writer = MetricsWriter(tmp_path / "m.ndjson", "run-x")
        writer.record(step=1, split="train", loss=0.5)
        writer.record(step=2, split="test", accuracy=0.75, bytes_up=128)
        writer.flush()
        records = read_metrics(tmp_path / "m.ndjson")
        assert len(records) == 2
        assert records[0]["loss"] == 0.5
        assert records[0]["delta"] is None
        assert records[1]["accuracy"] == 0.75
        assert set(records[0]) == set(MetricsWriter.FIELDS)


class TestPartitionCommand:
    def test_star_manifest_and_emd(self, tmp_path, idx_dataset):
        out = tmp_path / "part"
        path = tmp_path / "exp.ini"
        write_config(path, idx_dataset, out, scheme="star", algorithm="fedavg")
        assert main(["partition", "--config", str(path)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["clients"]) == 7
        total = sum(c["n_samples"] for c in manifest["clients"])
        assert total == manifest["n_samples"]
        emd_lines = (out / "emd.csv").read_text().strip().splitlines()
        assert emd_lines[0] == "client_id,emd"
        for line in emd_lines[1:]:
            assert float(line.split(",")[1]) == pytest.approx(1.5, abs=1e-9)

    def test_cycle8_emd_zero(self, tmp_path, idx_dataset, capsys):
        path = tmp_path / "exp.ini"
        write_config(path, idx_dataset, tmp_path / "o", scheme="cycle", m=8,
                     algorithm="fedavg")
        assert main(["emd", "--config", str(path)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        for line in lines[1:]:
            assert float(line.split(",")[1]) == pytest.approx(0.0, abs=1e-9)

    def test_manifest_bytes_reproducible(self, tmp_path, idx_dataset):
        path = tmp_path / "exp.ini"
        out1, out2 = tmp_path / "a", tmp_path / "b"
        write_config(path, idx_dataset, out1, scheme="cycle", m=2, algorithm="fedinf")
        assert main(["partition", "--config", str(path)]) == 0
        write_config(path, idx_dataset, out2, scheme="cycle", m=2, algorithm="fedinf")
        assert main(["partition", "--config", str(path)]) == 0
        assert (out1 / "manifest.json").read_bytes() == (out2 / "manifest.json").read_bytes()


class TestTrainCommand:
    def test_centralized_run_artifacts(self, tmp_path, idx_dataset):
        out = tmp_path / "runs"
        path = tmp_path / "exp.ini"
        write_config(path, idx_dataset, out, scheme="centralized",
                     algorithm="centralized", seeds=(5,))
        assert main(["train", "--config", str(path)]) == 0
        run_dir = out / "centralized-centralized-s5"
        assert (run_dir / "config.ini").exists()
        assert (run_dir / "checkpoint.json").exists()
        records = read_metrics(run_dir / "metrics.ndjson")
        assert any(r["split"] == "train" for r in records)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["accuracy_mean"] is not None
        assert summary["rounds"] == 0

    def test_fedavg_logs_round_per_step(self, tmp_path, idx_dataset):
        out = tmp_path / "runs"
        path = tmp_path / "exp.ini"
        write_config(path, idx_dataset, out, scheme="cycle", m=2,
                     algorithm="fedavg", seeds=(1,))
        assert main(["train", "--config", str(path)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        # sync happens once per batch step: rounds == epochs * ceil(N_max/batch);
        # a cycle-2 client holds 2 classes x 28 samples = 56
        assert summary["rounds"] == 1 * int(np.ceil(56 / 16))
        run_dir = out / "fedavg-cycle2-s1"
        records = read_metrics(run_dir / "metrics.ndjson")
        train_records = [r for r in records if r["split"] == "train"]
        assert len(train_records) == summary["rounds"]
        assert train_records[0]["bytes_up"] > 0

    def test_fedavg_divergence_tracking(self, tmp_path, idx_dataset):
        out = tmp_path / "runs"
        path = tmp_path / "exp.ini"
        write_config(path, idx_dataset, out, scheme="cycle", m=8,
                     algorithm="fedavg", seeds=(1,), track_divergence=True)
        assert main(["train", "--config", str(path)]) == 0
        records = read_metrics(out / "fedavg-cycle8-s1" / "metrics.ndjson")
        deltas = [r["delta"] for r in records if r["split"] == "train"]
        assert deltas and all(d is not None and d >= 0 for d in deltas)

    def test_fedinf_one_round_and_bundle(self, tmp_path, idx_dataset):
        out = tmp_path / "runs"
        path = tmp_path / "exp.ini"
        write_config(path, idx_dataset, out, scheme="star",
                     algorithm="fedinf", seeds=(2,))
        assert main(["train", "--config", str(path)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["rounds"] == 1
        assert summary["bytes_down_total"] == 0
        run_dir = out / "fedinf-star-s2"
        assert (run_dir / "bundle" / "manifest.json").exists()
        records = read_metrics(run_dir / "metrics.ndjson")
        client_records = [r for r in records if r["split"].startswith("client")]
        assert client_records

    def test_metrics_reproducible_across_runs(self, tmp_path, idx_dataset):
        path = tmp_path / "exp.ini"
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            write_config(path, idx_dataset, out, scheme="star",
                         algorithm="fedinf", seeds=(7,))
            assert main(["train", "--config", str(path)]) == 0
        f1 = out1 / "fedinf-star-s7" / "metrics.ndjson"
        f2 = out2 / "fedinf-star-s7" / "metrics.ndjson"
        assert f1.read_bytes() == f2.read_bytes()

    def test_seed_mean_std_reported(self, tmp_path, idx_dataset):
        out = tmp_path / "runs"
        path = tmp_path / "exp.ini"
        write_config(path, idx_dataset, out, scheme="centralized",
                     algorithm="centralized", seeds=(1, 2, 3))
        assert main(["train", "--config", str(path)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert len(summary["runs"]) == 3
        assert summary["accuracy_std"] is not None


class TestInferCommand:
    def test_infer_from_bundle(self, tmp_path, idx_dataset, capsys):
        out = tmp_path / "runs"
        path = tmp_path / "exp.ini"
        write_config(path, idx_dataset, out, scheme="star",
                     algorithm="fedinf", seeds=(3,))
        assert main(["train", "--config", str(path)]) == 0
        capsys.readouterr()
        bundle = out / "fedinf-star-s3" / "bundle"
        code = main(["infer", "--config", str(path), "--bundle", str(bundle), "--index", "4"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert len(payload["probs"]) == 8
        assert sum(payload["probs"]) == pytest.approx(1.0, abs=1e-9)


class TestVerifyCommand:
    def test_all_suites_pass(self, capsys):
        assert main(["verify", "theorem1", "--instances", "20"]) == 0
        assert main(["verify", "prop1", "--instances", "5"]) == 0
        out = capsys.readouterr().out
        assert "[PASS]" in out and "[FAIL]" not in out

    def test_gradient_suite(self, capsys):
        assert main(["verify", "gradients", "--instances", "5"]) == 0
        assert "[PASS] gradients" in capsys.readouterr().out


class TestPlotCommand:
    def test_curves_and_accuracy_vs_m(self, tmp_path, idx_dataset):
        out = tmp_path / "runs"
        path = tmp_path / "exp.ini"
        run_dirs = []
        for m in (2, 4):
            for seed in (1, 2):
                write_config(path, idx_dataset, out, scheme="cycle", m=m,
                             algorithm="fedavg", seeds=(seed,))
                assert main(["train", "--config", str(path)]) == 0
                run_dirs.append(str(out / f"fedavg-cycle{m}-s{seed}"))
        plots = tmp_path / "plots"
        assert main(["plot", *run_dirs, "--out", str(plots)]) == 0
        assert (plots / "curves.csv").exists()
        assert (plots / "curves-loss.svg").exists()
        csv = (plots / "accuracy_vs_m.csv").read_text().splitlines()
        assert csv[0] == "group,m,accuracy_mean,accuracy_std,n"
        assert len(csv) == 3  # two cycle groups
        svg = (plots / "accuracy_vs_m.svg").read_text()
        assert "<svg" in svg and "polyline" in svg or "circle" in svg

    def test_client_curves_for_fedinf_runs(self, tmp_path, idx_dataset):
        out = tmp_path / "runs"
        path = tmp_path / "exp.ini"
        write_config(path, idx_dataset, out, scheme="star", algorithm="fedinf", seeds=(1,))
        assert main(["train", "--config", str(path)]) == 0
        plots = tmp_path / "plots"
        assert main(["plot", str(out / "fedinf-star-s1"), "--out", str(plots)]) == 0
        csv = (plots / "client-curves-fedinf-star.csv").read_text().splitlines()
        assert csv[0] == "group,client,step,mean,std,n"
        assert len({line.split(",")[1] for line in csv[1:]}) == 7  # one series per client
        svg = (plots / "client-curves-fedinf-star.svg").read_text()
        assert "average" in svg

    def test_single_run_makes_pointless_band(self, tmp_path, idx_dataset):
        out = tmp_path / "runs"
        path = tmp_path / "exp.ini"
        write_config(path, idx_dataset, out, scheme="centralized",
                     algorithm="centralized", seeds=(4,))
        assert main(["train", "--config", str(path)]) == 0
        plots = tmp_path / "plots"
        assert main(["plot", str(out / "centralized-centralized-s4"), "--out", str(plots)]) == 0
        assert (plots / "curves-loss.svg").exists()

    def test_missing_metrics_is_runtime_error(self, tmp_path):
        empty = tmp_path / "empty-run"
        empty.mkdir()
        assert main(["plot", str(empty), "--out", str(tmp_path / "p")]) == 1


class TestExitCodes:
    def test_validation_failure_exit_2(self, tmp_path, idx_dataset):
        path = tmp_path / "exp.ini"
        write_config(path, idx_dataset, tmp_path, scheme="star", algorithm="centralized",
                     m=3)
        assert main(["train", "--config", str(path)]) == 2

    def test_runtime_failure_exit_1(self, tmp_path, idx_dataset):
        path = tmp_path / "exp.ini"
        cfg = write_config(path, idx_dataset, tmp_path, scheme="centralized",
                           algorithm="centralized")
        cfg.train_images = str(idx_dataset / "missing-file")
        dump_config(cfg, path)
        assert main(["train", "--config", str(path)]) == 1
