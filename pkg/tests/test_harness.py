"""CLI surface: corpus synthesis, run directories, sweeps, reports."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from spikefuse.errors import ConfigError
from spikefuse.harness import (
    ExperimentCell,
    ExperimentPlan,
    aggregate_records,
    load_corpus,
    main,
    plan_from_dict,
    synth_corpus,
)

TINY_ARCH = "Input-4C3-BN-AP2-4C3-BN-VotingC4P2-AP"


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    train_dir = root / "train"
    test_dir = root / "test"
    synth_corpus(train_dir, classes=4, n_per_class=6, height=16, width=16,
                 duration_ms=500.0, rate=2.0, seed=101)
    synth_corpus(test_dir, classes=4, n_per_class=3, height=16, width=16,
                 duration_ms=500.0, rate=2.0, seed=202)
    return train_dir, test_dir


def config_doc(train_dir, test_dir, **overrides):
    doc = {
        "arch": TINY_ARCH,
        "variant": "bl",
        "epochs": 1,
        "batch_size": 8,
        "lr": 0.004,
        "lr_decay": 0.97,
        "seed": 5,
        "input_height": 16,
        "input_width": 16,
        "lif": {"v_th": 1.0, "kappa": 0.7},
        "data": {
            "delta_t_ms": 50.0,
            "timesteps": 5,
            "train_dir": str(train_dir),
            "test_dir": str(test_dir),
        },
    }
    doc.update(overrides)
    return doc


class TestSynth:
    def test_file_count_and_manifest(self, tmp_path):
        rows = synth_corpus(tmp_path / "c", 4, 5, 16, 16, 500.0, 2.0, seed=9)
        assert len(rows) == 20
        files = sorted((tmp_path / "c").glob("*.evs"))
        assert len(files) == 20
        manifest = (tmp_path / "c" / "manifest.tsv").read_text().splitlines()
        assert len(manifest) == 21  # header + rows

    def test_histogram_uniform(self, tmp_path):
        rows = synth_corpus(tmp_path / "c", 4, 5, 16, 16, 500.0, 2.0, seed=9)
        labels = [r["label"] for r in rows]
        assert all(labels.count(c) == 5 for c in range(4))

    def test_same_seed_byte_identical(self, tmp_path):
        synth_corpus(tmp_path / "a", 2, 3, 16, 16, 500.0, 2.0, seed=4)
        synth_corpus(tmp_path / "b", 2, 3, 16, 16, 500.0, 2.0, seed=4)
        for fa in sorted((tmp_path / "a").iterdir()):
            fb = tmp_path / "b" / fa.name
            assert fa.read_bytes() == fb.read_bytes()

    def test_load_round_trip(self, tmp_path):
        synth_corpus(tmp_path / "c", 3, 2, 16, 16, 500.0, 2.0, seed=4)
        streams = load_corpus(tmp_path / "c")
        assert len(streams) == 6
        assert sorted({s.label for s in streams}) == [0, 1, 2]

    def test_cli_entry(self, tmp_path, capsys):
        rc = main(["synth", "--out", str(tmp_path / "c"), "--classes", "2",
                   "--n-per-class", "2", "--seed", "3"])
        assert rc == 0
        assert "4 streams" in capsys.readouterr().out


class TestTrainCommand:
    def test_run_directory_contents(self, corpus, tmp_path):
        train_dir, test_dir = corpus
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config_doc(train_dir, test_dir)))
        rc = main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "runs")])
        assert rc == 0
        run_dir = tmp_path / "runs" / "run_seed5_bl"
        assert (run_dir / "run_record.json").exists()
        assert (run_dir / "timing.json").exists()
        assert (run_dir / "checkpoint.bin").exists()
        assert (run_dir / "checkpoint.manifest.tsv").exists()

    def test_rerun_requires_force_and_is_bitwise(self, corpus, tmp_path):
        train_dir, test_dir = corpus
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config_doc(train_dir, test_dir)))
        out = str(tmp_path / "runs")
        assert main(["train", "--config", str(cfg_path), "--out", out]) == 0
        record = (Path(out) / "run_seed5_bl" / "run_record.json").read_bytes()
        checkpoint = (Path(out) / "run_seed5_bl" / "checkpoint.bin").read_bytes()
        # rerun without --force refuses
        assert main(["train", "--config", str(cfg_path), "--out", out]) == 2
        # rerun with --force reproduces the record bitwise
        assert main(["train", "--config", str(cfg_path), "--out", out, "--force"]) == 0
        assert (Path(out) / "run_seed5_bl" / "run_record.json").read_bytes() == record
        assert (Path(out) / "run_seed5_bl" / "checkpoint.bin").read_bytes() == checkpoint

    def test_invalid_config_names_field(self, corpus, tmp_path, capsys):
        train_dir, test_dir = corpus
        doc = config_doc(train_dir, test_dir)
        del doc["lif"]["v_th"]
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps(doc))
        rc = main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "r")])
        assert rc == 2
        assert "lif.v_th" in capsys.readouterr().err

    def test_seed_override_flag(self, corpus, tmp_path):
        train_dir, test_dir = corpus
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config_doc(train_dir, test_dir)))
        rc = main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "runs"),
                   "--seed", "77"])
        assert rc == 0
        assert (tmp_path / "runs" / "run_seed77_bl" / "run_record.json").exists()


class TestPlans:
    def test_grid_expansion(self):
        plan = plan_from_dict(
            {"base_config": config_doc("x", "y"), "variants": ["bl", "sctfa"], "seeds": [1, 2]}
        )
        assert len(plan.cells) == 4

    def test_duplicate_cells_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentPlan(
                base=config_doc("x", "y"),
                cells=[ExperimentCell("bl", 0.7, 1), ExperimentCell("bl", 0.7, 1)],
            )

    def test_cell_config_overrides(self):
        plan = plan_from_dict(
            {"base_config": config_doc("x", "y"), "variants": ["sctfa"], "seeds": [9]}
        )
        cfg = plan.cell_config(plan.cells[0])
        assert cfg.variant == "sctfa" and cfg.seed == 9


class TestAblate:
    def test_two_by_one_grid(self, corpus, tmp_path):
        train_dir, test_dir = corpus
        plan = {
            "base_config": config_doc(train_dir, test_dir),
            "variants": ["bl", "sctfa"],
            "seeds": [1],
            "master_seed": 42,
        }
        plan_path = tmp_path / "plan.json"
        plan_path.write_text(json.dumps(plan))
        out = tmp_path / "ablate"
        rc = main(["ablate", "--plan", str(plan_path), "--out", str(out)])
        assert rc == 0
        with open(out / "table.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["variant"] for r in rows] == ["bl", "sctfa"]
        assert all(r["trials"] == "1" for r in rows)
        assert all(r["std_acc"] == "" for r in rows)  # std needs >= 2 trials
        assert all(r["master_seed"] == "42" for r in rows)
        assert (out / "run_bl_k0.7_s1" / "run_record.json").exists()

    def test_table_regenerated_from_disk_bitwise(self, corpus, tmp_path):
        from spikefuse.harness import _write_table, summaries_from_run_dirs

        train_dir, test_dir = corpus
        plan = {
            "base_config": config_doc(train_dir, test_dir),
            "variants": ["bl", "stfa"],
            "seeds": [3],
            "master_seed": 7,
        }
        plan_path = tmp_path / "plan.json"
        plan_path.write_text(json.dumps(plan))
        out = tmp_path / "ablate"
        assert main(["ablate", "--plan", str(plan_path), "--out", str(out)]) == 0
        rebuilt = aggregate_records(
            summaries_from_run_dirs(out), lambda r: {"variant": r["variant"]}
        )
        _write_table(tmp_path / "again.csv", rebuilt, ["variant"], {"master_seed": 7})
        assert (tmp_path / "again.csv").read_bytes() == (out / "table.csv").read_bytes()

    def test_aggregation_pure(self, corpus, tmp_path):
        train_dir, test_dir = corpus
        summaries = [
            {"variant": "bl", "kappa": 0.7, "seed": 1, "best_acc": 0.5, "status": "complete"},
            {"variant": "bl", "kappa": 0.7, "seed": 2, "best_acc": 0.7, "status": "complete"},
            {"variant": "sctfa", "kappa": 0.7, "seed": 1, "best_acc": 0.9, "status": "complete"},
        ]
        rows1 = aggregate_records(summaries, lambda r: {"variant": r["variant"]})
        rows2 = aggregate_records(list(reversed(summaries)), lambda r: {"variant": r["variant"]})
        assert rows1 == rows2
        bl = rows1[0]
        assert bl.mean_acc == pytest.approx(0.6)
        assert bl.best_acc == 0.7
        assert bl.std_acc == pytest.approx(np.std([0.5, 0.7], ddof=1))

    def test_incomplete_cell_marks_row(self):
        rows = aggregate_records(
            [
                {"variant": "bl", "best_acc": 0.5, "status": "complete"},
                {"variant": "bl", "best_acc": float("nan"), "status": "diverged"},
            ],
            lambda r: {"variant": r["variant"]},
        )
        assert rows[0].status == "incomplete"
        assert rows[0].trials == 1


class TestWorkerPool:
    def test_threaded_plan_matches_sequential(self, corpus, tmp_path):
        train_dir, test_dir = corpus
        from spikefuse.harness import run_plan

        plan = plan_from_dict(
            {"base_config": config_doc(train_dir, test_dir), "variants": ["bl", "stfa"],
             "seeds": [1]}
        )
        seq = run_plan(plan, tmp_path / "seq", threads=1)
        par = run_plan(plan, tmp_path / "par", threads=2)
        for a, b in zip(seq, par):
            assert a["best_acc"] == b["best_acc"]
        rec_a = (tmp_path / "seq" / "run_bl_k0.7_s1" / "run_record.json").read_bytes()
        rec_b = (tmp_path / "par" / "run_bl_k0.7_s1" / "run_record.json").read_bytes()
        assert rec_a == rec_b


class TestSweepKappa:
    def test_csv_columns_and_rows(self, corpus, tmp_path):
        train_dir, test_dir = corpus
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config_doc(train_dir, test_dir, variant="sctfa")))
        out = tmp_path / "sweep"
        rc = main([
            "sweep-kappa", "--config", str(cfg_path), "--kappas", "0.4,0.7",
            "--seeds", "1", "--out", str(out),
        ])
        assert rc == 0
        with open(out / "table.csv") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        assert header == ["kappa", "mean_acc", "std_acc", "best_acc"]
        assert [r[0] for r in rows] == ["0.4", "0.7"]

    def test_kappa_outside_range_rejected(self, corpus, tmp_path, capsys):
        train_dir, test_dir = corpus
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config_doc(train_dir, test_dir)))
        rc = main([
            "sweep-kappa", "--config", str(cfg_path), "--kappas", "0.5,1.4",
            "--seeds", "1", "--out", str(tmp_path / "s"),
        ])
        assert rc == 2
        assert "kappa" in capsys.readouterr().err


@pytest.fixture(scope="module")
def run_dir(corpus, tmp_path_factory):
    train_dir, test_dir = corpus
    tmp = tmp_path_factory.mktemp("rb")
    cfg_path = tmp / "cfg.json"
    cfg_path.write_text(json.dumps(config_doc(train_dir, test_dir, epochs=2)))
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp / "runs")]) == 0
    return tmp / "runs" / "run_seed5_bl"


class TestRobustnessCommand:

    def test_zero_levels_match_clean(self, corpus, run_dir, tmp_path):
        _, test_dir = corpus
        out = tmp_path / "rb"
        rc = main([
            "robustness", "--checkpoint", str(run_dir / "checkpoint.bin"),
            "--data", str(test_dir), "--noise", "0,1.0",
            "--event-loss", "0", "--frame-loss", "0",
            "--seed", "3", "--out", str(out),
        ])
        assert rc == 0
        with open(out / "robustness.csv") as fh:
            rows = list(csv.DictReader(fh))
        clean = [r for r in rows if r["kind"] == "clean"][0]
        for kind in ("poisson_noise", "event_loss", "frame_loss"):
            level0 = [r for r in rows if r["kind"] == kind and float(r["level"]) == 0.0
                      and r["metric"] == "accuracy"][0]
            assert level0["value"] == clean["value"]
        dist0 = [r for r in rows if r["kind"] == "poisson_noise" and float(r["level"]) == 0.0
                 and r["metric"] == "activation_distance"][0]
        assert float(dist0["value"]) == 0.0

    def test_eval_command(self, corpus, run_dir, capsys):
        _, test_dir = corpus
        rc = main(["eval", "--checkpoint", str(run_dir / "checkpoint.bin"),
                   "--data", str(test_dir)])
        assert rc == 0
        assert "accuracy:" in capsys.readouterr().out


class TestComplexity:
    def test_preset_counts(self, capsys):
        rc = main(["complexity", "--arch", "mnist_dvs", "--variant", "bl",
                   "--timesteps", "20", "--no-timing"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "parameters: 4316434" in out
        assert "mult_adds(T=20): 1096273920" in out

    def test_counting_only_arch_without_voting(self, capsys):
        rc = main(["complexity", "--arch", "Input-1C1", "--height", "8", "--width", "8",
                   "--no-timing"])
        assert rc == 0
        assert "parameters: 3" in capsys.readouterr().out

    def test_timing_runs_on_tiny_net(self, capsys):
        rc = main(["complexity", "--arch", TINY_ARCH, "--variant", "sctfa",
                   "--height", "16", "--width", "16", "--timesteps", "5",
                   "--batch", "2"])
        assert rc == 0
        assert "inference_ms_per_batch" in capsys.readouterr().out

    def test_attention_delta_closed_form(self, capsys):
        main(["complexity", "--arch", "dvs_gesture", "--variant", "bl", "--no-timing"])
        bl = int(capsys.readouterr().out.splitlines()[0].split(": ")[1])
        main(["complexity", "--arch", "dvs_gesture", "--variant", "sctfa", "--no-timing"])
        sc = int(capsys.readouterr().out.splitlines()[0].split(": ")[1])
        # five conv layers of 128 channels, r=4
        assert sc - bl == 5 * (128 + 1 + 2 * 128 * 128 // 4)
