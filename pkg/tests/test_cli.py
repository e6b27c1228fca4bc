"""Command-line behavior: exit codes, determinism, config handling, and
output layout."""

import json
from pathlib import Path

import pytest

from monoconvkt.cli import main


def run(args):
    return main(args)


def find_run_dirs(out_dir):
    return sorted(p for p in Path(out_dir).iterdir() if p.is_dir())


FAST = ["--students", "60", "--questions", "10", "--concepts", "3",
        "--min-interactions", "6", "--max-interactions", "15",
        "--hidden", "16", "--layers", "1", "--heads", "4",
        "--epochs", "2", "--batch-size", "16", "--folds", "1"]


class TestGenData:
    def test_writes_parseable_csv(self, tmp_path):
        out = tmp_path / "synth.csv"
        code = run(["gen-data", "--out", str(out), "--students", "12",
                    "--questions", "6", "--concepts", "2", "--seed", "3"])
        assert code == 0
        from monoconvkt.data import load_interactions
        log = load_interactions(out)
        assert len({r.student for r in log.records}) == 12

    def test_refuses_silent_overwrite(self, tmp_path):
        out = tmp_path / "synth.csv"
        assert run(["gen-data", "--out", str(out), "--students", "6",
                    "--questions", "4", "--concepts", "2"]) == 0
        assert run(["gen-data", "--out", str(out), "--students", "6",
                    "--questions", "4", "--concepts", "2"]) == 2
        assert run(["gen-data", "--out", str(out), "--force", "--students", "6",
                    "--questions", "4", "--concepts", "2"]) == 0

    def test_deterministic_per_seed(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            run(["gen-data", "--out", str(out), "--students", "10",
                 "--questions", "5", "--concepts", "2", "--seed", "11"])
        assert a.read_bytes() == b.read_bytes()


class TestTrainCommand:
    def test_missing_data_source_exits_2(self, tmp_path):
        assert run(["train", "--out-dir", str(tmp_path)]) == 2

    def test_synthetic_train_writes_report_and_figures(self, tmp_path):
        code = run(["train", "--synthetic", "--seed", "5",
                    "--out-dir", str(tmp_path)] + FAST)
        assert code == 0
        (run_dir,) = find_run_dirs(tmp_path)
        report = json.loads((run_dir / "report.json").read_text())
        assert report["config"]["model"]["attention"] == "monoconv"
        assert report["config"]["model"]["embedding"] == "ctt"
        assert len(report["folds"]) == 1
        assert (run_dir / "checkpoint_fold0.npz").exists()
        assert (run_dir / "training_curves.png").exists()

    def test_same_seed_identical_reports(self, tmp_path):
        for _ in range(2):
            assert run(["train", "--synthetic", "--seed", "7",
                        "--out-dir", str(tmp_path)] + FAST) == 0
        dirs = find_run_dirs(tmp_path)
        assert len(dirs) == 2
        r1 = (dirs[0] / "report.json").read_bytes()
        r2 = (dirs[1] / "report.json").read_bytes()
        assert r1 == r2

    def test_flags_recorded_verbatim(self, tmp_path):
        assert run(["train", "--synthetic", "--seed", "2", "--attention", "mono",
                    "--embedding", "rasch-cr", "--out-dir", str(tmp_path)] + FAST) == 0
        (run_dir,) = find_run_dirs(tmp_path)
        report = json.loads((run_dir / "report.json").read_text())
        assert report["config"]["model"]["attention"] == "mono"
        assert report["config"]["model"]["embedding"] == "rasch-cr"

    def test_csv_data_path(self, tmp_path):
        data = tmp_path / "data.csv"
        run(["gen-data", "--out", str(data), "--students", "60",
             "--questions", "10", "--concepts", "3", "--seed", "9",
             "--min-interactions", "6", "--max-interactions", "15"])
        code = run(["train", "--data", str(data), "--seed", "9",
                    "--out-dir", str(tmp_path / "runs")] + FAST)
        assert code == 0

    def test_bad_csv_exits_4(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("student_id,question_id,concept_id,correct\ns1,q1,c1,2\n")
        assert run(["train", "--data", str(bad),
                    "--out-dir", str(tmp_path / "runs")] + FAST) == 4

    def test_invalid_model_shape_exits_2(self, tmp_path):
        assert run(["train", "--synthetic", "--hidden", "30",
                    "--out-dir", str(tmp_path)]) == 2


class TestConfigFile:
    def test_config_file_applies_and_flags_win(self, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[model]\nhidden = 16\nlayers = 1\nheads = 4\n"
                       "attention = vanilla\n"
                       "[train]\nepochs = 2\nbatch_size = 16\nfolds = 1\n"
                       "[data]\nsynthetic = true\nstudents = 60\nquestions = 10\n"
                       "concepts = 3\nmin_interactions = 6\nmax_interactions = 15\n")
        code = run(["train", "--config", str(cfg), "--attention", "mono",
                    "--seed", "4", "--out-dir", str(tmp_path / "runs")])
        assert code == 0
        (run_dir,) = find_run_dirs(tmp_path / "runs")
        report = json.loads((run_dir / "report.json").read_text())
        assert report["config"]["model"]["attention"] == "mono"
        assert report["config"]["model"]["hidden"] == 16

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[model]\nhiden = 16\n")
        assert run(["train", "--config", str(cfg), "--synthetic",
                    "--out-dir", str(tmp_path)]) == 2

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[wandb]\nproject = kt\n")
        assert run(["train", "--config", str(cfg), "--synthetic",
                    "--out-dir", str(tmp_path)]) == 2


class TestAblateCommand:
    def test_attention_grid_has_four_cells(self, tmp_path):
        code = run(["ablate", "--grid", "attention", "--synthetic", "--seed", "3",
                    "--out-dir", str(tmp_path)] + FAST)
        assert code == 0
        (run_dir,) = find_run_dirs(tmp_path)
        reports = sorted(run_dir.glob("report_*.json"))
        assert len(reports) == 4
        summary = (run_dir / "summary.csv").read_text().strip().splitlines()
        assert summary[0] == "cell,mean_auc,std_auc,mean_rmse"
        assert len(summary) == 5
        aucs = [float(line.split(",")[1]) for line in summary[1:]]
        assert aucs == sorted(aucs, reverse=True)
        assert (run_dir / "summary.png").exists()

    def test_embedding_grid_has_four_cells(self, tmp_path):
        code = run(["ablate", "--grid", "embedding", "--synthetic", "--seed", "3",
                    "--out-dir", str(tmp_path)] + FAST)
        assert code == 0
        (run_dir,) = find_run_dirs(tmp_path)
        assert len(sorted(run_dir.glob("report_*.json"))) == 4


@pytest.fixture(scope="module")
def trained_checkpoint(tmp_path_factory):
    base = tmp_path_factory.mktemp("train")
    assert run(["train", "--synthetic", "--seed", "6",
                "--out-dir", str(base)] + FAST) == 0
    (run_dir,) = find_run_dirs(base)
    return run_dir / "checkpoint_fold0.npz"


class TestAnalyzeCommand:
    def test_outputs_created(self, trained_checkpoint, tmp_path):
        code = run(["analyze", "--checkpoint", str(trained_checkpoint),
                    "--synthetic", "--seed", "6", "--out-dir", str(tmp_path)] + FAST)
        assert code == 0
        (run_dir,) = find_run_dirs(tmp_path)
        for name in ("importance.csv", "distance_profile.csv",
                     "concept_graph.csv", "embeddings.csv",
                     "importance.png", "distance_profile.png",
                     "concept_graph.png"):
            assert (run_dir / name).exists(), name
        assert list((run_dir / "attention_maps").glob("*.csv"))
        header = (run_dir / "importance.csv").read_text().splitlines()[0]
        assert header == "layer,ma_share,sdc_share"

    def test_corrupted_checkpoint_exits_3(self, tmp_path):
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"garbage")
        assert run(["analyze", "--checkpoint", str(bad), "--synthetic",
                    "--out-dir", str(tmp_path)] + FAST) == 3

    def test_vocabulary_mismatch_exits_3(self, trained_checkpoint, tmp_path):
        args = ["analyze", "--checkpoint", str(trained_checkpoint),
                "--synthetic", "--seed", "6", "--out-dir", str(tmp_path)] + FAST
        args[args.index("--questions") + 1] = "11"
        assert run(args) == 3

    def test_threshold_inclusion_via_cli(self, trained_checkpoint, tmp_path):
        edges = {}
        for thr in ("0.02", "0.2"):
            out = tmp_path / f"t{thr}"
            assert run(["analyze", "--checkpoint", str(trained_checkpoint),
                        "--synthetic", "--seed", "6", "--graph-threshold", thr,
                        "--out-dir", str(out)] + FAST) == 0
            (run_dir,) = find_run_dirs(out)
            lines = (run_dir / "concept_graph.csv").read_text().splitlines()[1:]
            edges[thr] = {tuple(l.split(",")[:2]) for l in lines}
        assert edges["0.2"] <= edges["0.02"]


class TestAlternativeScoreAlgebra:
    def test_literal_eq7_flag_trains_and_is_recorded(self, tmp_path):
        code = run(["train", "--synthetic", "--seed", "8", "--literal-eq7",
                    "--out-dir", str(tmp_path)] + FAST)
        assert code == 0
        (run_dir,) = find_run_dirs(tmp_path)
        report = json.loads((run_dir / "report.json").read_text())
        assert report["config"]["model"]["literal_decay"] is True


class TestAnalyzeOtherVariants:
    def test_vanilla_checkpoint_skips_importance_only(self, tmp_path):
        train_dir = tmp_path / "train"
        assert run(["train", "--synthetic", "--seed", "4", "--attention",
                    "vanilla", "--out-dir", str(train_dir)] + FAST) == 0
        (rd,) = find_run_dirs(train_dir)
        out = tmp_path / "analysis"
        assert run(["analyze", "--checkpoint", str(rd / "checkpoint_fold0.npz"),
                    "--synthetic", "--seed", "4", "--attention", "vanilla",
                    "--out-dir", str(out)] + FAST) == 0
        (ad,) = find_run_dirs(out)
        assert not (ad / "importance.csv").exists()
        assert (ad / "distance_profile.csv").exists()
        assert (ad / "embeddings.csv").exists()

    def test_conv_checkpoint_exports_embeddings_only(self, tmp_path):
        train_dir = tmp_path / "train"
        assert run(["train", "--synthetic", "--seed", "4", "--attention",
                    "conv", "--out-dir", str(train_dir)] + FAST) == 0
        (rd,) = find_run_dirs(train_dir)
        out = tmp_path / "analysis"
        assert run(["analyze", "--checkpoint", str(rd / "checkpoint_fold0.npz"),
                    "--synthetic", "--seed", "4", "--attention", "conv",
                    "--out-dir", str(out)] + FAST) == 0
        (ad,) = find_run_dirs(out)
        assert not (ad / "importance.csv").exists()
        assert not (ad / "distance_profile.csv").exists()
        assert (ad / "embeddings.csv").exists()

    def test_causal_gamma_flag_trains(self, tmp_path):
        code = run(["train", "--synthetic", "--seed", "5", "--causal-gamma",
                    "--out-dir", str(tmp_path)] + FAST)
        assert code == 0
        (rd,) = find_run_dirs(tmp_path)
        report = json.loads((rd / "report.json").read_text())
        assert report["config"]["model"]["causal_gamma"] is True
