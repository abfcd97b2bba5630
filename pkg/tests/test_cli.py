"""Tests for the command line and the experiment runner."""

import math
import os
import tempfile
from pathlib import Path
from unittest.mock import patch

import pandas as pd
import pytest

from apps.feature_critic.artifacts import read_json, read_loss_log, read_params
from apps.feature_critic.cli import (
    ExperimentRunner,
    build_parser,
    main,
    run_cell,
    summarise_sweep,
    sweep_vd_scores,
)
from apps.feature_critic.config import load_config
from apps.feature_critic.errors import ConfigError, ModelShapeMismatch, NonFiniteLoss
from apps.feature_critic.gradcheck import CheckResult, GradcheckReport
from apps.feature_critic.metrics import get_metrics

TINY_CONFIG = """\
experiment:
  kind: synthetic
  method: fc-set
  n_domains: 3
  per_class: 4
  n_classes: 3
  image_size: 6
  target_domain: S2
model:
  image_shape: [6, 6]
  feature_dim: 4
  mlp_hidden: [8]
  critic_hidden: [6]
trainer:
  max_steps: 2
  batch_size_trn: 4
  batch_size_val: 4
  log_every: 0
eval:
  knn_k: 1
  kshot: [1]
  kshot_trials: 2
  fractions: [0.5, 1.0]
  probe_epochs: 2
sweep:
  methods: [agg, fc-set]
  targets: [S2]
"""


class TestParser:
    """Argument parsing."""

    def test_train_flags(self):
        args = build_parser().parse_args(
            ["train", "--seed", "3", "--method", "agg", "--override", "trainer.lr=0.1"]
        )
        assert args.command == "train"
        assert args.seed == 3
        assert args.method == "agg"
        assert args.override == ["trainer.lr=0.1"]

    def test_eval_requires_model(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["eval"])

    def test_unknown_method_rejected(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--method", "maml"])

    def test_preset_choices(self):
        args = build_parser().parse_args(["sweep", "--preset", "vd"])
        assert args.preset == "vd"
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--preset", "imagenet"])

    def test_gradcheck_defaults(self):
        args = build_parser().parse_args(["gradcheck"])
        assert args.seed == 0 and args.instances == 20


@patch.dict(os.environ, {}, clear=True)
class TestCommands:
    """train, eval, gradcheck and sweep end to end on a tiny synthetic problem."""

    def setup_method(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)
        self.config_path = self.root / "tiny.yml"
        self.config_path.write_text(TINY_CONFIG)
        self.out = self.root / "runs"

    def teardown_method(self):
        self.temp_dir.cleanup()

    def train(self, *extra) -> Path:
        status = main(
            ["train", "--config", str(self.config_path), "--out", str(self.out)]
            + list(extra)
        )
        assert status == 0
        return self.out / "fc-set" / "S2" / "seed0"

    def test_train_writes_artifacts(self):
        run_dir = self.train()
        params, manifest = read_params(run_dir / "params.bin")
        assert manifest["metadata"]["method"] == "fc-set"
        assert manifest["metadata"]["step"] == 2
        assert {"theta/fc.weight", "head/shared/weight", "omega/out.bias"} <= set(
            params
        )
        assert len(read_loss_log(run_dir / "loss_log.csv")) == 2
        summary = read_json(run_dir / "run_summary.json")
        assert set(summary) == {
            "config",
            "final_losses",
            "meta_loss_pattern",
            "fingerprint",
            "timing",
        }
        pattern = summary["meta_loss_pattern"]
        assert len(pattern["window_means"]) == 1
        assert pattern["final_mean"] == pytest.approx(
            read_loss_log(run_dir / "loss_log.csv")["meta"].mean()
        )
        assert isinstance(pattern["matches_pattern"], bool)

    def test_same_seed_gives_identical_artifacts(self):
        first = self.train()
        for name in ("loss_log.csv", "params.bin"):
            (first / name).rename(self.root / name)
        second = self.train()
        assert main(["eval", "--model", str(second)]) == 0
        first_results = (second / "results.json").read_bytes()
        assert main(["eval", "--model", str(second)]) == 0
        for name in ("loss_log.csv", "params.bin"):
            assert (second / name).read_bytes() == (self.root / name).read_bytes()
        assert (second / "results.json").read_bytes() == first_results

    def test_eval_uses_stored_config(self):
        run_dir = self.train()
        status = main(
            ["eval", "--model", str(run_dir), "--kshot", "--fractions", "--pca"]
        )
        assert status == 0
        results = read_json(run_dir / "results.json")
        assert results["target"] == "S2"
        assert results["accuracy"] == results["direct_accuracy"]
        assert 0.0 <= results["knn_accuracy"] <= 1.0
        assert [row["k_shot"] for row in results["kshot"]] == [1]
        for name in ("kshot.csv", "fractions.csv", "pca_scatter.csv"):
            assert (run_dir / name).exists()
        # every target image, train and test split alike
        assert len(pd.read_csv(run_dir / "pca_scatter.csv")) == 12

    def test_eval_with_baseline_adds_vd_score(self):
        run_dir = self.train()
        assert main(["eval", "--model", str(run_dir)]) == 0
        baseline = self.root / "baseline.json"
        baseline.write_text((run_dir / "results.json").read_text())
        assert main(["eval", "--model", str(run_dir), "--baseline", str(baseline)]) == 0
        assert isinstance(read_json(run_dir / "results.json")["vd_score"], int)

    def test_eval_rejects_mismatched_architecture(self):
        run_dir = self.train()
        status = main(
            [
                "eval",
                "--model",
                str(run_dir),
                "--config",
                str(self.config_path),
                "--override",
                "model.feature_dim=5",
            ]
        )
        assert status == 1

    def test_missing_dataset_returns_one(self):
        empty = self.root / "mnist"
        empty.mkdir()
        status = main(
            [
                "train",
                "--preset",
                "rotated-mnist",
                "--data-root",
                str(empty),
                "--out",
                str(self.out),
            ]
        )
        assert status == 1
        text = get_metrics().get_metrics_text()
        assert (
            'fc_errors_total{component="train",error_type="DatasetNotFound"} 1.0'
            in text
        )

    def test_missing_model_returns_one(self):
        status = main(["eval", "--model", str(self.root / "nowhere" / "params.bin")])
        assert status == 1
        text = get_metrics().get_metrics_text()
        assert 'component="io",error_type="FileNotFoundError"' in text

    def test_config_error_returns_one(self):
        status = main(
            ["train", "--config", str(self.config_path), "--override", "trainer.lr=-1"]
        )
        assert status == 1

    @patch("apps.feature_critic.cli.run_gradcheck")
    def test_gradcheck_exit_code(self, mock_run):
        mock_run.return_value = GradcheckReport([CheckResult("ok", 0.0, 1e-5)])
        assert main(["gradcheck", "--instances", "1"]) == 0
        mock_run.assert_called_with(seed=0, instances=1)

        mock_run.return_value = GradcheckReport([CheckResult("bad", 1.0, 1e-5)])
        assert main(["gradcheck"]) == 1

    def test_sweep_writes_table(self):
        status = main(
            [
                "sweep",
                "--config",
                str(self.config_path),
                "--out",
                str(self.out),
                "--seeds",
                "0",
                "1",
            ]
        )
        assert status == 0
        table = pd.read_csv(self.out / "sweep_table.csv")
        assert table["target"].tolist() == ["S2", "average"]
        assert "fc-set_minus_agg" in table.columns
        results = read_json(self.out / "sweep_results.json")
        assert results["failed_cells"] == 0
        assert results["seeds"] == [0, 1]


class TestRunner:
    """ExperimentRunner pieces that need no training."""

    def setup_method(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        path = Path(self.temp_dir.name) / "tiny.yml"
        path.write_text(TINY_CONFIG)
        with patch.dict(os.environ, {}, clear=True):
            self.config = load_config(str(path))

    def teardown_method(self):
        self.temp_dir.cleanup()

    def test_targets_and_run_dir(self):
        runner = ExperimentRunner(self.config)
        assert runner.target_names() == ["S0", "S1", "S2"]
        assert runner.run_dir("S1", 4) == Path("runs") / "fc-set" / "S1" / "seed4"

    def test_unknown_target(self):
        with pytest.raises(ConfigError):
            ExperimentRunner(self.config).domain_set("S7")

    def test_image_shape_must_match_data(self):
        config = self.config.with_values(model={"image_shape": [8, 8]})
        with pytest.raises(ConfigError) as excinfo:
            ExperimentRunner(config).domains
        assert excinfo.value.key == "model.image_shape"

    def test_check_shapes_needs_theta(self):
        with pytest.raises(ModelShapeMismatch):
            ExperimentRunner(self.config).check_shapes({})

    def test_missing_dataset_cell_is_reported(self):
        config = self.config.with_values(
            experiment={"kind": "rotated-mnist", "data_root": self.temp_dir.name}
        )
        row = run_cell(config.to_dict(), "agg", "M0", 0)
        assert math.isnan(row["accuracy"])
        assert row["error"].startswith("DatasetNotFound")

    def test_failed_cell_is_reported_not_raised(self):
        with patch.object(
            ExperimentRunner, "train", side_effect=NonFiniteLoss("loss is nan", 1)
        ):
            row = run_cell(self.config.to_dict(), "agg", "S2", 0)
        assert math.isnan(row["accuracy"])
        assert row["error"].startswith("NonFiniteLoss")
        assert (row["method"], row["target"], row["seed"]) == ("agg", "S2", 0)


class TestSweepSummary:
    """Comparison table layout."""

    def setup_method(self):
        self.cells = pd.DataFrame(
            [
                {"method": m, "target": t, "seed": s, "accuracy": acc, "error": ""}
                for m, t, s, acc in [
                    ("agg", "A", 0, 0.5),
                    ("agg", "A", 1, 0.7),
                    ("agg", "B", 0, 0.9),
                    ("agg", "B", 1, 0.9),
                    ("fc-set", "A", 0, 0.6),
                    ("fc-set", "A", 1, 0.8),
                    ("fc-set", "B", 0, 0.9),
                    ("fc-set", "B", 1, math.nan),
                ]
            ]
        )

    def test_rows_and_columns(self):
        table = summarise_sweep(self.cells, ["agg", "fc-set"])
        assert table["target"].tolist() == ["A", "B", "average"]
        row_a = table.iloc[0]
        assert row_a["agg_mean"] == pytest.approx(0.6)
        assert row_a["agg_std"] == pytest.approx(0.1)
        assert row_a["fc-set_minus_agg"] == pytest.approx(0.1)
        # failed cells are skipped
        assert table.iloc[1]["fc-set_mean"] == pytest.approx(0.9)
        assert table.iloc[2]["agg_mean"] == pytest.approx(0.75)

    def test_vd_scores_use_agg_baseline(self):
        scores = sweep_vd_scores(self.cells, ["agg", "fc-set"])
        assert set(scores) == {"agg", "fc-set"}
        assert scores["agg"] == 500
        assert sweep_vd_scores(self.cells, ["fc-set"]) == {}
