#!/usr/bin/env python3
"""
Feature-Critic Command Line

Commands:
    train      train one method on one held-out target, write artifacts
    eval       evaluate a trained model on its target domain
    gradcheck  finite-difference checks of the gradients, nonzero exit on failure
    sweep      seeds x targets x methods, mean +/- std comparison table
"""

import argparse
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from prometheus_client import CollectorRegistry

from . import __version__
from .artifacts import (
    read_json,
    read_loss_log,
    read_params,
    save_params,
    unpack,
    write_json,
    write_loss_log,
    write_table,
)
from .autodiff import ParamSet
from .config import PRESETS, RunConfig, load_config
from .data import (
    Domain,
    DomainSet,
    heterogeneous_split,
    holdout,
    load_mnist,
    make_rotated_domains,
    synth_domains,
)
from .errors import ConfigError, FeatureCriticError, ModelShapeMismatch
from .evaluation import (
    accuracy,
    direct_accuracy,
    extract_frozen,
    fraction_eval,
    kshot_table,
    knn_predict,
    linear_probe,
    probe_predict,
    scatter_frame,
    vd_score,
)
from .gradcheck import run_gradcheck
from .meta import SHARED_HEAD, FeatureCriticTrainer, meta_loss_pattern
from .metrics import MetricsServer, TrainingMetrics, get_metrics, initialize_metrics
from .models import FeatureCritic, FeatureExtractor

logger = logging.getLogger(__name__)


# Domain set construction draws from its own stream so the target split
# does not depend on the training seed.
_TARGET_SPLIT_STREAM = 7


class ExperimentRunner:
    """Builds domains, trains one (method, target, seed) cell and evaluates it."""

    def __init__(self, config: RunConfig, metrics: Optional[TrainingMetrics] = None):
        self.config = config
        self.metrics = metrics
        self._domains: Optional[List[Domain]] = None

    # -- data -----------------------------------------------------------------

    @property
    def domains(self) -> List[Domain]:
        if self._domains is None:
            self._domains = self._build_domains()
        return self._domains

    def _build_domains(self) -> List[Domain]:
        exp = self.config.experiment
        rng = np.random.default_rng(exp.data_seed)
        if exp.kind == "rotated-mnist":
            images, labels = load_mnist(exp.data_root)
            domains = make_rotated_domains(
                images, labels, exp.per_class, exp.angles, rng, exp.n_classes
            )
        else:
            domains = synth_domains(
                exp.n_domains,
                exp.per_class,
                exp.n_classes,
                exp.synth_shift,
                rng,
                exp.image_size,
                exp.synth_noise,
            )
        shape = tuple(domains[0].images.shape[1:])
        if shape != tuple(self.config.model.image_shape):
            raise ConfigError(
                f"data images are {shape} but the model expects "
                f"{tuple(self.config.model.image_shape)}",
                "model.image_shape",
            )
        return domains

    def target_names(self) -> List[str]:
        return [d.name for d in self.domains]

    def default_target(self) -> str:
        return self.config.experiment.target_domain or self.domains[-1].name

    def domain_set(self, target: Optional[str] = None) -> DomainSet:
        exp = self.config.experiment
        target = target or self.default_target()
        rng = np.random.default_rng([exp.data_seed, _TARGET_SPLIT_STREAM])
        if exp.heterogeneous:
            matches = [d.id for d in self.domains if d.name == target]
            if not matches:
                raise ConfigError(
                    f"no domain named {target!r}", "experiment.target_domain"
                )
            return heterogeneous_split(
                self.domains,
                exp.source_classes,
                exp.target_classes,
                rng,
                target_id=matches[0],
                test_fraction=exp.target_test_fraction,
            )
        try:
            return holdout(self.domains, target, rng, exp.target_test_fraction)
        except KeyError as e:
            raise ConfigError(str(e), "experiment.target_domain") from e

    # -- train ----------------------------------------------------------------

    def run_dir(self, target: str, seed: int, method: Optional[str] = None) -> Path:
        method = method or self.config.experiment.method
        return Path(self.config.experiment.output_dir) / method / target / f"seed{seed}"

    def train(self, seed: int, target: Optional[str] = None) -> Path:
        target = target or self.default_target()
        out = self.run_dir(target, seed)
        started_at = datetime.now(timezone.utc).isoformat()
        started = time.perf_counter()

        domains = self.domain_set(target)
        trainer = FeatureCriticTrainer(self.config, domains, self.metrics, out)
        state, log = trainer.train(seed)

        metadata = {
            "method": self.config.experiment.method,
            "target": target,
            "seed": seed,
            "step": state.step,
            "config": self.config.to_dict(),
        }
        save_params(out / "params.bin", state.as_params(), metadata)
        log_path = write_loss_log(out / "loss_log.csv", log.to_frame())
        pattern = meta_loss_pattern(read_loss_log(log_path))
        logger.info(
            f"Meta-loss window means {[round(m, 4) for m in pattern.window_means]}, "
            f"first positive {pattern.first_positive}, "
            f"first negative {pattern.first_negative}, "
            f"matches pattern: {pattern.matches_pattern}"
        )
        wall = time.perf_counter() - started
        write_json(
            out / "run_summary.json",
            {
                "config": self.config.to_dict(),
                "final_losses": log.last(),
                "meta_loss_pattern": asdict(pattern),
                "fingerprint": state.theta.fingerprint(),
                "timing": {"started": started_at, "wall_seconds": wall},
            },
        )
        logger.info(f"Artifacts written to {out} ({wall:.1f}s)")
        return out

    # -- eval -----------------------------------------------------------------

    def check_shapes(self, groups: Dict[str, ParamSet]) -> None:
        rng = np.random.default_rng(0)
        expected = {"theta": FeatureExtractor(self.config.model).init_params(rng)}
        variant = self.config.experiment.critic_variant
        if variant and "omega" in groups:
            critic = FeatureCritic.from_config(variant, self.config.model)
            expected["omega"] = critic.init_params(rng)
        if "theta" not in groups:
            raise ModelShapeMismatch("model artifact has no extractor parameters")
        for group, params in expected.items():
            if groups[group].shapes() != params.shapes():
                raise ModelShapeMismatch(
                    f"{group} shapes {groups[group].shapes()} do not match the "
                    f"configured architecture {params.shapes()}"
                )

    def evaluate(
        self,
        groups: Dict[str, ParamSet],
        target: str,
        seed: int,
        kshot: bool = False,
        fractions: bool = False,
        pca: bool = False,
        out: Optional[Path] = None,
    ) -> Dict[str, Any]:
        self.check_shapes(groups)
        ev = self.config.eval
        domains = self.domain_set(target)
        extractor = FeatureExtractor(self.config.model)
        theta = groups["theta"]

        train = extract_frozen(extractor, theta, domains.target_train, ev.extract_batch)
        test = extract_frozen(extractor, theta, domains.target_test, ev.extract_batch)
        results: Dict[str, Any] = {
            "method": self.config.experiment.method,
            "target": target,
            "seed": seed,
            "fingerprint": train.fingerprint,
            "knn_k": ev.knn_k,
        }
        if len(train):
            results["knn_accuracy"] = accuracy(
                knn_predict(train, ev.knn_k, test.features), test.labels
            )
            if len(np.unique(train.labels)) > 1:
                probe = linear_probe(
                    train,
                    ev.probe_epochs,
                    ev.probe_lr,
                    ev.probe_reg,
                    ev.probe_batch,
                    seed,
                )
                results["probe_accuracy"] = accuracy(
                    probe_predict(probe, test.features), test.labels
                )
        head_key = f"head/{SHARED_HEAD}"
        if not domains.heterogeneous and head_key in groups:
            results["direct_accuracy"] = direct_accuracy(
                extractor,
                theta,
                groups[head_key],
                domains.target_test,
                ev.extract_batch,
            )
        results["accuracy"] = results.get(
            "direct_accuracy", results.get("knn_accuracy")
        )

        rng = np.random.default_rng([seed, _TARGET_SPLIT_STREAM])
        if kshot:
            table = kshot_table(train, test, ev.kshot, ev.knn_k, ev.kshot_trials, rng)
            results["kshot"] = table.to_dict(orient="records")
            if out:
                write_table(out / "kshot.csv", table)
        if fractions:
            table = fraction_eval(
                train,
                test,
                ev.fractions,
                ev.knn_k,
                rng,
                dict(
                    epochs=ev.probe_epochs,
                    lr=ev.probe_lr,
                    reg=ev.probe_reg,
                    batch_size=ev.probe_batch,
                    seed=seed,
                ),
            )
            results["fractions"] = table.to_dict(orient="records")
            if out:
                write_table(out / "fractions.csv", table)
        if pca and out:
            everything = extract_frozen(
                extractor, theta, domains.target_all, ev.extract_batch
            )
            scatter = scatter_frame(everything)
            write_table(out / "pca_scatter.csv", scatter)

        if self.metrics and results["accuracy"] is not None:
            self.metrics.record_accuracy(target, results["method"], results["accuracy"])
        return results


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


def run_cell(config_dict: Dict[str, Any], method: str, target: str, seed: int):
    """Train and evaluate one sweep cell; picklable for the process pool."""
    config = RunConfig.from_dict(config_dict).with_values(
        experiment={"method": method, "target_domain": target, "seeds": [seed]}
    )
    runner = ExperimentRunner(config)
    try:
        out = runner.train(seed, target)
        params, _ = read_params(out / "params.bin")
        results = runner.evaluate(unpack(params), target, seed, out=out)
        write_json(out / "results.json", results)
        row = {"accuracy": results["accuracy"], "error": ""}
    except (FeatureCriticError, OSError) as e:
        logger.warning(f"Sweep cell {method}/{target}/seed{seed} failed: {e}")
        row = {"accuracy": math.nan, "error": f"{type(e).__name__}: {e}"}
    return {"method": method, "target": target, "seed": seed, **row}


def summarise_sweep(cells: pd.DataFrame, methods: Sequence[str]) -> pd.DataFrame:
    """One row per target plus an average row; mean and std per method, and
    the difference of each feature-critic method from AGG."""
    targets = list(dict.fromkeys(cells["target"]))
    rows = []
    for target in targets + ["average"]:
        row: Dict[str, Any] = {"target": target}
        for method in methods:
            subset = cells[cells["method"] == method]
            if target == "average":
                per_seed = subset.groupby("seed")["accuracy"].mean()
            else:
                per_seed = subset[subset["target"] == target]["accuracy"]
            row[f"{method}_mean"] = float(per_seed.mean())
            row[f"{method}_std"] = (
                float(per_seed.std(ddof=0)) if len(per_seed) else math.nan
            )
        for method in methods:
            if method != "agg" and "agg" in methods:
                row[f"{method}_minus_agg"] = row[f"{method}_mean"] - row["agg_mean"]
        rows.append(row)
    return pd.DataFrame(rows)


def sweep(config: RunConfig, seeds: Sequence[int], workers: int = 1) -> pd.DataFrame:
    runner = ExperimentRunner(config)
    targets = list(config.sweep.targets) or runner.target_names()
    jobs = [
        (config.to_dict(), method, target, seed)
        for method in config.sweep.methods
        for target in targets
        for seed in seeds
    ]
    logger.info(f"Sweep of {len(jobs)} cells with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(run_cell, *zip(*jobs)))
    else:
        cells = [run_cell(*job) for job in jobs]
    frame = pd.DataFrame(cells).sort_values(["method", "target", "seed"])
    return frame.reset_index(drop=True)


def sweep_vd_scores(cells: pd.DataFrame, methods: Sequence[str]) -> Dict[str, int]:
    """VD-score per method with AGG's mean error per target as the baseline."""
    if "agg" not in methods:
        return {}
    errors = 1.0 - cells.groupby(["method", "target"])["accuracy"].mean()
    baseline = errors.loc["agg"].dropna().to_dict()
    return {
        method: vd_score(errors.loc[method].dropna().to_dict(), baseline)
        for method in methods
        if method in errors.index.get_level_values(0)
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _flags(args) -> Dict[str, Dict[str, Any]]:
    return {
        "experiment": {
            "seeds": [args.seed] if getattr(args, "seed", None) is not None else None,
            "data_root": getattr(args, "data_root", None),
            "output_dir": getattr(args, "out", None),
            "method": getattr(args, "method", None),
            "target_domain": getattr(args, "target_domain", None),
        },
        "sweep": {"workers": getattr(args, "workers", None)},
    }


def _resolve(args) -> RunConfig:
    return load_config(
        args.config,
        args.override or (),
        _flags(args),
        preset=getattr(args, "preset", None),
    )


def cmd_train(args) -> int:
    config = _resolve(args)
    runner = ExperimentRunner(config, get_metrics())
    out = runner.train(config.experiment.seeds[0], config.experiment.target_domain)
    print(out)
    return 0


def cmd_eval(args) -> int:
    model_path = Path(args.model)
    if model_path.is_dir():
        model_path = model_path / "params.bin"
    params, manifest = read_params(model_path)
    metadata = manifest.get("metadata", {})
    if args.config or args.preset or args.override or "config" not in metadata:
        config = _resolve(args)
    else:
        config = RunConfig.from_dict(metadata["config"])
    target = args.target_domain or metadata.get("target") or None
    seed = args.seed if args.seed is not None else int(metadata.get("seed", 0))

    runner = ExperimentRunner(config, get_metrics())
    out = Path(args.out) if args.out else model_path.parent
    results = runner.evaluate(
        unpack(params),
        target or runner.default_target(),
        seed,
        kshot=args.kshot,
        fractions=args.fractions,
        pca=args.pca or config.eval.pca,
        out=out,
    )
    if args.baseline:
        baseline = read_json(args.baseline)
        results["vd_score"] = vd_score(
            {results["target"]: 1.0 - results["accuracy"]},
            {baseline["target"]: 1.0 - baseline["accuracy"]},
        )
    path = write_json(out / "results.json", results)
    logger.info(f"Results written to {path}")
    print(pd.Series({k: v for k, v in results.items() if not isinstance(v, list)}))
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed or 0, instances=args.instances)
    print(report.to_frame().to_string(index=False))
    print(", ".join(f"{k}: {v:.1f}s" for k, v in report.seconds.items()))
    if not report.passed:
        logger.error(f"{len(report.failures())} gradient check(s) failed")
        return 1
    return 0


def cmd_sweep(args) -> int:
    config = _resolve(args)
    seeds = args.seeds if args.seeds else list(config.experiment.seeds)
    cells = sweep(config, seeds, config.sweep.workers)
    table = summarise_sweep(cells, config.sweep.methods)
    out = Path(config.experiment.output_dir)
    write_table(out / "sweep_cells.csv", cells)
    write_table(out / "sweep_table.csv", table)
    write_json(
        out / "sweep_results.json",
        {
            "seeds": list(seeds),
            "methods": list(config.sweep.methods),
            "table": table.to_dict(orient="records"),
            "vd_score": sweep_vd_scores(cells, config.sweep.methods),
            "failed_cells": int((cells["error"] != "").sum()),
        },
    )
    print(table.to_string(index=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feature_critic",
        description="Feature-critic meta-learning for domain generalisation",
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING")
    parser.add_argument(
        "--metrics-port", type=int, default=None, help="Serve /metrics on this port"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--config", type=str, help="YAML experiment file")
        sub.add_argument(
            "--preset", choices=PRESETS, default=None, help="Protocol defaults"
        )
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--data-root", type=str, default=None)
        sub.add_argument("--out", type=str, default=None, help="Output directory")
        sub.add_argument("--method", choices=["agg", "fc-set", "fc-cov"], default=None)
        sub.add_argument("--target-domain", type=str, default=None)
        sub.add_argument(
            "--override",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="Override one config value (repeatable)",
        )

    train = commands.add_parser("train", help="Train one model")
    common(train)
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="Evaluate a trained model")
    common(evaluate)
    evaluate.add_argument("--model", required=True, help="params.bin or run directory")
    evaluate.add_argument("--kshot", action="store_true", help="K-shot table")
    evaluate.add_argument(
        "--fractions", action="store_true", help="Reduced target-data table"
    )
    evaluate.add_argument("--pca", action="store_true", help="PCA scatter CSV")
    evaluate.add_argument("--baseline", help="AGG results.json for the VD-score")
    evaluate.set_defaults(handler=cmd_eval)

    gradcheck = commands.add_parser("gradcheck", help="Finite-difference checks")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--instances", type=int, default=20)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    sweep_parser = commands.add_parser("sweep", help="Seeds x targets x methods")
    common(sweep_parser)
    sweep_parser.add_argument("--seeds", type=int, nargs="+", default=None)
    sweep_parser.add_argument("--workers", type=int, default=None)
    sweep_parser.set_defaults(handler=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    level = (args.log_level or os.getenv("FC_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    metrics = initialize_metrics(CollectorRegistry())
    method = getattr(args, "method", None) or ""
    metrics.set_build_info(__version__, method, args.command)
    port = args.metrics_port or os.getenv("FC_METRICS_PORT")
    if port:
        MetricsServer(int(port), metrics).start()

    started = time.time()
    try:
        status = args.handler(args)
    except ConfigError as e:
        metrics.record_error("config", type(e).__name__)
        logger.error(f"Configuration error: {e}")
        return 1
    except FeatureCriticError as e:
        metrics.record_error(args.command, type(e).__name__)
        logger.error(f"{args.command} failed: {e}")
        return 1
    except OSError as e:
        metrics.record_error("io", type(e).__name__)
        logger.error(f"{args.command} failed on file access: {e}")
        return 1
    if status == 0:
        metrics.record_successful_run(time.time() - started)
    return status


if __name__ == "__main__":
    sys.exit(main())
