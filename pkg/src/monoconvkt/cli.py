"""Command-line entry point: training, ablation grids, analysis exports,
and synthetic data generation.

Exit codes: 0 success, 2 configuration/usage error, 3 checkpoint error,
4 dataset parse error, 5 training divergence.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

from . import analysis, plots
from .attention import VARIANTS
from .data import (ConfigError, InteractionLog, ParseError,
                   compute_ctt_difficulty, generate_synthetic_log,
                   load_interactions, make_folds, preprocess,
                   window_sequences, write_interactions)
from .model import (CheckpointError, ModelConfig, STRATEGIES,
                    encode_sequences, load_checkpoint, mask_for_testing,
                    save_checkpoint)
from .train import TrainConfig, TrainingDiverged, cross_validate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5


@dataclass
class RunConfig:
    # model
    hidden: int = 64
    layers: int = 2
    heads: int = 8
    max_len: int = 100
    ffn_mult: int = 4
    dropout: float = 0.1
    attention: str = "monoconv"
    embedding: str = "ctt"
    kernel: int = 9
    literal_eq7: bool = False
    causal_gamma: bool = False
    distance_grad: bool = False
    # train
    batch_size: int = 64
    accumulation_steps: int = 1
    patience: int = 10
    epochs: int = 30
    lr: float = 0.001
    folds: int = 5
    workers: int = 1
    # data
    data: str = ""
    synthetic: bool = False
    students: int = 2000
    questions: int = 50
    concepts: int = 10
    min_interactions: int = 15
    max_interactions: int = 75
    # run
    seed: int = 0
    out_dir: str = "runs"
    graph_threshold: float = 0.1
    layer: int = -1

    def model_config(self) -> ModelConfig:
        return ModelConfig(hidden=self.hidden, layers=self.layers, heads=self.heads,
                           max_len=self.max_len, ffn_mult=self.ffn_mult,
                           dropout=self.dropout, attention=self.attention,
                           embedding=self.embedding, kernel_size=self.kernel,
                           seed=self.seed, literal_decay=self.literal_eq7,
                           causal_gamma=self.causal_gamma,
                           distance_grad=self.distance_grad)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size,
                           accumulation_steps=self.accumulation_steps,
                           patience=self.patience, max_epochs=self.epochs,
                           lr=self.lr, seed=self.seed)

    def data_block(self) -> dict:
        if self.synthetic:
            return {"synthetic": True, "students": self.students,
                    "questions": self.questions, "concepts": self.concepts,
                    "min_interactions": self.min_interactions,
                    "max_interactions": self.max_interactions, "seed": self.seed}
        return {"synthetic": False, "path": self.data}


CONFIG_SECTIONS = {
    "model": ("hidden", "layers", "heads", "max_len", "ffn_mult", "dropout",
              "attention", "embedding", "kernel", "literal_eq7",
              "causal_gamma", "distance_grad"),
    "train": ("batch_size", "accumulation_steps", "patience", "epochs", "lr",
              "folds", "workers"),
    "data": ("data", "synthetic", "students", "questions", "concepts",
             "min_interactions", "max_interactions"),
    "run": ("seed", "out_dir", "graph_threshold", "layer"),
}

_BOOL_KEYS = {"literal_eq7", "causal_gamma", "distance_grad", "synthetic"}
_FLOAT_KEYS = {"dropout", "lr", "graph_threshold"}
_STR_KEYS = {"attention", "embedding", "data", "out_dir"}


def load_config_file(path: str, rc: RunConfig) -> RunConfig:
    """Apply a sectioned key=value file onto ``rc``; unknown keys are errors."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    updates = {}
    for section in parser.sections():
        if section not in CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in CONFIG_SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            if key in _BOOL_KEYS:
                updates[key] = parser[section].getboolean(key)
            elif key in _FLOAT_KEYS:
                updates[key] = parser[section].getfloat(key)
            elif key in _STR_KEYS:
                updates[key] = parser[section].get(key)
            else:
                updates[key] = parser[section].getint(key)
    return replace(rc, **updates)


def build_run_config(args: argparse.Namespace) -> RunConfig:
    rc = RunConfig()
    if getattr(args, "config", None):
        rc = load_config_file(args.config, rc)
    overrides = {}
    for key in RunConfig.__dataclass_fields__:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    rc = replace(rc, **overrides)
    # validate eagerly so bad values fail before any work starts
    rc.model_config()
    rc.train_config()
    if not 1 <= rc.folds <= 5:
        raise ConfigError("--folds must be between 1 and 5")
    if rc.workers < 1:
        raise ConfigError("--workers must be >= 1")
    return rc


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--data", help="interaction CSV path")
    p.add_argument("--synthetic", action="store_true", default=None,
                   help="use the built-in synthetic generator instead of --data")
    p.add_argument("--attention", choices=VARIANTS)
    p.add_argument("--embedding", choices=STRATEGIES)
    p.add_argument("--folds", type=int, help="how many of the 5 folds to train")
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--ffn-mult", dest="ffn_mult", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--kernel", type=int, help="convolution kernel size (odd)")
    p.add_argument("--literal-eq7", dest="literal_eq7", action="store_true", default=None,
                   help="use the multiplicative(-delta*d) score algebra instead of exp decay")
    p.add_argument("--causal-gamma", dest="causal_gamma", action="store_true", default=None)
    p.add_argument("--distance-grad", dest="distance_grad", action="store_true", default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--accumulation-steps", dest="accumulation_steps", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--students", type=int)
    p.add_argument("--questions", type=int)
    p.add_argument("--concepts", type=int)
    p.add_argument("--min-interactions", dest="min_interactions", type=int)
    p.add_argument("--max-interactions", dest="max_interactions", type=int)
    p.add_argument("--graph-threshold", dest="graph_threshold", type=float)
    p.add_argument("--layer", type=int, help="encoder layer analyzed (default last)")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--workers", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monoconvkt",
        description="Knowledge tracing with monotonic convolutional attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one configuration with cross-validation")
    _add_common_flags(p_train)

    p_ablate = sub.add_parser("ablate", help="run the attention/embedding ablation grids")
    _add_common_flags(p_ablate)
    p_ablate.add_argument("--grid", choices=("attention", "embedding", "both"),
                          default="both")

    p_analyze = sub.add_parser("analyze", help="interpretability exports from a checkpoint")
    _add_common_flags(p_analyze)
    p_analyze.add_argument("--checkpoint", required=True)

    p_gen = sub.add_parser("gen-data", help="write a synthetic interaction CSV")
    _add_common_flags(p_gen)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--force", action="store_true",
                       help="allow overwriting an existing output file")
    return parser


def make_run_dir(rc: RunConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(rc.out_dir)
    base.mkdir(parents=True, exist_ok=True)
    candidate = base / f"{stamp}-seed{rc.seed}"
    n = 1
    while candidate.exists():
        n += 1
        candidate = base / f"{stamp}-seed{rc.seed}-{n}"
    candidate.mkdir()
    return candidate


def obtain_log(rc: RunConfig) -> InteractionLog:
    if rc.synthetic:
        raw = generate_synthetic_log(rc.students, rc.questions, rc.concepts,
                                     rc.seed, rc.min_interactions,
                                     rc.max_interactions)
    elif rc.data:
        raw = load_interactions(rc.data)
    else:
        raise ConfigError("either --data or --synthetic is required")
    return preprocess(raw)


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _progress(fold: int, epoch: int, loss: float, val_auc: float) -> None:
    print(f"  fold {fold} epoch {epoch:3d}  loss {loss:.4f}  val_auc {val_auc:.4f}")


def cmd_train(rc: RunConfig) -> int:
    log = obtain_log(rc)
    plan = make_folds(log.students(), rc.seed)
    run_dir = make_run_dir(rc)
    print(f"training {rc.attention}+{rc.embedding} on {len(log.students())} students "
          f"({len(log.records)} interactions); outputs in {run_dir}")
    report, models = cross_validate(log, plan, rc.model_config(), rc.train_config(),
                                    n_folds=rc.folds, workers=rc.workers,
                                    progress=_progress)
    payload = report.to_json_dict()
    payload["config"]["data"] = rc.data_block()
    _write_json(payload, run_dir / "report.json")
    for result, mdl in zip(report.folds, models):
        save_checkpoint(mdl, run_dir / f"checkpoint_fold{result.fold}.npz")
    plots.save_training_curves(payload, run_dir / "training_curves.png")
    print(f"mean AUC {report.mean_auc:.4f} (std {report.std_auc:.4f}), "
          f"mean RMSE {report.mean_rmse:.4f} (std {report.std_rmse:.4f}) "
          f"in {report.wall_clock:.1f}s")
    print(f"report: {run_dir / 'report.json'}")
    return EXIT_OK


def cmd_ablate(rc: RunConfig, grid: str) -> int:
    log = obtain_log(rc)
    plan = make_folds(log.students(), rc.seed)
    run_dir = make_run_dir(rc)
    cells = []
    if grid in ("attention", "both"):
        cells += [(v, rc.embedding) for v in VARIANTS]
    if grid in ("embedding", "both"):
        cells += [(rc.attention, s) for s in STRATEGIES]
    seen = set()
    cells = [c for c in cells if not (c in seen or seen.add(c))]

    summary = []
    for variant, strategy in cells:
        name = f"attn-{variant}_emb-{strategy}"
        print(f"[{name}]")
        model_cfg = replace(rc.model_config(), attention=variant, embedding=strategy)
        report, _ = cross_validate(log, plan, model_cfg, rc.train_config(),
                                   n_folds=rc.folds, workers=rc.workers,
                                   progress=_progress)
        payload = report.to_json_dict()
        payload["config"]["data"] = rc.data_block()
        _write_json(payload, run_dir / f"report_{name}.json")
        summary.append((name, report.mean_auc, report.std_auc, report.mean_rmse))

    summary.sort(key=lambda row: row[1], reverse=True)
    with open(run_dir / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write("cell,mean_auc,std_auc,mean_rmse\n")
        for name, mean_auc, std_auc, mean_rmse in summary:
            fh.write(f"{name},{mean_auc:.6f},{std_auc:.6f},{mean_rmse:.6f}\n")
    plots.save_ablation_bars([(n, a, s) for n, a, s, _ in summary],
                             run_dir / "summary.png")
    print(f"\n{'cell':32s}  mean_auc  std_auc")
    for name, mean_auc, std_auc, _ in summary:
        print(f"{name:32s}  {mean_auc:.4f}    {std_auc:.4f}")
    print(f"summary: {run_dir / 'summary.csv'}")
    return EXIT_OK


def cmd_analyze(rc: RunConfig, checkpoint: str) -> int:
    model = load_checkpoint(checkpoint)
    log = obtain_log(rc)
    if model.n_questions != log.n_questions or model.n_concepts != log.n_concepts:
        raise CheckpointError(
            f"checkpoint vocabulary ({model.n_questions} questions, "
            f"{model.n_concepts} concepts) does not match the dataset "
            f"({log.n_questions} questions, {log.n_concepts} concepts)")
    plan = make_folds(log.students(), rc.seed)
    split = plan.folds[0]
    per_student = log.records_by_student()
    table = compute_ctt_difficulty([r for s in split.train for r in per_student[s]],
                                   log.question_to_index)
    seqs = window_sequences(log, model.config.max_len, students=split.test)
    batches = []
    for start in range(0, len(seqs), rc.batch_size):
        batches.append(mask_for_testing(encode_sequences(seqs[start:start + rc.batch_size],
                                                         table)))
    run_dir = make_run_dir(rc)
    print(f"analyzing {checkpoint} on fold-0 test split ({len(seqs)} sequences); "
          f"outputs in {run_dir}")

    if model.config.attention == "monoconv":
        importance = analysis.grad_cam_importance(model, batches[0])
        analysis.write_importance_csv(importance, run_dir / "importance.csv")
        plots.save_importance_figure(importance.ma_share, importance.sdc_share,
                                     run_dir / "importance.png")
    else:
        print("note: branch importance needs the monoconv variant; skipped")

    if model.config.attention != "conv":
        profile = analysis.attention_distance_profile(model, batches, rc.layer)
        analysis.write_profile_csv(profile, run_dir / "distance_profile.csv")
        plots.save_profile_figure(profile.distances, profile.mean_weight,
                                  run_dir / "distance_profile.png")
        graph = analysis.concept_relevance_graph(model, batches,
                                                 rc.graph_threshold, rc.layer)
        analysis.write_graph_csv(graph, run_dir / "concept_graph.csv")
        plots.save_graph_figure(graph.edges, run_dir / "concept_graph.png")
        analysis.export_attention_maps(model, batches[0],
                                       run_dir / "attention_maps", rc.layer)
    else:
        print("note: convolution-only attention has no weight matrices; "
              "profile/graph skipped")

    header, rows = analysis.export_embeddings(model, table)
    analysis.write_embedding_csv(header, rows, run_dir / "embeddings.csv")
    print(f"wrote analysis outputs to {run_dir}")
    return EXIT_OK


def cmd_gen_data(rc: RunConfig, out: str, force: bool) -> int:
    path = Path(out)
    if path.exists() and not force:
        raise ConfigError(f"{out} already exists; pass --force to overwrite")
    log = generate_synthetic_log(rc.students, rc.questions, rc.concepts,
                                 rc.seed, rc.min_interactions, rc.max_interactions)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_interactions(log, path)
    print(f"wrote {len(log.records)} interactions "
          f"({rc.students} students, {rc.questions} questions) to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        rc = build_run_config(args)
        if args.command == "train":
            return cmd_train(rc)
        if args.command == "ablate":
            return cmd_ablate(rc, args.grid)
        if args.command == "analyze":
            return cmd_analyze(rc, args.checkpoint)
        if args.command == "gen-data":
            return cmd_gen_data(rc, args.out, args.force)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, ParseError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
