"""Cross-validation training harness: masked-answer training with Adam,
gradient accumulation, early stopping on validation AUC, and AUC/RMSE
evaluation under last-position masking.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace, asdict
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .data import (FoldPlan, InteractionLog, compute_ctt_difficulty,
                   window_sequences)
from .model import (KnowledgeTracingModel, ModelConfig, bce_loss,
                    encode_sequences, mask_for_testing, mask_for_training)
from .tensor import AdamState, adam_step, zero_grads


class MetricError(ValueError):
    """Metric is undefined for the given inputs."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the fold was aborted."""


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outranks a random negative.

    Mann-Whitney form: ties contribute 1/2. Requires both classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be aligned 1-D sequences")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise MetricError("labels must be binary")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: only one class present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.arange(1, scores.size + 1)
    # average ranks within tie groups
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def rmse(scores: Sequence[float], labels: Sequence[float]) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.size == 0:
        raise ValueError("rmse needs aligned non-empty inputs")
    return float(np.sqrt(np.mean((scores - labels) ** 2)))


@dataclass
class TrainConfig:
    batch_size: int = 64
    accumulation_steps: int = 1
    patience: int = 10
    max_epochs: int = 30
    lr: float = 0.001
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.patience < 1 or self.batch_size < 1 or self.accumulation_steps < 1:
            raise ValueError("patience, batch_size and accumulation_steps must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        return self


class EarlyStopper:
    """Best-score tracking with a consecutive-non-improvement budget.

    ``update`` returns (snapshot, stop): whether the caller should save the
    current weights as best, and whether training should halt. A NaN score
    (validation unusable) counts as non-improvement once any finite score
    has been seen; before that it tracks the latest weights.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> Tuple[bool, bool]:
        if np.isfinite(score):
            if score > self.best:
                self.best = score
                self.best_epoch = epoch
                self.bad_epochs = 0
                return True, False
        elif not np.isfinite(self.best):
            self.best_epoch = epoch
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


@dataclass
class FoldResult:
    fold: int
    auc: float
    rmse: float
    best_epoch: int
    epochs_run: int
    train_losses: List[float] = field(default_factory=list)
    valid_aucs: List[float] = field(default_factory=list)


@dataclass
class MetricsReport:
    config: Dict
    folds: List[FoldResult]
    mean_auc: float
    std_auc: float
    mean_rmse: float
    std_rmse: float
    wall_clock: float  # seconds; kept out of the serialized report

    def to_json_dict(self) -> Dict:
        return {
            "config": self.config,
            "folds": [{"fold": f.fold, "auc": f.auc, "rmse": f.rmse,
                       "best_epoch": f.best_epoch, "epochs_run": f.epochs_run,
                       "train_losses": f.train_losses, "valid_aucs": f.valid_aucs}
                      for f in self.folds],
            "mean_auc": self.mean_auc,
            "std_auc": self.std_auc,
            "mean_rmse": self.mean_rmse,
            "std_rmse": self.std_rmse,
        }


def _length_buckets(seqs, batch_size: int, rng: np.random.Generator):
    """Index batches grouped by sequence length to limit padding waste.

    Ties keep the shuffled order, and the batch order itself is shuffled,
    so composition stays deterministic per rng state.
    """
    perm = rng.permutation(len(seqs))
    by_len = sorted(perm, key=lambda i: len(seqs[i]))
    batches = [by_len[i:i + batch_size] for i in range(0, len(by_len), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _evaluate(model: KnowledgeTracingModel, seqs, table, batch_size: int,
              access_log: Optional[Set[str]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Last-position-masked predictions over ``seqs``: (scores, labels)."""
    scores, labels = [], []
    seqs = sorted(seqs, key=len)
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        enc = encode_sequences(chunk, table)
        if access_log is not None:
            access_log.update(enc.students)
        mb = mask_for_testing(enc)
        probs = model.predict(mb)
        scores.append(probs.data)
        labels.append(mb.targets)
    return np.concatenate(scores), np.concatenate(labels)


def _snapshot(model: KnowledgeTracingModel) -> Dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.parameters().items()}


def _restore(model: KnowledgeTracingModel, snap: Dict[str, np.ndarray]) -> None:
    for name, p in model.parameters().items():
        p.data = snap[name].copy()


def train_fold(log: InteractionLog, plan: FoldPlan, fold_index: int,
               model_cfg: ModelConfig, train_cfg: TrainConfig,
               access_log: Optional[Set[str]] = None,
               progress: Optional[callable] = None
               ) -> Tuple[FoldResult, KnowledgeTracingModel]:
    """Train one fold to early stopping and score it on the fold's test split.

    The difficulty table is computed from this fold's training records only.
    Validation uses the test-style last-position masking so the early-stop
    signal matches the final metric. The model is reseeded with
    seed + fold_index for fold independence.
    """
    train_cfg.validate()
    split = plan.folds[fold_index]
    per_student = log.records_by_student()
    train_records = [r for s in split.train for r in per_student[s]]
    table = compute_ctt_difficulty(train_records, log.question_to_index)

    train_seqs = window_sequences(log, model_cfg.max_len, students=split.train)
    valid_seqs = window_sequences(log, model_cfg.max_len, students=split.valid)
    test_seqs = window_sequences(log, model_cfg.max_len, students=split.test)

    fold_seed = train_cfg.seed + fold_index
    model = KnowledgeTracingModel(replace(model_cfg, seed=fold_seed),
                                  log.n_questions, log.n_concepts)
    rng = np.random.default_rng(fold_seed)
    params = model.active_params()
    state = AdamState(params, lr=train_cfg.lr)

    stopper = EarlyStopper(train_cfg.patience)
    best_snap = _snapshot(model)
    train_losses: List[float] = []
    valid_aucs: List[float] = []
    epochs_run = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        epochs_run = epoch
        batches = _length_buckets(train_seqs, train_cfg.batch_size, rng)
        loss_sum = 0.0
        target_count = 0
        micro_since_step = 0
        zero_grads(params)
        for batch_ids in batches:
            chunk = [train_seqs[i] for i in batch_ids]
            enc = encode_sequences(chunk, table)
            if access_log is not None:
                access_log.update(enc.students)
            mb = mask_for_training(enc, rng)
            probs = model.predict(mb, training=True, rng=rng)
            loss = bce_loss(probs, mb.targets)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"fold {fold_index}: non-finite loss at epoch {epoch}")
            loss.backward()
            loss_sum += loss.item() * mb.targets.size
            target_count += mb.targets.size
            micro_since_step += 1
            if micro_since_step == train_cfg.accumulation_steps:
                adam_step(params, [p.grad for p in params], state)
                zero_grads(params)
                micro_since_step = 0
        if micro_since_step:
            adam_step(params, [p.grad for p in params], state)
            zero_grads(params)
        train_losses.append(loss_sum / max(target_count, 1))

        if valid_seqs:
            v_scores, v_labels = _evaluate(model, valid_seqs, table,
                                           train_cfg.batch_size, access_log)
            try:
                val_auc = auc(v_scores, v_labels.astype(int))
            except MetricError:
                val_auc = float("nan")
        else:
            val_auc = float("nan")
        valid_aucs.append(val_auc)

        if progress is not None:
            progress(fold_index, epoch, train_losses[-1], val_auc)

        snapshot, stop = stopper.update(epoch, val_auc)
        if snapshot:
            best_snap = _snapshot(model)
        if stop:
            break

    _restore(model, best_snap)
    t_scores, t_labels = _evaluate(model, test_seqs, table, train_cfg.batch_size)
    result = FoldResult(fold=fold_index,
                        auc=auc(t_scores, t_labels.astype(int)),
                        rmse=rmse(t_scores, t_labels),
                        best_epoch=stopper.best_epoch,
                        epochs_run=epochs_run,
                        train_losses=train_losses,
                        valid_aucs=valid_aucs)
    return result, model


def cross_validate(log: InteractionLog, plan: FoldPlan, model_cfg: ModelConfig,
                   train_cfg: TrainConfig, n_folds: Optional[int] = None,
                   workers: int = 1, progress: Optional[callable] = None
                   ) -> Tuple[MetricsReport, List[KnowledgeTracingModel]]:
    """Train the requested folds of one configuration and aggregate metrics."""
    fold_ids = list(range(len(plan) if n_folds is None else min(n_folds, len(plan))))
    started = time.perf_counter()

    def run(k: int) -> Tuple[FoldResult, KnowledgeTracingModel]:
        return train_fold(log, plan, k, model_cfg, train_cfg, progress=progress)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, fold_ids))
    else:
        outcomes = [run(k) for k in fold_ids]

    results = [r for r, _ in outcomes]
    models = [m for _, m in outcomes]
    aucs = np.array([r.auc for r in results])
    rmses = np.array([r.rmse for r in results])
    config_block = {"model": asdict(model_cfg), "train": asdict(train_cfg)}
    report = MetricsReport(
        config=config_block,
        folds=results,
        mean_auc=float(aucs.mean()),
        std_auc=float(aucs.std()),
        mean_rmse=float(rmses.mean()),
        std_rmse=float(rmses.std()),
        wall_clock=time.perf_counter() - started,
    )
    return report, models
