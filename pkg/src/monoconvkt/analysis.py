"""Interpretability tooling over a trained model: branch-importance via
element-wise gradient-times-activation, attention-weight-vs-distance
profiles, a concept relevance graph, and embedding export for external
manifold tools.

Every operation here is read-only with respect to model parameters.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import DifficultyTable
from .model import (ANSWER_MASK, KnowledgeTracingModel, MaskedBatch, SPECIAL_ROWS,
                    UNKNOWN_ROW, bce_loss, embed)
from .tensor import zero_grads

logger = logging.getLogger(__name__)


@dataclass
class ImportanceReport:
    """Per-layer relative importance of the two attention branches."""

    ma_share: List[float]
    sdc_share: List[float]

    def __len__(self) -> int:
        return len(self.ma_share)


@dataclass
class DistanceProfile:
    distances: np.ndarray    # distances with at least one observation
    mean_weight: np.ndarray
    count: np.ndarray
    n_query_rows: int


@dataclass
class ConceptGraph:
    """Directed concept-to-concept edges with mean attention weight >= threshold."""

    edges: List[Tuple[int, int, float]]
    threshold: float


def grad_cam_importance(model: KnowledgeTracingModel,
                        batch: MaskedBatch) -> ImportanceReport:
    """Split each layer's importance between its two attention branches.

    Importance of a branch is mean(|activation * d loss / d activation|)
    taken at the branch output before concatenation. Shares are normalized
    to sum to one per layer; a degenerate all-zero layer reports 0.5/0.5.
    """
    if model.config.attention != "monoconv":
        raise ValueError("branch importance needs the combined attention variant")
    capture: List[dict] = []
    probs = model.predict(batch, capture=capture)
    loss = bce_loss(probs, batch.targets)
    loss.backward()
    ma_share, sdc_share = [], []
    for i, cap in enumerate(capture):
        ma, sdc = cap["ma_out"], cap["sdc_out"]
        i_ma = float(np.mean(np.abs(ma.data * ma.grad)))
        i_sdc = float(np.mean(np.abs(sdc.data * sdc.grad)))
        total = i_ma + i_sdc
        if total == 0.0:
            logger.warning("layer %d has zero total importance; reporting 0.5/0.5", i)
            ma_share.append(0.5)
            sdc_share.append(0.5)
        else:
            ma_share.append(i_ma / total)
            sdc_share.append(i_sdc / total)
    zero_grads(model.parameters().values())
    return ImportanceReport(ma_share, sdc_share)


def _ma_weights(model: KnowledgeTracingModel, batch: MaskedBatch,
                layer: int) -> np.ndarray:
    """Head-averaged post-softmax attention weights (B, L, L) at ``layer``."""
    if model.config.attention == "conv":
        raise ValueError("the convolution-only variant has no attention weight matrix")
    capture: List[dict] = []
    model.forward(batch, capture=capture)
    weights = capture[layer]["ma_weights"]
    return weights.mean(axis=1)


def attention_distance_profile(model: KnowledgeTracingModel,
                               batches: Sequence[MaskedBatch],
                               layer: int = -1) -> DistanceProfile:
    """Mean attention weight grouped by position distance |t - tau|.

    Weights come from the decay branch of the chosen layer (default: last),
    averaged over heads; padding rows and columns are excluded. Each valid
    query row carries total mass 1, so sum(mean * count) equals the number
    of query rows.
    """
    max_len = model.config.max_len
    sums = np.zeros(max_len, dtype=np.float64)
    counts = np.zeros(max_len, dtype=np.int64)
    n_rows = 0
    for batch in batches:
        w = _ma_weights(model, batch, layer)
        L = w.shape[-1]
        dist = np.abs(np.arange(L)[:, None] - np.arange(L)[None, :])
        pair_ok = batch.pad[:, :, None] & batch.pad[:, None, :]
        for b in range(w.shape[0]):
            sel = pair_ok[b]
            sums += np.bincount(dist[sel], weights=w[b][sel], minlength=max_len)
            counts += np.bincount(dist[sel], minlength=max_len)
        n_rows += int(batch.pad.sum())
    present = counts > 0
    return DistanceProfile(
        distances=np.flatnonzero(present),
        mean_weight=sums[present] / counts[present],
        count=counts[present],
        n_query_rows=n_rows,
    )


def concept_pair_means(model: KnowledgeTracingModel,
                       batches: Sequence[MaskedBatch],
                       layer: int = -1) -> Tuple[np.ndarray, np.ndarray]:
    """Mean attention weight between every (query concept, key concept) pair.

    Position self-pairs and padding are excluded. Returns (means, counts)
    as (C, C) arrays; pairs never observed have count 0 and mean 0.
    """
    C = model.n_concepts
    total = np.zeros((C, C), dtype=np.float64)
    count = np.zeros((C, C), dtype=np.int64)
    for batch in batches:
        w = _ma_weights(model, batch, layer)
        B, L = batch.pad.shape
        not_self = ~np.eye(L, dtype=bool)
        pair_ok = batch.pad[:, :, None] & batch.pad[:, None, :] & not_self
        concepts = batch.concepts - SPECIAL_ROWS
        for b in range(B):
            sel = pair_ok[b]
            src = np.broadcast_to(concepts[b][:, None], (L, L))[sel]
            dst = np.broadcast_to(concepts[b][None, :], (L, L))[sel]
            np.add.at(total, (src, dst), w[b][sel])
            np.add.at(count, (src, dst), 1)
    means = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return means, count


def concept_relevance_graph(model: KnowledgeTracingModel,
                            batches: Sequence[MaskedBatch],
                            threshold: float = 0.1,
                            layer: int = -1) -> ConceptGraph:
    """Directed graph of concept pairs whose mean attention clears ``threshold``.

    Self-loops are dropped. Lowering the threshold can only add edges.
    """
    means, counts = concept_pair_means(model, batches, layer)
    return graph_from_means(means, counts, threshold)


def graph_from_means(means: np.ndarray, counts: np.ndarray,
                     threshold: float) -> ConceptGraph:
    src_idx, dst_idx = np.nonzero((means >= threshold) & (counts > 0))
    edges = [(int(s), int(d), float(means[s, d]))
             for s, d in zip(src_idx, dst_idx) if s != d]
    return ConceptGraph(edges=edges, threshold=threshold)


def export_embeddings(model: KnowledgeTracingModel, table: DifficultyTable,
                      question_indices: Optional[Sequence[int]] = None
                      ) -> Tuple[List[str], List[List[float]]]:
    """One embedding row per (question, difficulty bucket) under the model's
    embedding strategy.

    Each question is embedded as a single-position input with an UNKNOWN
    concept and a masked answer, so rows differ only through the question
    and difficulty components. Returns (header, rows) ready for CSV.
    """
    if question_indices is None:
        question_indices = range(model.n_questions)
    qs = np.asarray(list(question_indices), dtype=np.int64)
    n = qs.size
    buckets = np.array([table.bucket_for(int(q)) for q in qs], dtype=np.int64)
    batch = MaskedBatch(
        questions=(qs + SPECIAL_ROWS).reshape(n, 1),
        concepts=np.full((n, 1), UNKNOWN_ROW, dtype=np.int64),
        answers_in=np.full((n, 1), ANSWER_MASK, dtype=np.int64),
        ctt=(buckets + SPECIAL_ROWS).reshape(n, 1),
        pad=np.ones((n, 1), dtype=bool),
        target_mask=np.zeros((n, 1), dtype=bool),
        targets=np.zeros(0),
    )
    vectors = embed(batch, model.tables, model.config.embedding).data[:, 0, :]
    header = ["question_index", "ctt_bucket"] + [f"e{i}" for i in range(vectors.shape[1])]
    rows = [[int(q), int(b)] + [float(x) for x in vec]
            for q, b, vec in zip(qs, buckets, vectors)]
    return header, rows


def export_attention_maps(model: KnowledgeTracingModel, batch: MaskedBatch,
                          out_dir, layer: Optional[int] = None) -> List[str]:
    """Dump post-softmax attention weights as one L x L CSV per layer/head.

    Weights are taken from the first sequence of ``batch``. Only variants
    with a decay/vanilla branch have weight matrices.
    """
    from pathlib import Path
    if model.config.attention == "conv":
        raise ValueError("the convolution-only variant has no attention weight matrix")
    capture: List[dict] = []
    model.forward(batch, capture=capture)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = range(len(capture)) if layer is None else [layer % len(capture)]
    written = []
    for li in layers:
        weights = capture[li]["ma_weights"][0]  # (H_branch, L, L)
        for hi in range(weights.shape[0]):
            path = out_dir / f"attention_layer{li}_head{hi}.csv"
            np.savetxt(path, weights[hi], delimiter=",", fmt="%.10g")
            written.append(str(path))
    return written


# -- CSV writers ------------------------------------------------------------------

def write_importance_csv(report: ImportanceReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "ma_share", "sdc_share"])
        for i, (ma, sdc) in enumerate(zip(report.ma_share, report.sdc_share)):
            writer.writerow([i, f"{ma:.10g}", f"{sdc:.10g}"])


def write_profile_csv(profile: DistanceProfile, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distance", "mean_weight", "count"])
        for d, m, c in zip(profile.distances, profile.mean_weight, profile.count):
            writer.writerow([int(d), f"{m:.10g}", int(c)])


def write_graph_csv(graph: ConceptGraph, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src_concept", "dst_concept", "weight"])
        for src, dst, weight in sorted(graph.edges):
            writer.writerow([src, dst, f"{weight:.10g}"])


def write_embedding_csv(header: List[str], rows: List[List[float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0], row[1]] + [f"{x:.12g}" for x in row[2:]])
