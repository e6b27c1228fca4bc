"""Embedding strategies, the pre-LN encoder stack, the masked-answer
training protocol, and the correctness prediction head.

Index conventions: concept/question/difficulty tables reserve rows
0=PAD, 1=MASK, 2=UNKNOWN, with real ids offset by 3. The answer table has
exactly four rows: 0=incorrect, 1=correct, 2=MASK, 3=PAD.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionParams, VARIANTS, attend
from .data import DifficultyTable, InteractionSequence, DIFFICULTY_BUCKETS
from .tensor import Tensor

STRATEGIES = ("cq", "rasch-c", "rasch-cr", "ctt")

PAD_ROW, MASK_ROW, UNKNOWN_ROW = 0, 1, 2
SPECIAL_ROWS = 3
ANSWER_INCORRECT, ANSWER_CORRECT, ANSWER_MASK, ANSWER_PAD = 0, 1, 2, 3
N_ANSWER_TOKENS = 4


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable or inconsistent with its model."""


@dataclass
class ModelConfig:
    hidden: int = 64
    layers: int = 2
    heads: int = 8
    max_len: int = 100
    ffn_mult: int = 4
    dropout: float = 0.1
    attention: str = "monoconv"
    embedding: str = "ctt"
    kernel_size: int = 9
    seed: int = 0
    literal_decay: bool = False
    causal_gamma: bool = False
    distance_grad: bool = False

    def validate(self) -> "ModelConfig":
        if self.hidden % (2 * self.heads) != 0:
            raise ValueError(f"hidden={self.hidden} must be divisible by 2*heads={2 * self.heads}")
        if self.ffn_mult < 1:
            raise ValueError("ffn_mult must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.attention not in VARIANTS:
            raise ValueError(f"attention must be one of {VARIANTS}")
        if self.embedding not in STRATEGIES:
            raise ValueError(f"embedding must be one of {STRATEGIES}")
        if self.layers < 1 or self.max_len < 1:
            raise ValueError("layers and max_len must be positive")
        return self


@dataclass
class EmbeddingTables:
    """All embedding tables; every strategy draws from the same instance."""

    position: Tensor         # (max_len, h)
    concept: Tensor          # (n_concepts + 3, h)
    question: Tensor         # (n_questions + 3, h)
    answer: Tensor           # (4, h)
    ctt: Tensor              # (101 + 3, h)
    question_scalar: Tensor  # (n_questions + 3, 1)
    concept_answer: Tensor   # ((n_concepts + 3) * 4, h)


@dataclass
class EncodedBatch:
    """Index-encoded windows, padded to the longest sequence in the batch.

    All index arrays already use table-row ids (specials offset applied).
    ``answers`` holds the true answer tokens; masking never mutates it.
    """

    questions: np.ndarray    # (B, L) int
    concepts: np.ndarray     # (B, L) int
    answers: np.ndarray      # (B, L) int, 0/1 where valid, ANSWER_PAD elsewhere
    ctt: np.ndarray          # (B, L) int
    pad: np.ndarray          # (B, L) bool, True on real positions
    students: List[str] = field(default_factory=list)


@dataclass
class MaskedBatch:
    questions: np.ndarray
    concepts: np.ndarray
    answers_in: np.ndarray   # model-visible answer tokens
    ctt: np.ndarray
    pad: np.ndarray
    target_mask: np.ndarray  # (B, L) bool, True exactly at prediction positions
    targets: np.ndarray      # (N,) float, original answers at target positions


def encode_sequences(seqs: Sequence[InteractionSequence],
                     table: DifficultyTable) -> EncodedBatch:
    if not seqs:
        raise ValueError("cannot encode an empty sequence list")
    B = len(seqs)
    L = max(len(s) for s in seqs)
    questions = np.full((B, L), PAD_ROW, dtype=np.int64)
    concepts = np.full((B, L), PAD_ROW, dtype=np.int64)
    answers = np.full((B, L), ANSWER_PAD, dtype=np.int64)
    ctt = np.full((B, L), PAD_ROW, dtype=np.int64)
    pad = np.zeros((B, L), dtype=bool)
    for b, s in enumerate(seqs):
        n = len(s)
        if n == 0:
            raise ValueError("empty interaction sequence")
        questions[b, :n] = np.asarray(s.questions) + SPECIAL_ROWS
        concepts[b, :n] = np.asarray(s.concepts) + SPECIAL_ROWS
        answers[b, :n] = s.corrects
        ctt[b, :n] = [table.bucket_for(q) + SPECIAL_ROWS for q in s.questions]
        pad[b, :n] = True
    return EncodedBatch(questions, concepts, answers, ctt, pad,
                        students=[s.student for s in seqs])


# -- masking protocol -------------------------------------------------------------

MASK_FRACTION = 0.15
MASK_SHARE, FLIP_SHARE = 0.8, 0.1   # remainder stays unchanged


def mask_for_training(batch: EncodedBatch, rng: np.random.Generator) -> MaskedBatch:
    """Select 15% of real positions; 80% masked, 10% answer-flipped, 10% kept.

    Every selected position becomes a prediction target labelled with the
    original answer. Padding is never selected. If the draw selects nothing
    (tiny batches), one random real position is masked so the loss is
    always defined.
    """
    selected = (rng.random(batch.pad.shape) < MASK_FRACTION) & batch.pad
    action = rng.random(batch.pad.shape)
    if not selected.any():
        flat_valid = np.flatnonzero(batch.pad)
        pick = rng.choice(flat_valid)
        selected.flat[pick] = True
        action.flat[pick] = 0.0  # force the plain-mask branch
    answers_in = batch.answers.copy()
    to_mask = selected & (action < MASK_SHARE)
    to_flip = selected & (action >= MASK_SHARE) & (action < MASK_SHARE + FLIP_SHARE)
    answers_in[to_mask] = ANSWER_MASK
    answers_in[to_flip] = 1 - batch.answers[to_flip]
    return MaskedBatch(batch.questions, batch.concepts, answers_in, batch.ctt,
                       batch.pad, selected,
                       batch.answers[selected].astype(np.float64))


def mask_for_testing(batch: EncodedBatch) -> MaskedBatch:
    """Mask exactly the last real position of every sequence."""
    lengths = batch.pad.sum(axis=1)
    if (lengths == 0).any():
        raise ValueError("cannot mask an empty sequence")
    target_mask = np.zeros_like(batch.pad)
    target_mask[np.arange(batch.pad.shape[0]), lengths - 1] = True
    answers_in = batch.answers.copy()
    answers_in[target_mask] = ANSWER_MASK
    return MaskedBatch(batch.questions, batch.concepts, answers_in, batch.ctt,
                       batch.pad, target_mask,
                       batch.answers[target_mask].astype(np.float64))


# -- embedding -----------------------------------------------------------------------

def embed(batch: MaskedBatch, tables: EmbeddingTables, strategy: str) -> Tensor:
    """Sum the strategy's component embeddings, always adding positions."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown embedding strategy {strategy!r}")
    L = batch.questions.shape[1]
    pos = tables.position[0:L]
    if strategy == "rasch-c":
        c = T.embedding(tables.concept, batch.concepts)
        scale = T.embedding(tables.question_scalar, batch.questions)
        return pos + c + T.mul(scale, c)
    if strategy == "rasch-cr":
        pair = batch.concepts * N_ANSWER_TOKENS + batch.answers_in
        cr = T.embedding(tables.concept_answer, pair)
        scale = T.embedding(tables.question_scalar, batch.questions)
        return pos + cr + T.mul(scale, cr)
    out = (pos
           + T.embedding(tables.concept, batch.concepts)
           + T.embedding(tables.question, batch.questions)
           + T.embedding(tables.answer, batch.answers_in))
    if strategy == "ctt":
        out = out + T.embedding(tables.ctt, batch.ctt)
    return out


# -- encoder ---------------------------------------------------------------------------

@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn_w1: Tensor
    ffn_w2: Tensor


def encoder_block(x: Tensor, blk: BlockParams, cfg: ModelConfig,
                  pad_mask: np.ndarray, training: bool,
                  rng: Optional[np.random.Generator],
                  capture: Optional[dict] = None) -> Tensor:
    """Pre-LN residual block: attention then the LeakyReLU feed-forward."""
    z = T.layer_norm(x, blk.ln1_gain, blk.ln1_bias)
    att = attend(cfg.attention, z, blk.attn, pad_mask,
                 literal=cfg.literal_decay, causal=cfg.causal_gamma,
                 stop_gamma=not cfg.distance_grad, capture=capture)
    a = x + T.dropout(att, cfg.dropout, training, rng)
    inner = T.leaky_relu(T.matmul(T.layer_norm(a, blk.ln2_gain, blk.ln2_bias), blk.ffn_w1))
    return a + T.dropout(T.matmul(inner, blk.ffn_w2), cfg.dropout, training, rng)


class KnowledgeTracingModel:
    """Encoder over interaction windows predicting answer correctness.

    Parameters live in a flat name -> Tensor dict so the optimizer and the
    checkpoint format can address them uniformly.
    """

    def __init__(self, config: ModelConfig, n_questions: int, n_concepts: int):
        self.config = config.validate()
        self.n_questions = n_questions
        self.n_concepts = n_concepts
        self._params: Dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(config.seed))

    # parameter construction order is fixed; it defines rng draw order
    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        h = cfg.hidden

        def uniform(shape, fan_in, name):
            bound = 1.0 / np.sqrt(fan_in)
            t = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
            self._params[name] = t
            return t

        def const(shape, value, name):
            t = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)
            self._params[name] = t
            return t

        nq = self.n_questions + SPECIAL_ROWS
        nc = self.n_concepts + SPECIAL_ROWS
        tables = EmbeddingTables(
            position=uniform((cfg.max_len, h), h, "emb.position"),
            concept=uniform((nc, h), h, "emb.concept"),
            question=uniform((nq, h), h, "emb.question"),
            answer=uniform((N_ANSWER_TOKENS, h), h, "emb.answer"),
            ctt=uniform((DIFFICULTY_BUCKETS + SPECIAL_ROWS, h), h, "emb.ctt"),
            question_scalar=const((nq, 1), 0.0, "emb.question_scalar"),
            concept_answer=uniform((nc * N_ANSWER_TOKENS, h), h, "emb.concept_answer"),
        )
        # PAD rows start at zero; they never receive gradient.
        for t in (tables.concept, tables.question, tables.ctt):
            t.data[PAD_ROW] = 0.0
        tables.answer.data[ANSWER_PAD] = 0.0
        self.tables = tables

        delta_init = float(np.log(np.e - 1.0))  # softplus(delta_raw) == 1
        head_dim = h // cfg.heads
        self.blocks: List[BlockParams] = []
        for i in range(cfg.layers):
            p = f"layer{i}"
            attn = AttentionParams(
                w_q=uniform((h, h), h, f"{p}.attn.w_q"),
                w_k=uniform((h, h), h, f"{p}.attn.w_k"),
                w_v=uniform((h, h), h, f"{p}.attn.w_v"),
                w_o=uniform((h, h), h, f"{p}.attn.w_o"),
                delta_raw=const((cfg.heads,), delta_init, f"{p}.attn.delta_raw"),
                sdc_w=uniform((cfg.heads, head_dim, cfg.kernel_size), head_dim, f"{p}.attn.sdc_w"),
                sdc_b=const((cfg.heads, 1, cfg.kernel_size), 0.0, f"{p}.attn.sdc_b"),
                heads=cfg.heads,
                kernel_size=cfg.kernel_size,
            )
            self.blocks.append(BlockParams(
                ln1_gain=const((h,), 1.0, f"{p}.ln1.gain"),
                ln1_bias=const((h,), 0.0, f"{p}.ln1.bias"),
                attn=attn,
                ln2_gain=const((h,), 1.0, f"{p}.ln2.gain"),
                ln2_bias=const((h,), 0.0, f"{p}.ln2.bias"),
                ffn_w1=uniform((h, h * cfg.ffn_mult), h, f"{p}.ffn.w1"),
                ffn_w2=uniform((h * cfg.ffn_mult, h), h * cfg.ffn_mult, f"{p}.ffn.w2"),
            ))
        self.head_w = uniform((h, 1), h, "head.weight")
        self.head_b = const((1,), 0.0, "head.bias")

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def active_param_names(self) -> List[str]:
        """Names of parameters actually reachable under the configured
        attention variant and embedding strategy."""
        cfg = self.config
        emb = {"cq": ["emb.concept", "emb.question", "emb.answer"],
               "ctt": ["emb.concept", "emb.question", "emb.answer", "emb.ctt"],
               "rasch-c": ["emb.concept", "emb.question_scalar"],
               "rasch-cr": ["emb.concept_answer", "emb.question_scalar"]}[cfg.embedding]
        names = ["emb.position"] + emb
        attn_extra = {"vanilla": [], "mono": ["delta_raw"],
                      "conv": ["sdc_w", "sdc_b"],
                      "monoconv": ["delta_raw", "sdc_w", "sdc_b"]}[cfg.attention]
        for i in range(cfg.layers):
            p = f"layer{i}"
            names += [f"{p}.ln1.gain", f"{p}.ln1.bias",
                      f"{p}.attn.w_q", f"{p}.attn.w_k", f"{p}.attn.w_v", f"{p}.attn.w_o"]
            names += [f"{p}.attn.{s}" for s in attn_extra]
            names += [f"{p}.ln2.gain", f"{p}.ln2.bias", f"{p}.ffn.w1", f"{p}.ffn.w2"]
        names += ["head.weight", "head.bias"]
        return names

    def active_params(self) -> List[Tensor]:
        return [self._params[n] for n in self.active_param_names()]

    # -- forward ----------------------------------------------------------------

    def forward(self, batch: MaskedBatch, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                capture: Optional[List[dict]] = None) -> Tensor:
        """Probability of a correct answer at every position, shape (B, L)."""
        if training and self.config.dropout > 0 and rng is None:
            raise ValueError("training forward needs an rng for dropout")
        x = embed(batch, self.tables, self.config.embedding)
        for blk in self.blocks:
            cap = {} if capture is not None else None
            x = encoder_block(x, blk, self.config, batch.pad, training, rng, cap)
            if capture is not None:
                capture.append(cap)
        logits = T.reshape(T.matmul(x, self.head_w) + self.head_b, batch.pad.shape)
        return T.sigmoid(logits)

    def predict(self, batch: MaskedBatch, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                capture: Optional[List[dict]] = None) -> Tensor:
        """Probabilities at the batch's prediction positions, shape (N,)."""
        probs = self.forward(batch, training=training, rng=rng, capture=capture)
        return T.select(probs, batch.target_mask)


def bce_loss(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over the prediction positions."""
    if probs.shape != np.shape(targets):
        raise T.ShapeError(f"probabilities {probs.shape} vs targets {np.shape(targets)}")
    t = Tensor(targets)
    p = T.clip(probs, 1e-12, 1.0 - 1e-12)
    ll = T.mul(t, T.log(p)) + T.mul(1.0 - t.data, T.log(1.0 - p))
    return T.neg(T.tmean(ll))


# -- checkpoints ---------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: KnowledgeTracingModel, path) -> None:
    """Write all parameters plus config to a single .npz (bit-exact floats)."""
    meta = {
        "format": "monoconvkt-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "n_questions": model.n_questions,
        "n_concepts": model.n_concepts,
    }
    arrays = {f"param:{name}": p.data for name, p in model.parameters().items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"),
                                   dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> KnowledgeTracingModel:
    try:
        with np.load(path) as archive:
            files = dict(archive)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in files:
        raise CheckpointError(f"{path} is missing checkpoint metadata")
    try:
        meta = json.loads(bytes(files["meta"]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has corrupt metadata: {exc}") from exc
    if meta.get("format") != "monoconvkt-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")

    model = KnowledgeTracingModel(ModelConfig(**meta["config"]),
                                  meta["n_questions"], meta["n_concepts"])
    for name, tensor in model.parameters().items():
        key = f"param:{name}"
        if key not in files:
            raise CheckpointError(f"{path} is missing parameter {name}")
        if files[key].shape != tensor.shape:
            raise CheckpointError(
                f"{path}: parameter {name} has shape {files[key].shape}, "
                f"model expects {tensor.shape}")
        tensor.data = files[key].astype(np.float64)
    return model
