"""Interaction-log parsing, preprocessing, difficulty estimation, windowing,
and cross-validation fold construction.

Input CSV schema (UTF-8, comma separated, header required):
``student_id,question_id,concept_id,correct``. A concept cell may hold
several ids joined by "_"; the joined string is treated as one unique
concept. The synthetic generator emits the same schema.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

MAX_SEQ_LEN = 100
DIFFICULTY_BUCKETS = 101      # integer buckets 0..100 inclusive
DEFAULT_BUCKET = 50           # unseen questions get the max-entropy bucket
MIN_INTERACTIONS = 5          # students with fewer are dropped
N_FOLDS = 5


class ParseError(ValueError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ValueError):
    """Invalid run parameters."""


@dataclass(frozen=True)
class Interaction:
    student: str
    question: str
    concept: str
    correct: int


@dataclass
class InteractionLog:
    """Ordered interaction records, optionally with dense vocabularies.

    ``question_to_index`` / ``concept_to_index`` are filled by
    :func:`preprocess` (dense ids 0..N-1, first-appearance order) and are
    None on freshly parsed logs.
    """

    records: List[Interaction]
    question_to_index: Optional[Dict[str, int]] = None
    concept_to_index: Optional[Dict[str, int]] = None

    @property
    def n_questions(self) -> int:
        if self.question_to_index is None:
            raise ValueError("log has no vocabulary yet; run preprocess() first")
        return len(self.question_to_index)

    @property
    def n_concepts(self) -> int:
        if self.concept_to_index is None:
            raise ValueError("log has no vocabulary yet; run preprocess() first")
        return len(self.concept_to_index)

    def students(self) -> List[str]:
        seen: Dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.student, None)
        return list(seen)

    def records_by_student(self) -> Dict[str, List[Interaction]]:
        out: Dict[str, List[Interaction]] = {}
        for r in self.records:
            out.setdefault(r.student, []).append(r)
        return out


@dataclass
class InteractionSequence:
    """One window of up to ``MAX_SEQ_LEN`` interactions from a single student."""

    student: str
    questions: List[int]
    concepts: List[int]
    corrects: List[int]

    def __len__(self) -> int:
        return len(self.questions)


@dataclass
class DifficultyTable:
    """Per-question difficulty bucket in 0..100, larger meaning harder.

    Built from training-fold records only; questions never attempted in
    training fall back to ``default_bucket``.
    """

    buckets: Dict[int, int]
    default_bucket: int = DEFAULT_BUCKET

    def bucket_for(self, question_index: int) -> int:
        return self.buckets.get(question_index, self.default_bucket)


@dataclass
class FoldSplit:
    train: List[str]
    valid: List[str]
    test: List[str]


@dataclass
class FoldPlan:
    """Five disjoint test partitions of the student population."""

    folds: List[FoldSplit] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.folds)


# -- parsing -------------------------------------------------------------------

REQUIRED_COLUMNS = ("student_id", "question_id", "concept_id", "correct")


def load_interactions(path) -> InteractionLog:
    """Parse an interaction CSV, rejecting malformed rows by line number."""
    records: List[Interaction] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("empty file")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ParseError(f"missing required column(s): {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            student = (row.get("student_id") or "").strip()
            question = (row.get("question_id") or "").strip()
            concept = (row.get("concept_id") or "").strip()
            raw_correct = (row.get("correct") or "").strip()
            if not student or not question or not concept:
                raise ParseError("empty id field", line)
            if raw_correct not in ("0", "1"):
                raise ParseError(f"correct must be 0 or 1, got {raw_correct!r}", line)
            records.append(Interaction(student, question, concept, int(raw_correct)))
    if not records:
        raise ParseError("file has a header but no data rows")
    return InteractionLog(records)


def write_interactions(log: InteractionLog, path) -> None:
    """Write records back out in the input CSV schema."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REQUIRED_COLUMNS)
        for r in log.records:
            writer.writerow([r.student, r.question, r.concept, r.correct])


# -- preprocessing ---------------------------------------------------------------

def preprocess(log: InteractionLog) -> InteractionLog:
    """Drop students with fewer than 5 interactions and build dense vocabularies.

    Each distinct concept-combination string becomes a unique concept index;
    question ids map to dense indices. Idempotent: running it twice yields an
    equal log.
    """
    counts: Dict[str, int] = {}
    for r in log.records:
        counts[r.student] = counts.get(r.student, 0) + 1
    kept = [r for r in log.records if counts[r.student] >= MIN_INTERACTIONS]

    question_to_index: Dict[str, int] = {}
    concept_to_index: Dict[str, int] = {}
    for r in kept:
        if r.question not in question_to_index:
            question_to_index[r.question] = len(question_to_index)
        if r.concept not in concept_to_index:
            concept_to_index[r.concept] = len(concept_to_index)
    return InteractionLog(kept, question_to_index, concept_to_index)


def compute_ctt_difficulty(train_records: Sequence[Interaction],
                           question_to_index: Dict[str, int]) -> DifficultyTable:
    """Empirical difficulty per question: bucket = round(100 * (1 - p_correct)).

    Rounding is half-up. Only the given (training) records are consulted.
    """
    attempts: Dict[int, int] = {}
    correct: Dict[int, int] = {}
    for r in train_records:
        qi = question_to_index[r.question]
        attempts[qi] = attempts.get(qi, 0) + 1
        correct[qi] = correct.get(qi, 0) + r.correct
    buckets = {
        qi: int(math.floor(100.0 * (1.0 - correct[qi] / attempts[qi]) + 0.5))
        for qi in attempts
    }
    return DifficultyTable(buckets)


def window_sequences(log: InteractionLog, max_len: int = MAX_SEQ_LEN,
                     students: Optional[Sequence[str]] = None) -> List[InteractionSequence]:
    """Cut each student's stream into consecutive non-overlapping windows.

    Windows never mix students and concatenating a student's windows
    reproduces their stream exactly. ``students`` restricts (and orders)
    which students are windowed.
    """
    if log.question_to_index is None or log.concept_to_index is None:
        raise ValueError("window_sequences needs a preprocessed log")
    per_student = log.records_by_student()
    chosen = list(per_student) if students is None else list(students)
    out: List[InteractionSequence] = []
    for s in chosen:
        recs = per_student.get(s, [])
        for start in range(0, len(recs), max_len):
            chunk = recs[start:start + max_len]
            out.append(InteractionSequence(
                student=s,
                questions=[log.question_to_index[r.question] for r in chunk],
                concepts=[log.concept_to_index[r.concept] for r in chunk],
                corrects=[r.correct for r in chunk],
            ))
    return out


def make_folds(students: Sequence[str], seed: int, n_folds: int = N_FOLDS) -> FoldPlan:
    """Shuffle students into ``n_folds`` equal-as-possible disjoint test groups.

    Per fold, the non-test students are split 90/10 into train/validation
    (|valid| = round(0.10 * #non-test), at least when rounding allows).
    Deterministic for a given seed.
    """
    students = list(students)
    if len(students) < n_folds:
        raise ConfigError(f"need at least {n_folds} students, got {len(students)}")
    rng = np.random.default_rng(seed)
    order = [students[i] for i in rng.permutation(len(students))]

    base, extra = divmod(len(order), n_folds)
    groups: List[List[str]] = []
    pos = 0
    for k in range(n_folds):
        size = base + (1 if k < extra else 0)
        groups.append(order[pos:pos + size])
        pos += size

    plan = FoldPlan()
    for k in range(n_folds):
        test = groups[k]
        rest = [s for s in order if s not in set(test)]
        n_valid = int(round(0.10 * len(rest)))
        plan.folds.append(FoldSplit(train=rest[n_valid:], valid=rest[:n_valid], test=test))
    return plan


# -- synthetic data ----------------------------------------------------------------

def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


def generate_synthetic_log(n_students: int, n_questions: int, n_concepts: int,
                           seed: int, min_len: int = 15, max_len: int = 75,
                           difficulty_scale: float = 1.0) -> InteractionLog:
    """Simulate interaction logs with planted difficulty/ability structure.

    Question difficulty d_q ~ Uniform(0,1), student ability theta_s ~
    Normal(0,1), and P(correct) = sigmoid(theta_s - scale * logit(d_q)).
    With average ability (theta=0) and scale 1 this reduces to
    P(correct) = 1 - d_q. Fully deterministic per seed.
    """
    if n_students <= 0 or n_questions <= 0 or n_concepts <= 0:
        raise ConfigError("synthetic generator sizes must be positive")
    if min_len < MIN_INTERACTIONS:
        raise ConfigError(f"min_len must be >= {MIN_INTERACTIONS} so students survive preprocessing")
    rng = np.random.default_rng(seed)
    difficulty = np.clip(rng.uniform(0.0, 1.0, size=n_questions), 1e-6, 1.0 - 1e-6)
    ability = rng.normal(0.0, 1.0, size=n_students)
    concept_of = rng.integers(0, n_concepts, size=n_questions)
    d_logit = difficulty_scale * _logit(difficulty)

    records: List[Interaction] = []
    for s in range(n_students):
        length = int(rng.integers(min_len, max_len + 1))
        qs = rng.integers(0, n_questions, size=length)
        p = 1.0 / (1.0 + np.exp(-(ability[s] - d_logit[qs])))
        answers = (rng.random(length) < p).astype(int)
        sid = f"s{s:05d}"
        for q, a in zip(qs, answers):
            records.append(Interaction(sid, f"q{q:04d}", f"c{concept_of[q]}", int(a)))
    return InteractionLog(records)
