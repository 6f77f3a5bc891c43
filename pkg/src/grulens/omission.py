"""Omission scores: how far the sentence representation moves when one token is dropped."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import astuple, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .corpus import AnnotatedSentence, FeatureTable, Vocabulary
from .model import TEXTUAL, VISUAL, ImaginetParams, final_states, predict_image
from .numkernel import DegenerateVectorError, cosine_distance


@dataclass(frozen=True)
class OmissionRecord:
    sentence_id: str
    token_index: int
    form: str
    pos: str
    deprel: str
    position_bin: str
    score_visual: float
    score_textual: float

    def score(self, pathway: str) -> float:
        return self.score_visual if pathway == VISUAL else self.score_textual


CSV_HEADER = [f.name for f in fields(OmissionRecord)]


def _row_distances(full: np.ndarray, partial: np.ndarray) -> list[float]:
    return [cosine_distance(full, h) for h in partial]


def omission_scores(params: ImaginetParams, sentence: AnnotatedSentence, vocab: Vocabulary) -> list[OmissionRecord]:
    """One record per content token; the end marker is the measurement point and is never omitted."""
    n = len(sentence.content)
    seqs = [vocab.encode(sentence)] + [vocab.encode(sentence.without(i)) for i in range(n)]
    scores = {}
    for pathway in (VISUAL, TEXTUAL):
        states = final_states(params, pathway, seqs)
        if np.linalg.norm(states[0]) == 0.0:
            raise DegenerateVectorError(f"{sentence.sid}: zero-norm final {pathway} state")
        scores[pathway] = _row_distances(states[0], states[1:])
    return [
        OmissionRecord(sentence.sid, i, t.form, t.pos, t.deprel, t.position_bin,
                       scores[VISUAL][i], scores[TEXTUAL][i])
        for i, t in enumerate(sentence.content)
    ]


def omission_corpus(params, sentences: Iterable[AnnotatedSentence], vocab) -> list[OmissionRecord]:
    out: list[OmissionRecord] = []
    for s in sorted(sentences, key=lambda s: s.sid):
        out.extend(omission_scores(params, s, vocab))
    return out


def write_omission_csv(path, records: Sequence[OmissionRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            row = list(astuple(r))
            row[-2:] = [repr(r.score_visual), repr(r.score_textual)]
            w.writerow(row)


def read_omission_csv(path) -> list[OmissionRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        return [
            OmissionRecord(r["sentence_id"], int(r["token_index"]), r["form"], r["pos"], r["deprel"],
                           r["position_bin"], float(r["score_visual"]), float(r["score_textual"]))
            for r in reader
        ]


# -- aggregation ------------------------------------------------------------


@dataclass
class LabelDistribution:
    label: str
    count: int
    visual: np.ndarray
    textual: np.ndarray

    @staticmethod
    def _summary(x):
        q1, med, q3 = np.percentile(x, [25, 50, 75])
        return float(q1), float(med), float(q3)

    @property
    def visual_summary(self):
        return self._summary(self.visual)

    @property
    def textual_summary(self):
        return self._summary(self.textual)


def _group(records, label):
    if label not in ("pos", "deprel"):
        raise ValueError("label must be 'pos' or 'deprel'")
    groups = defaultdict(list)
    for r in records:
        groups[getattr(r, label)].append(r)
    return groups


def aggregate_by_label(records: Sequence[OmissionRecord], label: str = "pos", min_count: int = 500) -> dict[str, LabelDistribution]:
    """Per-label score distributions for labels seen at least ``min_count`` times."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    out = {}
    for lab, rs in sorted(_group(records, label).items()):
        if len(rs) < min_count:
            continue
        out[lab] = LabelDistribution(
            lab, len(rs),
            np.array([r.score_visual for r in rs]),
            np.array([r.score_textual for r in rs]),
        )
    return out


@dataclass
class LogRatioReport:
    ratios: dict[str, np.ndarray]  # label -> ln(visual / textual) per included token
    excluded: dict[str, int]  # label -> tokens dropped for a (near-)zero score

    @property
    def n_excluded(self) -> int:
        return sum(self.excluded.values())


def log_ratio_by_label(records, label: str = "pos", min_count: int = 500, eps: float = 1e-12) -> LogRatioReport:
    """ln(score_visual / score_textual) per token, grouped by label.

    Positive values mean the token matters more to the VISUAL pathway.
    Tokens with either score <= ``eps`` are dropped and counted.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    ratios, excluded = {}, {}
    for lab, rs in sorted(_group(records, label).items()):
        if len(rs) < min_count:
            continue
        keep = [r for r in rs if r.score_visual > eps and r.score_textual > eps]
        excluded[lab] = len(rs) - len(keep)
        ratios[lab] = np.array([math.log(r.score_visual / r.score_textual) for r in keep])
    return LogRatioReport(ratios, excluded)


# -- retrieval --------------------------------------------------------------


def retrieve_nearest(feature_db: FeatureTable, query, k: int = 1) -> list[tuple[str, float]]:
    """Ids ordered by cosine distance to ``query``; equal distances fall back to id order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not feature_db.ids:
        raise ValueError("empty feature database")
    dists = np.array([cosine_distance(query, row) for row in feature_db.values])
    order = sorted(range(len(dists)), key=lambda i: (dists[i], feature_db.ids[i]))[:k]
    return [(feature_db.ids[i], float(dists[i])) for i in order]


def retrieval_demo(params, sentence, vocab, feature_db, k: int = 1) -> dict:
    """Images retrieved for a sentence and for it minus its most VISUAL-salient token."""
    records = omission_scores(params, sentence, vocab)
    top = max(records, key=lambda r: (r.score_visual, -r.token_index))
    full, reduced = final_states(params, VISUAL, [vocab.encode(sentence), vocab.encode(sentence.without(top.token_index))])
    return {
        "sentence_id": sentence.sid,
        "tokens": [t.form for t in sentence.content],
        "omitted_index": top.token_index,
        "omitted_form": top.form,
        "full": retrieve_nearest(feature_db, predict_image(params, full), k),
        "omitted": retrieve_nearest(feature_db, predict_image(params, reduced), k),
    }
