"""Hidden-unit inspection: activation matrices, top-K contexts, traces and MI."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import AnnotatedSentence, Vocabulary
from .model import ImaginetParams, encode

BOUNDARY = "<s>"
CONTEXT_TYPES = tuple((kind, n) for kind in ("word", "deprel") for n in (1, 2, 3))


@dataclass
class ActivationMatrix:
    values: np.ndarray  # (d, n)
    columns: list[tuple[str, int]]  # column -> (sentence id, position)
    pathway: str
    sentences: list[AnnotatedSentence]

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def token(self, col: int):
        sid, pos = self.columns[col]
        return self._by_id[sid].tokens[pos]

    def sentence_columns(self, sid: str) -> np.ndarray:
        return self._spans[sid]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise ValueError(f"{self.values.shape} activations for {len(self.columns)} columns")
        self._by_id = {s.sid: s for s in self.sentences}
        self._spans, start = {}, 0
        for s in self.sentences:
            self._spans[s.sid] = np.arange(start, start + len(s))
            start += len(s)


def capture(params: ImaginetParams, pathway: str, sentences: Sequence[AnnotatedSentence], vocab: Vocabulary) -> ActivationMatrix:
    """Hidden state at every time step of every sentence, ordered by sentence id then position."""
    ordered = sorted(sentences, key=lambda s: s.sid)
    blocks, columns = [], []
    for s in ordered:
        blocks.append(encode(params, pathway, vocab.encode(s)).hidden)
        columns.extend((s.sid, t) for t in range(len(s)))
    return ActivationMatrix(np.vstack(blocks).T.copy(), columns, pathway, ordered)


def context_ngram(M: ActivationMatrix, col: int, n: int, kind: str = "word") -> tuple[str, ...]:
    """The ``n`` symbols ending at column ``col``, padded with a boundary symbol."""
    sid, pos = M.columns[col]
    toks = M._by_id[sid].tokens
    attr = "form" if kind == "word" else "deprel"
    return tuple(getattr(toks[k], attr) if k >= 0 else BOUNDARY for k in range(pos - n + 1, pos + 1))


def context_variable(M: ActivationMatrix, n: int, kind: str = "word") -> np.ndarray:
    """Integer-coded n-gram context per column (codes follow sorted symbol order)."""
    symbols = [" ".join(context_ngram(M, c, n, kind)) for c in range(M.n)]
    return np.unique(np.array(symbols, dtype=object), return_inverse=True)[1].astype(np.int64)


def top_k_contexts(M: ActivationMatrix, unit: int, k: int = 20, context_len: int = 3,
                   unit_type: str = "word", absolute: bool = False) -> list[dict]:
    """The ``k`` columns where ``unit`` is most active, rendered as n-grams.

    Ranking is by signed activation (descending) unless ``absolute``;
    equal activations keep column order.
    """
    if not 0 <= unit < M.d:
        raise IndexError(f"unit {unit} out of range for {M.d} units")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 1 <= context_len <= 5:
        raise ValueError("context_len must be between 1 and 5")
    row = M.values[unit]
    key = -np.abs(row) if absolute else -row
    order = np.argsort(key, kind="stable")[:k]
    out = []
    for rank, col in enumerate(order, start=1):
        sid, pos = M.columns[col]
        out.append({
            "unit": unit,
            "rank": rank,
            "activation": float(row[col]),
            "context": list(context_ngram(M, int(col), context_len, unit_type)),
            "sentence_id": sid,
            "position": pos,
        })
    return out


def decile_thresholds(M: ActivationMatrix) -> np.ndarray:
    """Per-unit 90th percentile of activation over the whole capture."""
    return np.quantile(M.values, 0.9, axis=1)


@dataclass
class UnitTrace:
    sentence_id: str
    unit: int
    tokens: list[str]
    activations: np.ndarray
    in_top_decile: bool


def trace(params: ImaginetParams, pathway: str, sentence: AnnotatedSentence, unit: int,
          vocab: Vocabulary, thresholds: np.ndarray) -> UnitTrace:
    """Activation of one unit through a sentence; flags peaks reaching the top decile."""
    acts = encode(params, pathway, vocab.encode(sentence)).hidden[:, unit].copy()
    return UnitTrace(sentence.sid, unit, sentence.forms, acts, bool(acts.max() >= thresholds[unit]))


# -- binning and mutual information ----------------------------------------


@dataclass
class BinnedUnit:
    bins: np.ndarray  # bin id per time step, 0..B-1
    edges: np.ndarray  # smallest value of each occupied bin, ascending
    n_bins: int


def bin_unit(row, B: int = 20) -> BinnedUnit:
    """Equal-mass percentile bins.

    A value goes to bin ``floor(B * #{values < v} / n)``, so tied values
    share the lowest bin their run reaches.
    """
    row = np.asarray(row, dtype=np.float64)
    n = row.size
    if n < B:
        raise ValueError(f"need at least {B} values to form {B} bins, got {n}")
    below = np.searchsorted(np.sort(row), row, side="left")
    bins = (below * B) // n
    occupied = np.unique(bins)
    edges = np.array([row[bins == b].min() for b in occupied])
    return BinnedUnit(bins.astype(np.int64), edges, B)


def mutual_information(a, c) -> float:
    """Plug-in mutual information (nats) between two discrete sequences."""
    a = np.asarray(a.bins if isinstance(a, BinnedUnit) else a)
    c = np.asarray(c)
    if a.shape != c.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {c.shape}")
    n = a.size
    if n == 0:
        raise ValueError("empty sequences")
    ai = np.unique(a, return_inverse=True)[1].ravel()
    ci = np.unique(c, return_inverse=True)[1].ravel()
    joint = np.zeros((ai.max() + 1, ci.max() + 1), dtype=np.int64)
    np.add.at(joint, (ai, ci), 1)
    na = joint.sum(axis=1)
    nc = joint.sum(axis=0)
    ia, ic = np.nonzero(joint)
    nac = joint[ia, ic]
    # integer products keep exactly independent tables at exactly zero
    ratio = (nac * n) / (na[ia] * nc[ic])
    return float(np.sum(nac / n * np.log(ratio)))


def unit_mis(M: ActivationMatrix, context: np.ndarray, B: int = 20, jobs: int = 1) -> np.ndarray:
    def one(j):
        return mutual_information(bin_unit(M.values[j], B), context)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return np.array(list(ex.map(one, range(M.d))))
    return np.array([one(j) for j in range(M.d)])


def median_mi(M: ActivationMatrix, context: np.ndarray, B: int = 20, jobs: int = 1) -> tuple[float, np.ndarray]:
    """Median over units of MI with the context; also the per-unit vector."""
    per_unit = unit_mis(M, context, B, jobs)
    return float(np.median(per_unit)), per_unit


@dataclass
class BootstrapSample:
    log_ratios: np.ndarray  # accepted replicates, in replicate order
    replicate_ids: np.ndarray
    excluded: int


def _resample(mi: np.ndarray, seed: int, r: int) -> np.ndarray:
    return mi[np.random.default_rng(seed + r).integers(0, mi.size, mi.size)]


def _replicate(mi_t: np.ndarray, mi_v: np.ndarray, seed: int, r: int) -> float:
    # each pathway draws from a fresh generator for this replicate; with equal
    # unit counts the two draws coincide, so identical vectors give exactly 0
    mt = np.median(_resample(mi_t, seed, r))
    mv = np.median(_resample(mi_v, seed, r))
    if mt <= 0 or mv <= 0:
        return math.nan
    return math.log(mt / mv)


def bootstrap_log_ratio(mi_textual, mi_visual, replicates: int = 5000, seed: int = 0, jobs: int = 1) -> BootstrapSample:
    """Bootstrap ln(median MI textual / median MI visual) over units.

    Each replicate resamples units with replacement within each pathway,
    drawing from generator ``seed + replicate``; serial and parallel runs
    therefore agree exactly.  Replicates with a zero median
    are dropped and counted.
    """
    mi_t = np.asarray(mi_textual, dtype=np.float64)
    mi_v = np.asarray(mi_visual, dtype=np.float64)
    if mi_t.size == 0 or mi_v.size == 0:
        raise ValueError("empty MI vector")
    ids = range(replicates)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            vals = list(ex.map(lambda r: _replicate(mi_t, mi_v, seed, r), ids))
    else:
        vals = [_replicate(mi_t, mi_v, seed, r) for r in ids]
    vals = np.array(vals)
    ok = ~np.isnan(vals)
    if not ok.any():
        raise ValueError("every bootstrap replicate had a zero median")
    return BootstrapSample(vals[ok], np.flatnonzero(ok), int((~ok).sum()))


@dataclass
class MiSuiteResult:
    per_unit: dict[tuple[str, int], dict[str, np.ndarray]]  # context -> pathway -> MI vector
    medians: dict[tuple[str, int], dict[str, float]]
    bootstrap: dict[tuple[str, int], BootstrapSample]

    def summary(self, quantiles=(0.025, 0.25, 0.5, 0.75, 0.975)) -> list[dict]:
        rows = []
        for ctx, bs in self.bootstrap.items():
            row = {"context_type": context_name(ctx), "replicates": int(bs.log_ratios.size),
                   "excluded": bs.excluded,
                   "median_mi_textual": self.medians[ctx]["textual"],
                   "median_mi_visual": self.medians[ctx]["visual"]}
            for q, v in zip(quantiles, np.quantile(bs.log_ratios, quantiles)):
                row[f"q{q:g}"] = float(v)
            rows.append(row)
        return rows


def context_name(ctx: tuple[str, int]) -> str:
    return f"{ctx[0]}_{ctx[1]}gram"


def run_mi_suite(textual: ActivationMatrix, visual: ActivationMatrix, B: int = 20,
                 replicates: int = 5000, seed: int = 0, jobs: int = 1,
                 context_types=CONTEXT_TYPES) -> MiSuiteResult:
    """Bootstrap log ratios of median MI for word/deprel uni-, bi- and trigram contexts."""
    if textual.columns != visual.columns:
        raise ValueError("captures must cover the same corpus in the same column order")
    per_unit, medians, boots = {}, {}, {}
    for ctx in context_types:
        kind, n = ctx
        c = context_variable(textual, n, kind)
        mt, vt = median_mi(textual, c, B, jobs)
        mv, vv = median_mi(visual, c, B, jobs)
        per_unit[ctx] = {"textual": vt, "visual": vv}
        medians[ctx] = {"textual": mt, "visual": mv}
        boots[ctx] = bootstrap_log_ratio(vt, vv, replicates, seed, jobs)
    return MiSuiteResult(per_unit, medians, boots)
