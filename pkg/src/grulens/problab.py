"""Regression analyses of omission scores and logistic probes of hidden units."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .corpus import POSITION_BINS, AnnotatedSentence

BLOCKS = ("word", "deprel", "position", "word×deprel", "word×position")

MODEL_SPECS = {
    "WORD": ("word",),
    "DEPREL": ("word", "deprel", "word×deprel"),
    "POSITION": ("word", "position", "word×position"),
    "FULL": ("word", "deprel", "position", "word×deprel", "word×position"),
}
MODEL_ORDER = ("WORD", "DEPREL", "POSITION", "FULL")


class SingularDesignError(np.linalg.LinAlgError):
    pass


class ProbeConvergenceError(RuntimeError):
    def __init__(self, iterations, grad_norm):
        super().__init__(f"probe did not converge in {iterations} iterations (|grad|_inf = {grad_norm:.3e})")
        self.iterations = iterations
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class ScoredToken:
    sentence_id: str
    token_index: int
    form: str
    deprel: str
    position_bin: str
    score: float


def scored_tokens(records, pathway: str) -> list[ScoredToken]:
    """Project omission records onto one pathway's score."""
    return [
        ScoredToken(r.sentence_id, r.token_index, r.form, r.deprel, r.position_bin, r.score(pathway))
        for r in records
    ]


def _canonical(tokens: Iterable[ScoredToken]) -> list[ScoredToken]:
    return sorted(tokens, key=lambda t: (t.sentence_id, t.token_index))


# -- design matrices --------------------------------------------------------


def _category(tok, block: str) -> str:
    if block == "word":
        return tok.form
    if block == "deprel":
        return tok.deprel
    if block == "position":
        return tok.position_bin
    if block == "word×deprel":
        return f"{tok.form}|{tok.deprel}"
    if block == "word×position":
        return f"{tok.form}|{tok.position_bin}"
    raise ValueError(f"unknown design block {block!r}")


@dataclass
class FeatureMap:
    blocks: tuple[str, ...]
    columns: dict[str, dict[str, int]]  # block -> category -> column
    width: int

    def names(self) -> list[str]:
        out = [""] * self.width
        for block, cats in self.columns.items():
            for cat, j in cats.items():
                out[j] = f"{block}={cat}"
        return out


def build_design(tokens: Sequence, blocks: Sequence[str], feature_map: FeatureMap | None = None):
    """Sparse one-hot design over the requested blocks.

    Interaction columns exist only for combinations seen when the map was
    built.  With a given ``feature_map``, unseen categories leave their
    block all-zero.
    """
    if not tokens:
        raise ValueError("cannot build a design from no records")
    blocks = tuple(b for b in BLOCKS if b in blocks)
    if feature_map is None:
        columns, width = {}, 0
        for block in blocks:
            cats = sorted({_category(t, block) for t in tokens})
            if block == "position":
                cats = [b for b in POSITION_BINS if b in cats]
            columns[block] = {c: width + i for i, c in enumerate(cats)}
            width += len(cats)
        feature_map = FeatureMap(blocks, columns, width)
    rows, cols = [], []
    for i, t in enumerate(tokens):
        for block in feature_map.blocks:
            j = feature_map.columns[block].get(_category(t, block))
            if j is not None:
                rows.append(i)
                cols.append(j)
    X = sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(len(tokens), feature_map.width), dtype=np.float64
    )
    return X, feature_map


# -- ridge ------------------------------------------------------------------


@dataclass
class FitResult:
    weights: np.ndarray
    intercept: float
    lam: float
    feature_map: FeatureMap | None = None
    r2: float | None = None

    def predict(self, X) -> np.ndarray:
        return np.asarray(X @ self.weights).ravel() + self.intercept


def _dense(X) -> np.ndarray:
    return X.toarray() if sp.issparse(X) else np.asarray(X, dtype=np.float64)


def _centered_gram(X, y, intercept=True):
    Xd = _dense(X)
    if not intercept:
        return Xd, np.zeros(Xd.shape[1]), 0.0
    xbar = Xd.mean(axis=0)
    ybar = float(np.mean(y))
    Xc = Xd - xbar
    return Xc, xbar, ybar


def fit_ridge(design, targets, lam: float, feature_map: FeatureMap | None = None, min_norm: bool = False,
              intercept: bool = True) -> FitResult:
    """Minimise ``|y - Xw - b|^2 + lam |w|^2`` with an unpenalised intercept.

    Solved through the centred normal equations with a symmetric
    positive-definite solve.  At ``lam == 0`` a rank-deficient design is an
    error unless ``min_norm`` asks for the minimum-norm least-squares
    solution instead.  ``intercept=False`` fixes ``b = 0``.
    """
    y = np.asarray(targets, dtype=np.float64)
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if design.shape[0] != y.shape[0]:
        raise ValueError(f"design has {design.shape[0]} rows, targets {y.shape[0]}")
    Xc, xbar, ybar = _centered_gram(design, y, intercept)
    yc = y - ybar
    G = Xc.T @ Xc
    rhs = Xc.T @ yc
    p = G.shape[0]
    if lam == 0 and np.linalg.matrix_rank(G) < p:
        if not min_norm:
            raise SingularDesignError(
                "normal equations are singular at lam=0 (collinear design); use lam > 0"
            )
        # relative cutoff so numerically-null directions are dropped, not inverted
        cond = np.finfo(np.float64).eps * max(Xc.shape)
        w = scipy.linalg.lstsq(Xc, yc, cond=cond, lapack_driver="gelsd")[0]
    else:
        A = G + lam * np.eye(p)
        try:
            w = scipy.linalg.solve(A, rhs, assume_a="pos")
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError(f"{exc}; use lam > 0") from None
    return FitResult(w, float(ybar - xbar @ w), lam, feature_map)


def r2_score(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 undefined for zero-variance targets")
    return 1.0 - float(np.sum((y - np.asarray(yhat)) ** 2)) / ss_tot


def r_squared(fit: FitResult, tokens: Sequence, targets=None) -> float:
    """Proportion of variance explained on ``tokens`` (around their own mean)."""
    if not tokens:
        raise ValueError("empty evaluation set")
    if fit.feature_map is None:
        raise ValueError("fit has no feature map; use r2_score on a design matrix")
    y = np.array([t.score for t in tokens]) if targets is None else np.asarray(targets, dtype=np.float64)
    X, _ = build_design(tokens, fit.feature_map.blocks, fit.feature_map)
    return r2_score(y, fit.predict(X))


def ridge_standard_errors(fit: FitResult, design, targets) -> np.ndarray:
    """Sandwich standard errors ``sigma^2 A^-1 G A^-1`` with effective degrees of freedom."""
    y = np.asarray(targets, dtype=np.float64)
    Xc, _, ybar = _centered_gram(design, y)
    G = Xc.T @ Xc
    A = G + fit.lam * np.eye(G.shape[0])
    Ainv = np.linalg.pinv(A)
    resid = y - fit.predict(design)
    df = float(np.trace(Ainv @ G))
    sigma2 = float(resid @ resid) / max(len(y) - df - 1.0, 1.0)
    cov = sigma2 * Ainv @ G @ Ainv
    return np.sqrt(np.clip(np.diag(cov), 0.0, None))


def fit_model(tokens: Sequence[ScoredToken], model: str, lam: float, min_norm: bool = False) -> FitResult:
    X, fmap = build_design(tokens, MODEL_SPECS[model])
    return fit_ridge(X, [t.score for t in tokens], lam, fmap, min_norm=min_norm)


# -- suite ------------------------------------------------------------------


def split_sentences(sentence_ids: Iterable[str], seed: int) -> tuple[set[str], set[str]]:
    """Seeded half split by sentence: (fit ids, evaluation ids)."""
    ids = sorted(set(sentence_ids))
    perm = np.random.default_rng(seed).permutation(len(ids))
    half = (len(ids) + 1) // 2
    return {ids[i] for i in perm[:half]}, {ids[i] for i in perm[half:]}


@dataclass
class LmSuiteResult:
    lam: float
    split_seed: int
    evaluated_on: str
    r2: dict[str, dict[str, float]]
    fits: dict[str, dict[str, FitResult]] = field(repr=False, default_factory=dict)

    @property
    def delta(self) -> dict[str, dict[str, float]]:
        return {enc: {m: v - row["WORD"] for m, v in row.items()} for enc, row in self.r2.items()}

    def to_json(self) -> dict:
        return {
            "lambda": self.lam,
            "split_seed": self.split_seed,
            "evaluated_on": self.evaluated_on,
            "models": {m: list(MODEL_SPECS[m]) for m in MODEL_ORDER},
            "r2": self.r2,
            "delta_vs_word": self.delta,
        }


def run_lm_suite(
    scores: Mapping[str, Sequence[ScoredToken]],
    split_seed: int = 0,
    lam: float = 1.0,
    evaluate_on: str = "heldout",
    models: Sequence[str] = MODEL_ORDER,
) -> LmSuiteResult:
    """Fit every model on one half of the sentences, score R^2 on the other.

    ``scores`` maps an encoder name (e.g. SUM, VISUAL, TEXTUAL) to its
    per-token omission scores.  All encoders share one sentence split.
    ``evaluate_on="train"`` scores the fitting half instead.
    """
    if evaluate_on not in ("heldout", "train"):
        raise ValueError("evaluate_on must be 'heldout' or 'train'")
    all_ids = {t.sentence_id for toks in scores.values() for t in toks}
    fit_ids, eval_ids = split_sentences(all_ids, split_seed)
    if evaluate_on == "train":
        eval_ids = fit_ids
    result = LmSuiteResult(lam, split_seed, evaluate_on, {})
    for enc, toks in scores.items():
        toks = _canonical(toks)
        fit_part = [t for t in toks if t.sentence_id in fit_ids]
        eval_part = [t for t in toks if t.sentence_id in eval_ids]
        result.r2[enc], result.fits[enc] = {}, {}
        for m in models:
            fit = fit_model(fit_part, m, lam, min_norm=(lam == 0))
            fit.r2 = r_squared(fit, eval_part)
            result.r2[enc][m] = fit.r2
            result.fits[enc][m] = fit
    return result


@dataclass
class WordGain:
    word: str
    count: int
    gain: float


def rank_words_by_deprel_gain(
    tokens: Sequence[ScoredToken],
    min_count: int = 100,
    lam: float = 1.0,
    split_seed: int = 0,
    metric: str = "abs",
) -> tuple[list[WordGain], dict[str, dict[str, list[float]]]]:
    """Rank words by how much better DEPREL predicts their scores than WORD.

    Both models are fit on the fitting half; gains are mean per-token error
    reductions over the evaluation half (``metric`` "abs" or "squared").
    Also returns held-out per-word, per-deprel score lists for plotting.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if metric not in ("abs", "squared"):
        raise ValueError("metric must be 'abs' or 'squared'")
    toks = _canonical(tokens)
    fit_ids, eval_ids = split_sentences({t.sentence_id for t in toks}, split_seed)
    fit_part = [t for t in toks if t.sentence_id in fit_ids]
    eval_part = [t for t in toks if t.sentence_id in eval_ids]
    word_fit = fit_model(fit_part, "WORD", lam)
    dep_fit = fit_model(fit_part, "DEPREL", lam)
    y = np.array([t.score for t in eval_part])
    err_w = y - word_fit.predict(build_design(eval_part, MODEL_SPECS["WORD"], word_fit.feature_map)[0])
    err_d = y - dep_fit.predict(build_design(eval_part, MODEL_SPECS["DEPREL"], dep_fit.feature_map)[0])
    if metric == "abs":
        gain = np.abs(err_w) - np.abs(err_d)
    else:
        gain = err_w ** 2 - err_d ** 2
    per_word = defaultdict(list)
    dists: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for t, g in zip(eval_part, gain):
        per_word[t.form].append(g)
        dists[t.form][t.deprel].append(t.score)
    ranked = [
        WordGain(w, len(gs), float(np.mean(gs))) for w, gs in per_word.items() if len(gs) >= min_count
    ]
    ranked.sort(key=lambda wg: (-wg.gain, wg.word))
    return ranked, {w: dict(d) for w, d in dists.items()}


def position_coefficients(fit: FitResult) -> dict[str, float]:
    """Main-effect coefficient per position bin (NaN for bins absent from the fit)."""
    if fit.feature_map is None or "position" not in fit.feature_map.columns:
        raise ValueError("fit does not include the position block")
    cols = fit.feature_map.columns["position"]
    return {b: float(fit.weights[cols[b]]) if b in cols else math.nan for b in POSITION_BINS}


# -- logistic probes --------------------------------------------------------


def ngram_features(forms: Sequence[str], t: int, window: int = 4) -> list[str]:
    """Every contiguous n-gram inside the ``window`` tokens ending at ``t``.

    Tokens carry their distance from ``t``: for "the nice dog" at "dog",
    ``the_2``, ``nice_1``, ``dog_0``, ``the_2 nice_1``, ``nice_1 dog_0`` and
    ``the_2 nice_1 dog_0``.
    """
    lo = max(0, t - window + 1)
    out = []
    for a in range(lo, t + 1):
        for b in range(a, t + 1):
            out.append(" ".join(f"{forms[k]}_{t - k}" for k in range(a, b + 1)))
    return out


@dataclass
class LogisticFit:
    weights: np.ndarray  # (K, P)
    intercept: np.ndarray  # (K,)
    iterations: int
    grad_norm: float
    objective: list[float]

    def decision(self, X) -> np.ndarray:
        return np.asarray(X @ self.weights.T) + self.intercept

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision(X), axis=1)


def _logistic_objective(X, Y, W, b, lam):
    Z = np.asarray(X @ W.T) + b
    Z = Z - Z.max(axis=1, keepdims=True)
    logZ = np.log(np.exp(Z).sum(axis=1, keepdims=True))
    logP = Z - logZ
    n = X.shape[0]
    f = -float(np.sum(Y * logP)) / n + 0.5 * lam * float(np.sum(W * W))
    G = (np.exp(logP) - Y) / n
    gW = np.asarray(X.T @ G).T + lam * W
    gb = G.sum(axis=0)
    return f, gW, gb


def fit_multinomial_logistic(
    X, y, n_classes: int, lam: float = 0.01, tol: float = 1e-6, max_iter: int = 100_000
) -> LogisticFit:
    """L2-penalised softmax regression by full-batch gradient descent.

    Objective: mean cross-entropy + ``lam/2 |W|^2`` (intercepts unpenalised).
    Each step starts from a Barzilai-Borwein length and backtracks until the
    Armijo condition holds, so the objective never increases.  Stops when
    the gradient's infinity norm drops below ``tol``.
    """
    y = np.asarray(y, dtype=np.int64)
    n, p = X.shape
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0
    W = np.zeros((n_classes, p))
    b = np.zeros(n_classes)
    f, gW, gb = _logistic_objective(X, Y, W, b, lam)
    history = [f]
    step = 1.0
    prev = None
    for it in range(1, max_iter + 1):
        gnorm = max(np.abs(gW).max(initial=0.0), np.abs(gb).max(initial=0.0))
        if gnorm < tol:
            return LogisticFit(W, b, it - 1, float(gnorm), history)
        g2 = float(np.sum(gW * gW) + np.sum(gb * gb))
        if prev is not None:
            sW, sb, dW, db = W - prev[0], b - prev[1], gW - prev[2], gb - prev[3]
            sy = float(np.sum(sW * dW) + np.sum(sb * db))
            if sy > 0:
                step = float(np.sum(sW * sW) + np.sum(sb * sb)) / sy
        step = min(max(step, 1e-10), 1e10)
        while True:
            W_new, b_new = W - step * gW, b - step * gb
            f_new, gW_new, gb_new = _logistic_objective(X, Y, W_new, b_new, lam)
            if f_new <= f - 1e-4 * step * g2 or step < 1e-14:
                break
            step *= 0.5
        if f_new > f:
            # no representable descent step left above tol
            raise ProbeConvergenceError(it, float(gnorm))
        prev = (W, b, gW, gb)
        W, b, f, gW, gb = W_new, b_new, f_new, gW_new, gb_new
        history.append(f)
    gnorm = max(np.abs(gW).max(initial=0.0), np.abs(gb).max(initial=0.0))
    raise ProbeConvergenceError(max_iter, float(gnorm))


@dataclass
class ProbeResult:
    labels: list[str]
    ngram_names: list[str]
    ngram_coef: np.ndarray  # (K, F)
    activation_coef: np.ndarray  # (K, d)
    intercept: np.ndarray
    top_units: dict[str, list[int]]
    train_accuracy: float
    window: int
    lam: float
    min_feature_count: int
    iterations: int
    objective: list[float] = field(repr=False, default_factory=list)


def probe_design(sentences: Sequence[AnnotatedSentence], hidden: Sequence[np.ndarray], window: int,
                 min_feature_count: int, vocabulary: dict[str, int] | None = None):
    """Rows are content tokens; columns are pruned n-gram indicators then activations."""
    feats, acts, labels = [], [], []
    for s, H in zip(sentences, hidden):
        if H.shape[0] != len(s):
            raise ValueError(f"{s.sid}: {H.shape[0]} hidden states for {len(s)} tokens")
        forms = s.forms
        for t, tok in enumerate(s.content):
            feats.append(ngram_features(forms, t, window))
            acts.append(H[t])
            labels.append(tok.deprel)
    if vocabulary is None:
        counts = Counter(f for fs in feats for f in fs)
        kept = sorted(f for f, c in counts.items() if c >= min_feature_count)
        vocabulary = {f: i for i, f in enumerate(kept)}
    rows, cols = [], []
    for i, fs in enumerate(feats):
        for f in fs:
            j = vocabulary.get(f)
            if j is not None:
                rows.append(i)
                cols.append(j)
    Xn = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(feats), len(vocabulary)))
    A = np.array(acts).reshape(len(acts), -1)
    X = sp.hstack([Xn, sp.csr_matrix(A)], format="csr")
    return X, labels, vocabulary


def fit_logistic_probe(
    sentences: Sequence[AnnotatedSentence],
    hidden: Sequence[np.ndarray],
    window: int = 4,
    lam: float = 0.01,
    top_k: int = 5,
    min_feature_count: int = 5,
    tol: float = 1e-6,
    max_iter: int = 100_000,
) -> ProbeResult:
    """Predict each content token's deprel from n-grams plus its hidden state.

    ``hidden[i]`` holds the per-step states of ``sentences[i]`` (end marker
    included).  Top units are ranked by absolute activation coefficient.
    """
    X, labels, vocab = probe_design(sentences, hidden, window, min_feature_count)
    classes = sorted(set(labels))
    cix = {c: i for i, c in enumerate(classes)}
    y = np.array([cix[l] for l in labels])
    fit = fit_multinomial_logistic(X, y, len(classes), lam=lam, tol=tol, max_iter=max_iter)
    F = len(vocab)
    ngram_coef, act_coef = fit.weights[:, :F], fit.weights[:, F:]
    top = {}
    for k, c in enumerate(classes):
        order = np.argsort(-np.abs(act_coef[k]), kind="stable")
        top[c] = [int(u) for u in order[:top_k]]
    acc = float(np.mean(fit.predict(X) == y))
    names = sorted(vocab, key=vocab.get)
    return ProbeResult(classes, names, ngram_coef, act_coef, fit.intercept, top, acc, window, lam,
                       min_feature_count, fit.iterations, fit.objective)
