import math

import numpy as np
import pytest

from grulens.corpus import POSITION_BINS, AnnotatedSentence, position_bin
from grulens.problab import (
    MODEL_SPECS,
    ProbeConvergenceError,
    ScoredToken,
    SingularDesignError,
    build_design,
    fit_logistic_probe,
    fit_model,
    fit_multinomial_logistic,
    fit_ridge,
    ngram_features,
    position_coefficients,
    r2_score,
    r_squared,
    rank_words_by_deprel_gain,
    ridge_standard_errors,
    run_lm_suite,
    split_sentences,
)

WORDS = [f"w{i}" for i in range(8)]
DEPRELS = ["det", "nsubj", "amod", "pobj"]


def synthetic_tokens(seed, n_sentences=300, score=None, noise=0.05):
    """Random sentences; ``score(word_index, deprel, bin, rng)`` plants the target."""
    rng = np.random.default_rng(seed)
    effects = rng.normal(size=len(WORDS))
    out = []
    for s in range(n_sentences):
        n = int(rng.integers(4, 11))
        for i in range(n):
            w = int(rng.integers(len(WORDS)))
            dep = DEPRELS[int(rng.integers(len(DEPRELS)))]
            b = position_bin(i, n)
            y = effects[w] if score is None else score(w, dep, b, effects)
            out.append(ScoredToken(f"s{s:04d}", i, WORDS[w], dep, b, float(y + noise * rng.normal())))
    return out


def tok(form, dep, b, y=0.0, sid="s", i=0):
    return ScoredToken(sid, i, form, dep, b, y)


# -- design -----------------------------------------------------------------


def test_design_widths():
    toks = [tok(w, d, "first") for w in ("a", "b") for d in ("x", "y")]
    assert build_design(toks, MODEL_SPECS["WORD"])[0].shape[1] == 2
    assert build_design(toks, MODEL_SPECS["DEPREL"])[0].shape[1] == 8


def test_design_hand_table():
    toks = [
        tok("the", "det", "first"), tok("dog", "nsubj", "last"), tok("the", "det", "penult"),
        tok("cat", "nsubj", "last"), tok("dog", "pobj", "first"),
    ]
    X, fmap = build_design(toks, MODEL_SPECS["DEPREL"])
    # word: cat dog the | deprel: det nsubj pobj | word×deprel: cat|nsubj dog|nsubj dog|pobj the|det
    expected = np.array([
        [0, 0, 1, 1, 0, 0, 0, 0, 0, 1],
        [0, 1, 0, 0, 1, 0, 0, 1, 0, 0],
        [0, 0, 1, 1, 0, 0, 0, 0, 0, 1],
        [1, 0, 0, 0, 1, 0, 1, 0, 0, 0],
        [0, 1, 0, 0, 0, 1, 0, 0, 1, 0],
    ], dtype=float)
    assert np.array_equal(X.toarray(), expected)
    assert fmap.names()[:3] == ["word=cat", "word=dog", "word=the"]


def test_design_unseen_category_is_zero():
    _, fmap = build_design([tok("a", "x", "first"), tok("b", "y", "last")], MODEL_SPECS["FULL"])
    X, _ = build_design([tok("zzz", "x", "first")], MODEL_SPECS["FULL"], fmap)
    assert X.sum() == 2  # deprel=x and position=first only


def test_design_empty_is_error():
    with pytest.raises(ValueError):
        build_design([], MODEL_SPECS["WORD"])


# -- ridge ------------------------------------------------------------------


def test_ridge_shrinkage_limit():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(20, 4)), rng.normal(size=20)
    fit = fit_ridge(X, y, 1e9)
    assert np.max(np.abs(fit.weights)) < 1e-6
    assert np.allclose(fit.predict(X), y.mean(), atol=1e-6)


def test_ridge_identity_without_intercept():
    y = np.array([0.3, -1.0, 2.5, 4.0])
    fit = fit_ridge(np.eye(4), y, 0.0, intercept=False)
    assert np.allclose(fit.weights, y, atol=1e-14) and fit.intercept == 0.0


def test_ridge_closed_form_oracle():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(6, 3))
    X -= X.mean(axis=0)  # the textbook formula assumes centered columns
    y = rng.normal(size=6)
    lam = 0.1
    oracle = np.linalg.inv(X.T @ X + lam * np.eye(3)) @ X.T @ (y - y.mean())
    assert np.max(np.abs(fit_ridge(X, y, lam).weights - oracle)) < 1e-10


def test_ridge_augmented_oracle_uncentered():
    # intercept as an extra, unpenalised column
    rng = np.random.default_rng(7)
    X, y, lam = rng.normal(size=(6, 3)) + 2.0, rng.normal(size=6), 0.1
    A = np.hstack([X, np.ones((6, 1))])
    P = lam * np.diag([1, 1, 1, 0.0])
    sol = np.linalg.solve(A.T @ A + P, A.T @ y)
    fit = fit_ridge(X, y, lam)
    assert np.max(np.abs(fit.weights - sol[:3])) < 1e-10
    assert abs(fit.intercept - sol[3]) < 1e-10


def test_ridge_unique_minimizer():
    rng = np.random.default_rng(8)
    X, y, lam = rng.normal(size=(15, 4)), rng.normal(size=15), 0.5
    fit = fit_ridge(X, y, lam)

    def objective(w, b):
        r = y - X @ w - b
        return r @ r + lam * w @ w

    base = objective(fit.weights, fit.intercept)
    for j in range(4):
        for d in (-1e-3, 1e-3):
            w = fit.weights.copy()
            w[j] += d
            assert objective(w, fit.intercept) > base
    for d in (-1e-3, 1e-3):
        assert objective(fit.weights, fit.intercept + d) > base


def test_ridge_singular_at_zero_lambda():
    X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(SingularDesignError, match="lam > 0"):
        fit_ridge(X, [1.0, 2.0, 3.5], 0.0)
    fit = fit_ridge(X, [1.0, 2.0, 3.5], 0.0, min_norm=True)
    assert fit.weights[0] == pytest.approx(fit.weights[1])


def test_ridge_row_mismatch():
    with pytest.raises(ValueError):
        fit_ridge(np.ones((3, 2)), [1.0, 2.0], 1.0)


# -- R^2 --------------------------------------------------------------------


def test_r2_examples():
    y = np.array([1.0, 2.0, 4.0])
    assert r2_score(y, y) == 1.0
    assert r2_score(y, np.full(3, y.mean())) == 0.0
    rng = np.random.default_rng(3)
    y, yhat = rng.normal(size=30), rng.normal(size=30)
    m = sum(y) / len(y)
    direct = 1 - sum((a - b) ** 2 for a, b in zip(y, yhat)) / sum((a - m) ** 2 for a in y)
    assert r2_score(y, yhat) == pytest.approx(direct, abs=1e-12)
    with pytest.raises(ValueError):
        r2_score([1.0, 1.0], [1.0, 1.0])


def test_r_squared_on_records():
    toks = synthetic_tokens(0, 40)
    fit = fit_model(toks, "WORD", 1e-8)
    assert r_squared(fit, toks) > 0.95


# -- suite ------------------------------------------------------------------


def test_split_is_half_and_seeded():
    ids = [f"s{i}" for i in range(11)]
    a, b = split_sentences(ids, 4)
    assert len(a) == 6 and len(b) == 5 and not a & b
    assert split_sentences(reversed(ids), 4) == (a, b)


def test_suite_pure_word_effects():
    toks = synthetic_tokens(1)
    res = run_lm_suite({"VISUAL": toks}, split_seed=0, lam=1.0)
    assert abs(res.delta["VISUAL"]["FULL"]) < 0.01


def test_suite_planted_position_effect():
    toks = synthetic_tokens(2, score=lambda w, d, b, e: e[w] + (1.5 if b == "last" else 0.0))
    res = run_lm_suite({"TEXTUAL": toks}, split_seed=0, lam=1.0)
    assert res.delta["TEXTUAL"]["POSITION"] > 0.1


def test_suite_nested_ols_on_training_half():
    toks = synthetic_tokens(3, 120, score=lambda w, d, b, e: e[w] + 0.3 * DEPRELS.index(d), noise=0.3)
    res = run_lm_suite({"SUM": toks, "VISUAL": toks}, lam=0.0, evaluate_on="train")
    for r in res.r2.values():
        assert r["FULL"] >= r["DEPREL"] - 1e-9 and r["DEPREL"] >= r["WORD"] - 1e-9
        assert r["FULL"] >= r["POSITION"] - 1e-9 and r["POSITION"] >= r["WORD"] - 1e-9


def test_suite_invariant_to_record_order():
    toks = synthetic_tokens(4, 80)
    shuffled = [toks[i] for i in np.random.default_rng(0).permutation(len(toks))]
    a = run_lm_suite({"V": toks}, split_seed=3).to_json()
    b = run_lm_suite({"V": shuffled}, split_seed=3).to_json()
    assert a == b


# -- deprel gain ------------------------------------------------------------


def test_gain_prefers_deprel_driven_word():
    def score(w, d, b, e):
        if w == 0:
            return float(DEPRELS.index(d))
        if w == 1:
            return 0.5
        return e[w]

    ranked, dists = rank_words_by_deprel_gain(synthetic_tokens(5, 400, score), min_count=20)
    order = [g.word for g in ranked]
    assert order.index("w0") < order.index("w1")
    assert ranked[0].word == "w0" and ranked[0].gain > 0.3
    assert set(dists["w0"]) <= set(DEPRELS)


def test_gain_min_count_threshold():
    fit_ids, eval_ids = split_sentences([f"s{i:03d}" for i in range(400)], 0)
    eval_ids = sorted(eval_ids)
    toks = []
    for k, sid in enumerate(sorted(fit_ids | set(eval_ids))):
        toks.append(ScoredToken(sid, 0, "base", "det", "first", 0.1 * (k % 7)))
    for k, sid in enumerate(eval_ids[:99]):
        toks.append(ScoredToken(sid, 1, "rare", "nsubj", "last", 0.2))
    for k, sid in enumerate(eval_ids[:100]):
        toks.append(ScoredToken(sid, 2, "ok", "amod", "last", 0.3))
    ranked, _ = rank_words_by_deprel_gain(toks, min_count=100)
    words = {g.word: g.count for g in ranked}
    assert "rare" not in words and words["ok"] == 100


def test_gain_constant_targets():
    toks = synthetic_tokens(6, 100, score=lambda *a: 0.7, noise=0.0)
    ranked, _ = rank_words_by_deprel_gain(toks, min_count=1)
    assert all(abs(g.gain) < 1e-10 for g in ranked)


# -- position coefficients --------------------------------------------------


def test_position_coefficients_planted_last():
    toks = synthetic_tokens(7, score=lambda w, d, b, e: e[w] + (1.0 if b == "last" else 0.0))
    coefs = position_coefficients(fit_model(toks, "FULL", 1.0))
    assert list(coefs) == list(POSITION_BINS)
    assert max(coefs, key=coefs.get) == "last"
    assert all(coefs["last"] > v for k, v in coefs.items() if k != "last")


def test_position_coefficients_null_model():
    toks = synthetic_tokens(8, noise=0.3)
    fit = fit_model(toks, "FULL", 1.0)
    X, _ = build_design(toks, fit.feature_map.blocks, fit.feature_map)
    se = ridge_standard_errors(fit, X, [t.score for t in toks])
    cols = fit.feature_map.columns["position"]
    for b, c in position_coefficients(fit).items():
        assert abs(c) <= 3 * se[cols[b]]


def test_position_coefficients_deterministic_and_need_block():
    toks = synthetic_tokens(9, 60)
    a = position_coefficients(fit_model(toks, "FULL", 1.0))
    b = position_coefficients(fit_model(toks, "FULL", 1.0))
    assert np.array(list(a.values())).tobytes() == np.array(list(b.values())).tobytes()
    with pytest.raises(ValueError):
        position_coefficients(fit_model(toks, "WORD", 1.0))


# -- logistic probes --------------------------------------------------------


def test_ngram_features_example():
    assert ngram_features(["the", "nice", "dog"], 2) == [
        "the_2", "the_2 nice_1", "the_2 nice_1 dog_0", "nice_1", "nice_1 dog_0", "dog_0",
    ]
    assert len(ngram_features(list("abcdefg"), 6, window=4)) == 10


def probe_corpus(seed, n_sentences, label_of, d=10):
    rng = np.random.default_rng(seed)
    sents, hidden = [], []
    for s in range(n_sentences):
        n = int(rng.integers(3, 7))
        H = rng.normal(size=(n + 1, d))
        forms = [WORDS[int(rng.integers(len(WORDS)))] for _ in range(n)]
        triples = [(f, "X", label_of(f, H[i])) for i, f in enumerate(forms)]
        sents.append(AnnotatedSentence.from_triples(f"p{s:03d}", triples))
        hidden.append(H)
    return sents, hidden


def test_probe_planted_unit():
    sents, hidden = probe_corpus(0, 80, lambda f, h: "a" if h[7] < -0.4 else ("b" if h[7] < 0.4 else "c"))
    res = fit_logistic_probe(sents, hidden, lam=0.01, min_feature_count=5)
    assert res.labels == ["a", "b", "c"]
    for units in res.top_units.values():
        assert 7 in units
    assert all(u < 10 for us in res.top_units.values() for u in us)
    assert np.all(np.diff(res.objective) <= 0)


def test_probe_redundant_activations_shrink():
    sents, hidden = probe_corpus(1, 150, lambda f, h: "nsubj" if f in ("w0", "w1", "w2", "w3") else "amod")
    res = fit_logistic_probe(sents, hidden, lam=0.01)
    assert np.max(np.abs(res.activation_coef)) < 0.1 * np.max(np.abs(res.ngram_coef))
    assert res.train_accuracy == 1.0


def test_logistic_separable_two_class():
    X = np.array([[0.0, 1.0], [1.0, 2.0], [2.0, 0.5], [3.0, 1.5], [4.0, 0.0], [5.0, 1.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    fit = fit_multinomial_logistic(X, y, 2, lam=0.01)
    assert np.all(fit.predict(X) == y)
    assert fit.grad_norm < 1e-6
    assert np.all(np.diff(fit.objective) <= 0)


def test_logistic_budget_exhausted():
    X = np.random.default_rng(0).normal(size=(30, 3))
    y = (X[:, 0] > 0).astype(int)
    with pytest.raises(ProbeConvergenceError) as err:
        fit_multinomial_logistic(X, y, 2, lam=0.01, max_iter=2)
    assert err.value.grad_norm > 1e-6


def test_logistic_gradient_matches_finite_differences():
    from grulens.problab import _logistic_objective

    rng = np.random.default_rng(2)
    X = rng.normal(size=(12, 4))
    Y = np.eye(3)[rng.integers(0, 3, size=12)]
    W, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    _, gW, gb = _logistic_objective(X, Y, W, b, 0.1)
    eps = 1e-6
    for k in range(3):
        for j in range(4):
            Wp, Wm = W.copy(), W.copy()
            Wp[k, j] += eps
            Wm[k, j] -= eps
            num = (_logistic_objective(X, Y, Wp, b, 0.1)[0] - _logistic_objective(X, Y, Wm, b, 0.1)[0]) / (2 * eps)
            assert math.isclose(num, gW[k, j], rel_tol=1e-6, abs_tol=1e-9)


def test_min_norm_fit_reaches_least_squares_optimum():
    # one-hot blocks with an intercept are collinear; the fit must still be the OLS optimum
    toks = synthetic_tokens(10, 150, noise=0.3)
    X, fmap = build_design(toks, MODEL_SPECS["FULL"])
    y = np.array([t.score for t in toks])
    fit = fit_ridge(X, y, 0.0, fmap, min_norm=True)
    A = np.hstack([X.toarray(), np.ones((len(y), 1))])
    best = A @ np.linalg.lstsq(A, y, rcond=None)[0]
    assert r2_score(y, fit.predict(X)) == pytest.approx(r2_score(y, best), abs=1e-10)
    assert np.max(np.abs(fit.weights)) < 1e3
