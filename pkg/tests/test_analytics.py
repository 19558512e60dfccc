import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdeco.analytics import (
    EntityDictionary,
    EvaluationError,
    LayoutMismatch,
    ModelParams,
    SentimentLexicon,
    TrainHyper,
    accuracy,
    bce_loss,
    featurize,
    linreg_fit,
    local_train,
    loss_gradient,
    ner_count,
    sentiment_avg,
    stat,
    tokenize,
)
from pdeco.synth import BRANDS, random_text


def regex_ner(texts, entities):
    """Sliding-window oracle over ASCII word tokens."""
    counts = {}
    for text in texts:
        toks = re.findall(r"[a-z0-9]+", text.lower())
        for e in entities:
            pat = re.findall(r"[a-z0-9]+", e.lower())
            n = sum(1 for i in range(len(toks)) if toks[i:i + len(pat)] == pat)
            if n:
                counts[e.lower()] = counts.get(e.lower(), 0) + n
    return counts


def numeric_gradient(params, X, y, eps=1e-6):
    w = params.weights
    out = np.empty_like(w)
    for i in range(w.size):
        up, down = w.copy(), w.copy()
        up[i] += eps
        down[i] -= eps
        lp = bce_loss(ModelParams(params.feature_dim, params.hidden_dim, up), X, y)
        lm = bce_loss(ModelParams(params.feature_dim, params.hidden_dim, down), X, y)
        out[i] = (lp - lm) / (2 * eps)
    return out


# -- tokenizer and NER ----------------------------------------------------------


def test_tokenize():
    assert tokenize("Hello, WORLD! a-b  c9") == ["hello", "world", "a", "b", "c9"]
    assert tokenize("") == []


def test_ner_hand_example():
    d = EntityDictionary(["Acme", "Stark Industries"])
    texts = ["Acme beats acme.", "stark industries and Stark-Industries", "Stark alone"]
    assert ner_count(texts, d) == {"acme": 2, "stark industries": 2}


def test_ner_omits_zero_counts():
    assert ner_count(["nothing here"], EntityDictionary(["acme"])) == {}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_ner_matches_regex_oracle(seed):
    import random

    rng = random.Random(seed)
    texts = [random_text(rng, 12) + " " + rng.choice(BRANDS) + " " + random_text(rng, 4) for _ in range(5)]
    assert ner_count(texts, EntityDictionary(BRANDS)) == regex_ner(texts, BRANDS)


def test_entity_dictionary_validation():
    with pytest.raises(ValueError):
        EntityDictionary([])
    with pytest.raises(ValueError):
        EntityDictionary(["!!!"])
    with pytest.raises(ValueError):
        EntityDictionary(["a\nb"])


# -- sentiment ----------------------------------------------------------------


def test_sentiment_hand_values():
    lex = SentimentLexicon({"good": 1.0, "bad": -0.5})
    out = sentiment_avg(["good good bad", "meh"], lex)
    assert out == {"mean": 0.5, "matched_tokens": 3, "defined": True}
    assert sentiment_avg(["meh"], lex) == {"mean": 0.0, "matched_tokens": 0, "defined": False}


def test_sentiment_lexicon_validation():
    with pytest.raises(ValueError):
        SentimentLexicon({"good": 2.0})
    with pytest.raises(ValueError):
        SentimentLexicon({"two words": 0.1})


# -- statistics ----------------------------------------------------------------


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
def test_stat_matches_fsum(values):
    payloads = [{"m": {"v": v}} for v in values]
    assert stat(payloads, "count") == len(values)
    assert stat(payloads, "sum", "m.v") == math.fsum(values)
    assert stat(payloads, "mean", "m.v") == math.fsum(values) / len(values)


def test_stat_errors_and_booleans():
    assert stat([{"liked": True}, {"liked": False}, {"other": 1}], "sum", "liked") == 1.0
    with pytest.raises(EvaluationError):
        stat([{"x": "a"}], "sum", "x")
    with pytest.raises(EvaluationError):
        stat([], "mean", "x")
    with pytest.raises(EvaluationError):
        stat([], "median", "x")
    with pytest.raises(EvaluationError):
        stat([], "sum")


def test_linreg_matches_numpy_lstsq():
    rng = np.random.default_rng(3)
    x = rng.normal(size=40)
    y = 2.5 * x - 1.0 + rng.normal(scale=0.1, size=40)
    fit = linreg_fit([{"x": float(a), "y": float(b)} for a, b in zip(x, y)], "x", "y")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    assert fit["slope"] == pytest.approx(slope, rel=1e-12)
    assert fit["intercept"] == pytest.approx(intercept, rel=1e-12)
    assert fit["n"] == 40


def test_linreg_degenerate_inputs():
    with pytest.raises(EvaluationError):
        linreg_fit([{"x": 1.0, "y": 1.0}], "x", "y")
    with pytest.raises(EvaluationError):
        linreg_fit([{"x": 1.0, "y": 1.0}, {"x": 1.0, "y": 2.0}], "x", "y")


# -- models -------------------------------------------------------------------


def test_featurize_counts_tokens():
    X = featurize(["a a b", ""], dim=8)
    assert X.shape == (2, 8)
    assert X[0].sum() == 3 and X[1].sum() == 0


@pytest.mark.parametrize("hidden", [0, 3])
def test_gradient_matches_finite_differences(hidden):
    rng = np.random.default_rng(hidden)
    params = ModelParams.init(6, hidden, seed=hidden, scale=0.5)
    X = rng.normal(size=(10, 6))
    y = (rng.random(10) > 0.5).astype(float)
    analytic = loss_gradient(params, X, y)
    numeric = numeric_gradient(params, X, y)
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    assert rel < 1e-5


def test_params_wire_round_trip_and_validation():
    p = ModelParams.init(4, 2, seed=1)
    q = ModelParams.from_wire(p.to_wire())
    assert q.identical(p)
    with pytest.raises(ValueError):
        ModelParams(4, 0, np.zeros(4))
    with pytest.raises(ValueError):
        ModelParams(1, 0, np.array([np.inf, 0.0]))
    with pytest.raises(ValueError):
        ModelParams.from_wire({"feature_dim": 1, "hidden_dim": 0, "weights": b"\x00" * 7})
    assert not ModelParams(1, 0, [0.0, 0.0]).identical(ModelParams(1, 0, [-0.0, 0.0]))
    assert ModelParams(1, 0, [0.0, 0.0]) == ModelParams(1, 0, [-0.0, 0.0])


def titles(n):
    return [{"title": ("great win" if i % 2 else "boring loss"), "engaged": bool(i % 2)} for i in range(n)]


def test_local_train_with_zero_epochs_is_identity():
    p = ModelParams.init(16, 0, seed=2)
    out = local_train(titles(4), p, TrainHyper(epochs=0))
    assert out["model_out"].identical(p)
    assert out["n_samples"] == 4


def test_local_train_learns_separable_titles():
    p = ModelParams.zeros(16)
    out = local_train(titles(20), p, TrainHyper(epochs=50, learning_rate=1.0))
    X = featurize([t["title"] for t in titles(20)], 16)
    y = np.array([float(t["engaged"]) for t in titles(20)])
    assert accuracy(out["model_out"], X, y) == 1.0
    assert out["loss_final"] < bce_loss(p, X, y)


def test_local_train_errors():
    with pytest.raises(EvaluationError):
        local_train([], ModelParams.zeros(4), TrainHyper())
    with pytest.raises(LayoutMismatch):
        local_train(titles(2), ModelParams.zeros(4), TrainHyper(), feature_dim=8)
    with pytest.raises(ValueError):
        TrainHyper(epochs=-1)
    assert TrainHyper.from_wire(TrainHyper(3, 0.1, 7).to_wire()) == TrainHyper(3, 0.1, 7)
