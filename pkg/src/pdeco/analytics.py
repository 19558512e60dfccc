"""Function families the enclave can run over decoded records.

All functions are pure. Text is tokenized by casefolding and splitting on
every non-alphanumeric character (``str.isalnum``); the same rule is used for
dictionary entities, lexicon tokens and hashed bag-of-words features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import PdecoError, content_hash

DEFAULT_FEATURE_DIM = 256


class EvaluationError(PdecoError):
    """A function family cannot produce a value for its input."""

    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


class LayoutMismatch(EvaluationError):
    def __init__(self, message: str = ""):
        super().__init__("LayoutMismatch", message)


def tokenize(text: str) -> list[str]:
    tokens: list[str] = []
    current: list[str] = []
    for ch in text.casefold():
        if ch.isalnum():
            current.append(ch)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens


# -- named entities ----------------------------------------------------------


class EntityDictionary:
    """A set of lowercase entity names, possibly multi-word."""

    def __init__(self, entries: Iterable[str]):
        cleaned = set()
        for e in entries:
            e = e.strip().lower()
            if not e or "\n" in e or "\r" in e:
                raise ValueError(f"bad entity entry {e!r}")
            if not tokenize(e):
                raise ValueError(f"entity {e!r} has no alphanumeric content")
            cleaned.add(e)
        if not cleaned:
            raise ValueError("entity dictionary must not be empty")
        self.entries = frozenset(cleaned)
        self._patterns = {e: tuple(tokenize(e)) for e in self.entries}

    def patterns(self) -> Mapping[str, tuple[str, ...]]:
        return self._patterns


def ner_count(texts: Iterable[str], dictionary: EntityDictionary) -> dict[str, int]:
    """Count occurrences of each entity's token sequence; zero counts omitted."""
    by_first: dict[str, list[tuple[str, tuple[str, ...]]]] = {}
    for entity, pattern in dictionary.patterns().items():
        by_first.setdefault(pattern[0], []).append((entity, pattern))
    counts: dict[str, int] = {}
    for text in texts:
        tokens = tokenize(text)
        for i, tok in enumerate(tokens):
            for entity, pattern in by_first.get(tok, ()):
                if tuple(tokens[i:i + len(pattern)]) == pattern:
                    counts[entity] = counts.get(entity, 0) + 1
    return counts


# -- sentiment ---------------------------------------------------------------


class SentimentLexicon:
    def __init__(self, scores: Mapping[str, float]):
        table = {}
        for token, score in scores.items():
            score = float(score)
            if not -1.0 <= score <= 1.0:
                raise ValueError(f"score for {token!r} outside [-1, 1]")
            key = token.casefold()
            if tokenize(key) != [key]:
                raise ValueError(f"lexicon token {token!r} is not a single token")
            table[key] = score
        self.scores = table


def sentiment_avg(texts: Iterable[str], lexicon: SentimentLexicon) -> dict[str, Any]:
    """Mean lexicon score over every matched token.

    With no matches the mean is reported as 0.0 and ``defined`` is False.
    """
    total = 0.0
    matched = 0
    for text in texts:
        for tok in tokenize(text):
            score = lexicon.scores.get(tok)
            if score is not None:
                total += score
                matched += 1
    if matched == 0:
        return {"mean": 0.0, "matched_tokens": 0, "defined": False}
    return {"mean": total / matched, "matched_tokens": matched, "defined": True}


# -- statistics ----------------------------------------------------------------


def _field(payload: Mapping[str, Any], path: str) -> Any:
    value: Any = payload
    for part in path.split("."):
        if not isinstance(value, Mapping) or part not in value:
            return None
        value = value[part]
    return value


def _numeric_values(payloads: Iterable[Mapping[str, Any]], path: str) -> list[float]:
    values = []
    for p in payloads:
        v = _field(p, path)
        if v is None:
            continue
        if not isinstance(v, (int, float)):
            raise EvaluationError("NonNumeric", f"field {path!r} is {type(v).__name__}")
        values.append(float(v))
    return values


def stat(payloads: Sequence[Mapping[str, Any]], kind: str, field: Optional[str] = None) -> float:
    """``count`` of records, or ``sum``/``mean`` of a numeric (or boolean) field."""
    if kind == "count":
        return len(payloads)
    if kind not in ("sum", "mean"):
        raise EvaluationError("UnknownStat", kind)
    if not field:
        raise EvaluationError("MissingField", f"{kind} needs a field")
    values = _numeric_values(payloads, field)
    if kind == "sum":
        return math.fsum(values)
    if not values:
        raise EvaluationError("EmptyInput", "mean of zero values")
    return math.fsum(values) / len(values)


def linreg_fit(payloads: Sequence[Mapping[str, Any]], x_field: str, y_field: str) -> dict[str, Any]:
    """Closed-form ordinary least squares for ``y = slope * x + intercept``."""
    pairs = []
    for p in payloads:
        x, y = _field(p, x_field), _field(p, y_field)
        if x is None or y is None:
            continue
        if not isinstance(x, (int, float)) or not isinstance(y, (int, float)):
            raise EvaluationError("NonNumeric", "regression fields must be numeric")
        pairs.append((float(x), float(y)))
    n = len(pairs)
    if n < 2:
        raise EvaluationError("Degenerate", "need at least two points")
    mean_x = math.fsum(x for x, _ in pairs) / n
    mean_y = math.fsum(y for _, y in pairs) / n
    sxx = math.fsum((x - mean_x) ** 2 for x, _ in pairs)
    if sxx == 0.0:
        raise EvaluationError("Degenerate", "zero variance in x")
    sxy = math.fsum((x - mean_x) * (y - mean_y) for x, y in pairs)
    slope = sxy / sxx
    return {"slope": slope, "intercept": mean_y - slope * mean_x, "n": n}


# -- models ------------------------------------------------------------------


def _param_count(feature_dim: int, hidden_dim: int) -> int:
    if hidden_dim == 0:
        return feature_dim + 1
    return hidden_dim * feature_dim + hidden_dim + hidden_dim + 1


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat float64 weights plus the layout that gives them shape.

    ``hidden_dim == 0`` is logistic regression: ``[w (feature_dim), b]``.
    Otherwise a one-hidden-layer tanh network:
    ``[W1 (hidden x feature, row-major), b1 (hidden), w2 (hidden), b2]``.
    """

    feature_dim: int
    hidden_dim: int
    weights: np.ndarray

    def __post_init__(self):
        if self.feature_dim < 1 or self.hidden_dim < 0:
            raise ValueError("bad model layout")
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if w.size != _param_count(self.feature_dim, self.hidden_dim):
            raise ValueError(
                f"weights length {w.size} does not match layout "
                f"({self.feature_dim}, {self.hidden_dim})"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def layout(self) -> tuple[int, int]:
        return (self.feature_dim, self.hidden_dim)

    @classmethod
    def zeros(cls, feature_dim: int = DEFAULT_FEATURE_DIM, hidden_dim: int = 0) -> "ModelParams":
        return cls(feature_dim, hidden_dim, np.zeros(_param_count(feature_dim, hidden_dim)))

    @classmethod
    def init(cls, feature_dim: int, hidden_dim: int, seed: int, scale: float = 0.1) -> "ModelParams":
        rng = np.random.default_rng(seed)
        return cls(feature_dim, hidden_dim, rng.normal(0.0, scale, _param_count(feature_dim, hidden_dim)))

    def to_wire(self) -> dict[str, Any]:
        return {
            "feature_dim": self.feature_dim,
            "hidden_dim": self.hidden_dim,
            "weights": self.weights.astype(">f8").tobytes(),
        }

    @classmethod
    def from_wire(cls, doc: Mapping[str, Any]) -> "ModelParams":
        try:
            raw = doc["weights"]
            if not isinstance(raw, bytes) or len(raw) % 8:
                raise ValueError("weights must be packed float64")
            return cls(int(doc["feature_dim"]), int(doc["hidden_dim"]),
                       np.frombuffer(raw, dtype=">f8").astype(np.float64))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed model parameters: {exc}") from exc

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.weights, other.weights)

    def identical(self, other: "ModelParams") -> bool:
        """Bit-for-bit equality (distinguishes -0.0 and 0.0)."""
        return self.layout == other.layout and self.weights.tobytes() == other.weights.tobytes()


_bucket_cache: dict[tuple[str, int], int] = {}


def feature_bucket(token: str, dim: int) -> int:
    key = (token, dim)
    b = _bucket_cache.get(key)
    if b is None:
        b = int.from_bytes(content_hash(token.encode("utf-8"))[:8], "big") % dim
        if len(_bucket_cache) < 1_000_000:
            _bucket_cache[key] = b
    return b


def featurize(texts: Sequence[str], dim: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    """Hashed bag-of-words term counts, shape ``(len(texts), dim)``."""
    X = np.zeros((len(texts), dim), dtype=np.float64)
    for i, text in enumerate(texts):
        for tok in tokenize(text):
            X[i, feature_bucket(tok, dim)] += 1.0
    return X


def _unpack(params: ModelParams):
    d, h = params.layout
    w = params.weights
    if h == 0:
        return w[:d], w[d]
    W1 = w[: h * d].reshape(h, d)
    b1 = w[h * d: h * d + h]
    w2 = w[h * d + h: h * d + 2 * h]
    return W1, b1, w2, w[-1]


def predict_logits(params: ModelParams, X: np.ndarray) -> np.ndarray:
    if params.hidden_dim == 0:
        w, b = _unpack(params)
        return X @ w + b
    W1, b1, w2, b2 = _unpack(params)
    return np.tanh(X @ W1.T + b1) @ w2 + b2


def bce_loss(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy on logits, computed stably."""
    z = predict_logits(params, X)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_gradient(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Analytic gradient of :func:`bce_loss` with respect to the flat weights."""
    n = X.shape[0]
    if params.hidden_dim == 0:
        w, b = _unpack(params)
        r = (_sigmoid(X @ w + b) - y) / n
        return np.concatenate([X.T @ r, [r.sum()]])
    W1, b1, w2, b2 = _unpack(params)
    a = np.tanh(X @ W1.T + b1)
    r = (_sigmoid(a @ w2 + b2) - y) / n
    delta = np.outer(r, w2) * (1.0 - a * a)
    return np.concatenate([(delta.T @ X).reshape(-1), delta.sum(axis=0), a.T @ r, [r.sum()]])


def accuracy(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean((predict_logits(params, X) > 0.0) == (y > 0.5)))


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 5
    learning_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_wire(self) -> dict[str, Any]:
        return {"epochs": self.epochs, "learning_rate": float(self.learning_rate), "seed": self.seed}

    @classmethod
    def from_wire(cls, doc: Mapping[str, Any]) -> "TrainHyper":
        return cls(int(doc["epochs"]), float(doc["learning_rate"]), int(doc.get("seed", 0)))


def training_arrays(payloads: Sequence[Mapping[str, Any]], dim: int) -> tuple[np.ndarray, np.ndarray]:
    X = featurize([p["title"] for p in payloads], dim)
    y = np.array([1.0 if p["engaged"] else 0.0 for p in payloads])
    return X, y


def local_train(
    payloads: Sequence[Mapping[str, Any]],
    model_in: ModelParams,
    hyper: TrainHyper,
    feature_dim: Optional[int] = None,
) -> dict[str, Any]:
    """Full-batch gradient descent on ``labeled_title.v1`` payloads.

    ``seed`` is accepted for interface stability; full-batch descent from a
    given ``model_in`` draws no randomness.
    """
    if not payloads:
        raise EvaluationError("EmptyInput", "no training records")
    dim = feature_dim if feature_dim is not None else model_in.feature_dim
    if model_in.feature_dim != dim:
        raise LayoutMismatch(f"model expects {model_in.feature_dim} features, extractor gives {dim}")
    X, y = training_arrays(payloads, dim)
    w = model_in.weights.copy()
    current = model_in
    for _ in range(hyper.epochs):
        w = w - hyper.learning_rate * loss_gradient(current, X, y)
        current = ModelParams(model_in.feature_dim, model_in.hidden_dim, w)
    return {"model_out": current, "n_samples": len(payloads), "loss_final": bce_loss(current, X, y)}
