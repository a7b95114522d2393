"""Token log-probability scoring and instruction embedding.

Two backends share one small interface (``fingerprint``,
``score_continuation``, ``embed``):

* the built-in add-k n-gram model plus a hashed bag-of-tokens embedder,
  fully deterministic and cheap enough for desk-scale runs;
* a remote HTTP backend speaking the ``/v1/score`` and ``/v1/embed`` protocol.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import string
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import requests

from .dataset import RenderedPair
from .errors import BackendError, ConfigError, DataError, EmbeddingError, EmptyAnswerError

BOS = "<bos>"
UNK = "<unk>"
RESERVED = (BOS, UNK)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

SNAPSHOT_FORMAT = "cherry-ngram/1"
API_KEY_ENV = "CHERRY_API_KEY"

_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip ASCII punctuation at piece edges.

    Pieces made only of punctuation vanish.
    """
    out = []
    for piece in text.lower().split():
        piece = piece.strip(_PUNCT)
        if piece:
            out.append(piece)
    return out


@dataclass(frozen=True)
class TokenLogProbs:
    tokens: list[str]
    logprobs: list[float]

    def __post_init__(self):
        if len(self.tokens) != len(self.logprobs):
            raise DataError("tokens and logprobs differ in length")
        for lp in self.logprobs:
            if not math.isfinite(lp) or lp > 0:
                raise DataError(f"invalid log-probability {lp!r}")

    def __len__(self):
        return len(self.tokens)

    def mean_nll(self) -> float:
        return -math.fsum(self.logprobs) / len(self.logprobs)


class Scorer(Protocol):
    fingerprint: str

    def score_continuation(self, context: str, continuation: str) -> TokenLogProbs: ...


class Embedder(Protocol):
    fingerprint: str

    def embed(self, text: str) -> np.ndarray: ...


# --------------------------------------------------------------------------
# n-gram model


class NGramModel:
    """Fixed-order n-gram model with add-k smoothing and no backoff.

    ``P(w | c) = (count(c, w) + k) / (total(c) + k * |V|)`` where ``V``
    includes the reserved ``<bos>`` and ``<unk>`` tokens. Unseen tokens and
    context tokens are mapped to ``<unk>`` at lookup time; the vocabulary is
    frozen once the model is built.
    """

    def __init__(self, order: int = 3, k: float = 0.1, vocab: Iterable[str] = (),
                 counts: dict[tuple[tuple[str, ...], str], int] | None = None):
        if order < 1:
            raise ConfigError("n-gram order must be >= 1")
        if not (k > 0 and math.isfinite(k)):
            raise ConfigError("smoothing k must be a positive finite number")
        self.order = int(order)
        self.k = float(k)
        self.vocab = frozenset(vocab) | frozenset(RESERVED)
        self.counts: dict[tuple[tuple[str, ...], str], int] = dict(counts or {})
        self.context_totals: dict[tuple[str, ...], int] = {}
        for (ctx, _), c in self.counts.items():
            self.context_totals[ctx] = self.context_totals.get(ctx, 0) + c
        self.fingerprint = self._compute_fingerprint()

    def __repr__(self):
        return f"NGramModel(order={self.order}, k={self.k}, |V|={len(self.vocab)}, fp={self.fingerprint})"

    def _canonical(self) -> dict:
        return {
            "order": self.order,
            "k": self.k,
            "vocab": sorted(self.vocab),
            "counts": sorted([list(ctx), w, c] for (ctx, w), c in self.counts.items()),
        }

    def _compute_fingerprint(self) -> str:
        blob = json.dumps(self._canonical(), separators=(",", ":"), ensure_ascii=False)
        digest = hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
        return f"ngram-n{self.order}-k{self.k:g}-{digest}"

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _lookup(self, tok: str) -> str:
        return tok if tok in self.vocab else UNK

    def prob(self, context: Sequence[str], token: str) -> float:
        ctx = tuple(self._lookup(t) for t in context)
        w = self._lookup(token)
        num = self.counts.get((ctx, w), 0) + self.k
        den = self.context_totals.get(ctx, 0) + self.k * len(self.vocab)
        return num / den

    def padded(self, tokens: Sequence[str]) -> list[str]:
        return [BOS] * (self.order - 1) + list(tokens)

    def score_tokens(self, context_tokens: Sequence[str], cont_tokens: Sequence[str]) -> list[float]:
        seq = self.padded(list(context_tokens) + list(cont_tokens))
        start = len(seq) - len(cont_tokens)
        h = self.order - 1
        return [math.log(self.prob(seq[i - h:i], seq[i])) for i in range(start, len(seq))]

    def score_continuation(self, context: str, continuation: str) -> TokenLogProbs:
        cont = tokenize(continuation)
        if not cont:
            raise EmptyAnswerError("continuation has no tokens")
        return TokenLogProbs(cont, self.score_tokens(tokenize(context), cont))

    # snapshots ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        doc = {"format": SNAPSHOT_FORMAT, "fingerprint": self.fingerprint, **self._canonical()}
        Path(path).write_text(json.dumps(doc, ensure_ascii=False, separators=(",", ":")), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NGramModel":
        try:
            doc = json.loads(Path(path).read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: corrupt model snapshot: {exc}") from exc
        if doc.get("format") != SNAPSHOT_FORMAT:
            raise DataError(f"{path}: unsupported snapshot format {doc.get('format')!r}")
        counts = {(tuple(ctx), w): int(c) for ctx, w, c in doc["counts"]}
        model = cls(doc["order"], doc["k"], doc["vocab"], counts)
        if model.fingerprint != doc["fingerprint"]:
            raise DataError(f"{path}: snapshot fingerprint mismatch")
        return model


def fit_ngram(corpus: Sequence[RenderedPair], n: int = 3, k: float = 0.1,
              base: NGramModel | None = None) -> NGramModel:
    """Single counting pass over ``tokenize(Q) ++ tokenize(A)`` for each pair.

    When ``base`` is given its counts and vocabulary are the starting point,
    so the result is the base model continued on ``corpus``.
    """
    if not corpus:
        raise ConfigError("cannot fit an n-gram model on an empty corpus")
    if base is not None and base.order != n:
        raise ConfigError(f"base model order {base.order} != requested order {n}")
    counts: Counter = Counter(base.counts if base is not None else {})
    vocab = set(base.vocab) if base is not None else set()
    h = n - 1
    for pair in corpus:
        toks = tokenize(pair.question_text) + tokenize(pair.answer_text)
        vocab.update(toks)
        seq = [BOS] * h + toks
        for i in range(h, len(seq)):
            counts[(tuple(seq[i - h:i]), seq[i])] += 1
    return NGramModel(n, k, vocab, dict(counts))


def uniform_model(vocab: Iterable[str], order: int = 1, k: float = 0.1) -> NGramModel:
    """An unfitted model; every token gets probability ``1/|V|``."""
    return NGramModel(order, k, vocab)


# --------------------------------------------------------------------------
# hashed embeddings


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def _l2_normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if not math.isfinite(norm) or norm == 0.0:
        raise EmbeddingError("cannot normalize a zero or non-finite vector")
    return vec / norm


class HashEmbedder:
    """Bag-of-tokens histogram hashed into ``dim`` slots, then L2-normalized."""

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ConfigError("embedding dimension must be >= 1")
        self.dim = int(dim)
        self.fingerprint = f"fnv1a64-bow-d{self.dim}"

    def slot(self, token: str) -> int:
        return fnv1a_64(token.encode("utf-8")) % self.dim

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            raise EmbeddingError("cannot embed text with no tokens")
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            vec[self.slot(tok)] += 1.0
        return _l2_normalize(vec)

    def embed(self, text: str) -> np.ndarray:
        return self.embed_tokens(tokenize(text))


def score_continuation(scorer: Scorer, context: str, continuation: str) -> TokenLogProbs:
    return scorer.score_continuation(context, continuation)


def embed_instruction(embedder: Embedder, question_text: str) -> np.ndarray:
    return embedder.embed(question_text)


# --------------------------------------------------------------------------
# remote backend


class RemoteBackend:
    """Client for a remote scoring/embedding service.

    Requests carry ``Authorization: Bearer $CHERRY_API_KEY`` when the variable
    is set. ``max_in_flight`` bounds concurrent requests from this client
    across threads. Transient failures (connection errors, timeouts, 429 and
    5xx) are retried with exponential backoff up to ``max_retries`` times.
    """

    def __init__(self, base_url: str, model: str, *, timeout: float = 60.0,
                 max_retries: int = 3, max_in_flight: int = 4, backoff: float = 0.5,
                 api_key: str | None = None, session: requests.Session | None = None):
        if not base_url:
            raise ConfigError("remote backend needs a base URL")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._session = session or requests.Session()
        self.fingerprint = f"remote:{self.base_url}:{model}"

    def _post(self, route: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = self.base_url + route
        attempts = 0
        last: BackendError | None = None
        while attempts <= self.max_retries:
            if attempts:
                time.sleep(self.backoff * 2 ** (attempts - 1))
            attempts += 1
            try:
                with self._slots:
                    resp = self._session.post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last = BackendError(f"POST {url}: {exc}", attempts=attempts, retryable=True)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = BackendError(f"POST {url}: HTTP {resp.status_code}", attempts=attempts,
                                    retryable=True, status=resp.status_code)
                continue
            if resp.status_code != 200:
                raise BackendError(f"POST {url}: HTTP {resp.status_code}: {resp.text[:200]}",
                                   attempts=attempts, status=resp.status_code)
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendError(f"POST {url}: response is not JSON", attempts=attempts) from exc
        assert last is not None
        raise last

    def score_continuation(self, context: str, continuation: str) -> TokenLogProbs:
        if not continuation.strip():
            raise EmptyAnswerError("continuation has no tokens")
        body = self._post("/v1/score", {"context": context, "continuation": continuation,
                                        "model": self.model})
        try:
            tokens = [str(t) for t in body["tokens"]]
            logprobs = [float(x) for x in body["logprobs"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed /v1/score response: {exc}") from exc
        if not tokens:
            raise EmptyAnswerError("backend returned no continuation tokens")
        return TokenLogProbs(tokens, logprobs)

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EmbeddingError("cannot embed empty text")
        body = self._post("/v1/embed", {"text": text, "model": self.model})
        try:
            vec = np.asarray(body["vector"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed /v1/embed response: {exc}") from exc
        if vec.ndim != 1 or vec.size == 0:
            raise BackendError("malformed /v1/embed response: vector must be a non-empty list")
        return _l2_normalize(vec)
