"""User profile text, profile embeddings and Matryoshka truncation.

Embeddings come either from a remote embedding service (see ``EmbeddingClient``)
or from ``OfflineEncoder``, a deterministic stand-in that mixes hashed text
features with a fixed random projection of the user's category frequencies.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synthworld import CONTINUOUS_FIELDS, DISCRETE_FIELDS, UserRecord, category_name

log = logging.getLogger(__name__)

WINDOWS = ("recent", "medium", "long")
EMPTY = "(none)"


@dataclass(frozen=True)
class WindowBounds:
    """Lookback spans measured back from ``now``; ``long`` is None for all history."""

    now: float = 13.0
    recent: float = 1.0
    medium: float = 4.0
    long: float | None = None

    def __post_init__(self):
        spans = [self.recent, self.medium] + ([self.long] if self.long is not None else [])
        if any(s <= 0 for s in spans) or any(a >= b for a, b in zip(spans, spans[1:])):
            raise ValueError(f"window bounds must be positive and strictly increasing: {spans}")

    def start(self, window: str) -> float:
        span = getattr(self, window)
        return -np.inf if span is None else self.now - span


@dataclass(frozen=True)
class ProfileText:
    user_id: int
    static_attributes: str
    windowed_behaviors: dict  # window -> text
    recent_queries: str
    category_counts: tuple = ()  # ((category_id, count), ...) over all history plus queries

    def render(self) -> str:
        lines = [f"[attributes] {self.static_attributes}"]
        for w in WINDOWS:
            lines.append(f"[purchases:{w}] {self.windowed_behaviors[w]}")
        lines.append(f"[queries] {self.recent_queries}")
        return "\n".join(lines)

    def content_hash(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()


def _fmt_counts(counts: Counter, key=category_name) -> str:
    if not counts:
        return EMPTY
    return " ".join(f"{key(c)}:{n}" for c, n in sorted(counts.items()))


def build_profile_text(user: UserRecord, bounds: WindowBounds | None = None) -> ProfileText:
    bounds = bounds or WindowBounds()
    attrs = []
    for f in (*DISCRETE_FIELDS, *CONTINUOUS_FIELDS):
        v = user.static_attributes.get(f)
        if v is not None:
            attrs.append(f"{f}={v:g}" if isinstance(v, float) else f"{f}={v}")
    windowed = {}
    for w in WINDOWS:
        lo = bounds.start(w)
        windowed[w] = _fmt_counts(Counter(c for _, c, t in user.purchase_log if lo <= t <= bounds.now))
    queries = Counter(" ".join(q) for q, t in user.search_queries if t <= bounds.now)
    qtext = " ".join(f"{q}:{n}" for q, n in sorted(queries.items())) or EMPTY
    cats = Counter(c for _, c, t in user.purchase_log if t <= bounds.now)
    for q, n in queries.items():
        for tok in q.split():
            if tok.startswith("cat") and tok[3:].isdigit():
                cats[int(tok[3:])] += n
    return ProfileText(user.user_id, " ".join(attrs) or EMPTY, windowed, qtext, tuple(sorted(cats.items())))


def parse_profile_text(rendered: str, user_id: int = -1) -> ProfileText:
    """Inverse of ``ProfileText.render``; category counts are rebuilt from the all-history window
    plus category tokens in the queries, so this only round-trips when ``long`` covers all history."""
    fields_ = {}
    for line in rendered.splitlines():
        if not line.startswith("[") or "] " not in line:
            raise ValueError(f"malformed profile line: {line!r}")
        tag, body = line[1:].split("] ", 1)
        fields_[tag] = body
    try:
        windowed = {w: fields_[f"purchases:{w}"] for w in WINDOWS}
        attrs, queries = fields_["attributes"], fields_["queries"]
    except KeyError as e:
        raise ValueError(f"profile text lacks section {e}") from None
    cats = Counter()
    for tok in windowed["long"].split():
        if tok != EMPTY:
            name, n = tok.rsplit(":", 1)
            cats[int(name[3:])] += int(n)
    for tok in queries.split():
        if tok != EMPTY:
            q, n = tok.rsplit(":", 1)
            for part in q.split():
                if part.startswith("cat") and part[3:].isdigit():
                    cats[int(part[3:])] += int(n)
    return ProfileText(user_id, attrs, windowed, queries, tuple(sorted(cats.items())))


# ---------------------------------------------------------------- truncation


class TruncationError(ValueError):
    pass


def truncate_matryoshka(vector, target_dim: int) -> np.ndarray:
    """Keep the leading ``target_dim`` coordinates and renormalize.

    A zero prefix is returned as the zero vector (same policy as the autograd
    l2_normalize); callers that care can test ``np.any(out)``.
    """
    v = np.asarray(vector, dtype=np.float64)
    if target_dim > v.shape[-1]:
        raise TruncationError(f"target_dim {target_dim} exceeds source dimension {v.shape[-1]}")
    if target_dim < 1:
        raise TruncationError("target_dim must be positive")
    head = v[..., :target_dim]
    norm = np.linalg.norm(head, axis=-1, keepdims=True)
    return np.where(norm > 0, head / np.where(norm > 0, norm, 1.0), 0.0)


# ---------------------------------------------------------------- offline encoder


def _token_hash(token: str) -> tuple[int, float]:
    h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return h, 1.0 if (h >> 63) & 1 else -1.0


@dataclass
class OfflineEncoder:
    """Deterministic profile encoder: hashed profile tokens + projected category frequencies."""

    dim: int = 4096
    n_categories: int = 50
    text_weight: float = 0.35
    projection_seed: int = 20240501
    _proj: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.projection_seed)
        self._proj = rng.standard_normal((self.n_categories, self.dim)) / np.sqrt(self.dim)

    def text_features(self, text: ProfileText) -> np.ndarray:
        vec = np.zeros(self.dim)
        tokens = [f"attr:{t}" for t in text.static_attributes.split() if t != EMPTY]
        for w in WINDOWS:
            for tok in text.windowed_behaviors[w].split():
                if tok != EMPTY:
                    name, n = tok.rsplit(":", 1)
                    tokens.extend([f"{w}:{name}"] * int(n))
        for tok in text.recent_queries.split():
            if tok != EMPTY:
                name, n = tok.rsplit(":", 1)
                tokens.extend([f"query:{name}"] * int(n))
        for tok in tokens:
            h, sign = _token_hash(tok)
            vec[h % self.dim] += sign
        n = np.linalg.norm(vec)
        return vec / n if n > 0 else vec

    def category_features(self, text: ProfileText) -> np.ndarray:
        freq = np.zeros(self.n_categories)
        for c, n in text.category_counts:
            if c < self.n_categories:
                freq[c] = n
        if freq.sum() == 0:
            return np.zeros(self.dim)
        freq = np.sqrt(freq / freq.sum())
        v = freq @ self._proj
        return v / np.linalg.norm(v)

    def encode(self, text: ProfileText) -> np.ndarray:
        v = self.text_weight * self.text_features(text) + (1 - self.text_weight) * self.category_features(text)
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


# ---------------------------------------------------------------- remote client


class EmbeddingError(RuntimeError):
    def __init__(self, message: str, user_id=None):
        self.user_id = user_id
        super().__init__(message if user_id is None else f"user {user_id}: {message}")


class CacheCorruptError(EmbeddingError):
    pass


@dataclass
class EmbeddingClientConfig:
    endpoint: str = "http://127.0.0.1:8808/v1/embeddings"
    model: str = "profile-embedding"
    timeout: float = 30.0
    max_in_flight: int = 4
    retry_budget: int = 3
    batch_size: int = 32
    backoff_base: float = 0.5
    cache_path: str | None = None
    api_key_env: str = "GROUPREC_EMBEDDING_API_KEY"

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


class EmbeddingCache:
    """Append-only line-delimited cache: {"hash": str, "dim": int, "vector": [float, ...]}."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._mem: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        vec = np.asarray(rec["vector"], dtype=np.float64)
                        if vec.shape != (rec["dim"],):
                            raise ValueError("dim mismatch")
                    except (ValueError, KeyError, TypeError) as e:
                        raise CacheCorruptError(f"{self.path}:{lineno}: corrupt cache record ({e})") from e
                    self._mem[rec["hash"]] = vec

    def get(self, key: str):
        return self._mem.get(key)

    def put(self, key: str, vec: np.ndarray):
        with self._lock:
            if key in self._mem:
                return
            self._mem[key] = vec
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as f:
                    vals = ",".join(repr(float(x)) for x in vec)
                    f.write(f'{{"hash": "{key}", "dim": {len(vec)}, "vector": [{vals}]}}\n')


class EmbeddingClient:
    """Batched, bounded-concurrency client for the embedding HTTP API.

    Request body: ``{"model": str, "input": [str, ...]}``.
    Response body: ``{"data": [{"index": int, "embedding": [float, ...]}, ...]}``
    (a bare ``{"embeddings": [[float, ...], ...]}`` is also accepted).
    """

    def __init__(self, config: EmbeddingClientConfig, http_client=None):
        import httpx

        self.config = config
        self.cache = EmbeddingCache(config.cache_path)
        headers = {}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = http_client or httpx.Client(timeout=config.timeout, headers=headers)

    def _post(self, texts: list[str]) -> list[np.ndarray]:
        import httpx

        cfg = self.config
        last = None
        for attempt in range(cfg.retry_budget + 1):
            try:
                resp = self._http.post(cfg.endpoint, json={"model": cfg.model, "input": texts})
                resp.raise_for_status()
                body = resp.json()
                if "data" in body:
                    rows = sorted(body["data"], key=lambda r: r.get("index", 0))
                    vecs = [r["embedding"] for r in rows]
                else:
                    vecs = body["embeddings"]
                if len(vecs) != len(texts):
                    raise EmbeddingError(f"service returned {len(vecs)} vectors for {len(texts)} inputs")
                return [np.asarray(v, dtype=np.float64) for v in vecs]
            except (httpx.HTTPError, ValueError, KeyError) as e:
                last = e
                if attempt < cfg.retry_budget:
                    time.sleep(cfg.backoff_base * 2**attempt)
        raise EmbeddingError(f"embedding request failed after {cfg.retry_budget + 1} attempts: {last}")

    def embed(self, texts: list[ProfileText]) -> dict[int, np.ndarray]:
        out: dict[int, np.ndarray] = {}
        pending = []
        for t in texts:
            hit = self.cache.get(t.content_hash())
            if hit is not None:
                out[t.user_id] = hit
            else:
                pending.append(t)
        bs = self.config.batch_size
        batches = [pending[i:i + bs] for i in range(0, len(pending), bs)]

        def run(batch):
            try:
                vecs = self._post([t.render() for t in batch])
            except EmbeddingError as e:
                raise EmbeddingError(str(e), user_id=batch[0].user_id) from e
            for t, v in zip(batch, vecs):
                self.cache.put(t.content_hash(), v)
            return batch, vecs

        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            for batch, vecs in pool.map(run, batches):
                for t, v in zip(batch, vecs):
                    out[t.user_id] = v
        return out


@dataclass
class SemanticEmbedding:
    user_id: int
    vector: np.ndarray
    source: str  # "remote" | "offline_stub"


def encode_profiles(texts: list[ProfileText], target_dim: int = 512, client: EmbeddingClient | None = None,
                    encoder: OfflineEncoder | None = None) -> list[SemanticEmbedding]:
    """Embed profiles (remote when ``client`` is given, else offline) and truncate to ``target_dim``."""
    if client is not None:
        raw = client.embed(texts)
        source = "remote"
    else:
        encoder = encoder or OfflineEncoder()
        raw = {t.user_id: encoder.encode(t) for t in texts}
        source = "offline_stub"
    out = []
    for t in texts:
        v = raw[t.user_id]
        if v.shape[0] < target_dim:
            raise TruncationError(f"user {t.user_id}: embedding dim {v.shape[0]} < target {target_dim}")
        out.append(SemanticEmbedding(t.user_id, truncate_matryoshka(v, target_dim), source))
    return out


def encode_profile(text: ProfileText, client: EmbeddingClient | None = None, encoder: OfflineEncoder | None = None,
                   target_dim: int = 512) -> SemanticEmbedding:
    return encode_profiles([text], target_dim, client, encoder)[0]


def save_embeddings(embs: list[SemanticEmbedding], path: str | Path):
    """Line-delimited {"user_id", "source", "dim", "vector"} records, user_id ascending."""
    with Path(path).open("w", encoding="utf-8") as f:
        for e in sorted(embs, key=lambda e: e.user_id):
            vals = ",".join(repr(float(x)) for x in e.vector)
            f.write(f'{{"user_id": {e.user_id}, "source": "{e.source}", "dim": {len(e.vector)}, "vector": [{vals}]}}\n')


def load_embeddings(path: str | Path) -> list[SemanticEmbedding]:
    out = []
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            r = json.loads(line)
            out.append(SemanticEmbedding(r["user_id"], np.asarray(r["vector"], dtype=np.float64), r["source"]))
    dims = {len(e.vector) for e in out}
    if len(dims) > 1:
        raise ValueError(f"{path}: mixed embedding dimensions {sorted(dims)}")
    return out
