"""Residual-quantization k-means: hierarchical group codes from embeddings.

All inputs and centroids are snapped to a dyadic grid (multiples of 2**-40).
With every coordinate below 2**12 in magnitude, differences and sums of grid
values are exact in float64, so ``r_m + c == r_{m-1}`` holds bit-for-bit and
reconstruction error telescopes exactly to the final residual.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID = 2.0 ** -40
_NEAR_TIE = 1e-9


def snap(x) -> np.ndarray:
    return np.round(np.asarray(x, dtype=np.float64) / GRID) * GRID


class KMeansError(ValueError):
    pass


@dataclass
class CodebookStage:
    stage: int
    centroids: np.ndarray  # (K, D)
    objective_trace: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


def _direct_sqdist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=-1)


def nearest(X: np.ndarray, C: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid per row (ties -> lowest index) and its squared distance.

    Uses the ||x||^2 - 2x.c + ||c||^2 expansion for speed, then recomputes
    rows whose best two candidates are within a relative 1e-9 with direct
    differences so results agree with an exhaustive scan.
    """
    n = X.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    cn = (C * C).sum(axis=1)
    for s in range(0, n, chunk):
        Xs = X[s:s + chunk]
        d = (Xs * Xs).sum(axis=1)[:, None] - 2.0 * Xs @ C.T + cn[None, :]
        if C.shape[0] > 1:
            part = np.partition(d, 1, axis=1)
            scale = np.maximum(np.abs(part[:, :2]).max(axis=1), 1e-300)
            close = (part[:, 1] - part[:, 0]) <= _NEAR_TIE * scale + 1e-12
        else:
            close = np.ones(len(Xs), dtype=bool)
        best = d.argmin(axis=1)
        if close.any():
            rows = np.flatnonzero(close)
            dd = _direct_sqdist(Xs[rows], C)
            best[rows] = dd.argmin(axis=1)
        idx[s:s + chunk] = best
        diff = Xs - C[best]
        dist[s:s + chunk] = (diff * diff).sum(axis=1)
    return idx, dist


def kmeans_plusplus_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    d = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d.sum()
        if total <= 0:
            # all remaining points coincide with chosen centres
            c = int(rng.integers(n))
        else:
            c = int(np.searchsorted(np.cumsum(d) / total, rng.random(), side="right"))
            c = min(c, n - 1)
        centers.append(c)
        d = np.minimum(d, ((X - X[c]) ** 2).sum(axis=1))
    return X[centers].copy()


def kmeans_fit(points, K: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-10,
               init: np.ndarray | None = None, stage: int = 1) -> CodebookStage:
    """Lloyd's algorithm from k-means++ (or a supplied ``init``).

    Stops when assignments stop changing, the largest centroid move is below
    ``tol``, or after ``max_iters``. A cluster left empty is re-seeded with the
    point currently farthest from its centroid.
    """
    X = snap(points)
    if X.ndim != 2 or X.shape[0] < 1:
        raise KMeansError("need a non-empty 2-d array of points")
    if K < 1:
        raise KMeansError("K must be >= 1")
    if K > X.shape[0]:
        raise KMeansError(f"K={K} exceeds number of points ({X.shape[0]})")
    rng = np.random.default_rng(seed)
    C = snap(init) if init is not None else kmeans_plusplus_init(X, K, rng)
    trace = []
    assign_prev = None
    it = 0
    for it in range(1, max_iters + 1):
        a, d = nearest(X, C)
        trace.append(float(d.sum()))
        if assign_prev is not None and np.array_equal(a, assign_prev):
            break
        assign_prev = a
        counts = np.bincount(a, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, a, X)
        newC = C.copy()
        filled = counts > 0
        newC[filled] = snap(sums[filled] / counts[filled, None])
        taken = set()
        for k in np.flatnonzero(~filled):
            order = np.argsort(-d, kind="stable")
            far = next(i for i in order if i not in taken)
            taken.add(far)
            newC[k] = X[far]
            d[far] = 0.0
        move = np.sqrt(((newC - C) ** 2).sum(axis=1)).max()
        C = newC
        if move < tol:
            a, d = nearest(X, C)
            trace.append(float(d.sum()))
            break
    return CodebookStage(stage, C, trace, it)


def assign(point, stage: CodebookStage) -> tuple[int, np.ndarray]:
    p = snap(point)
    if p.shape[-1] != stage.centroids.shape[1]:
        raise KMeansError(f"dimension mismatch: point {p.shape[-1]} vs centroids {stage.centroids.shape[1]}")
    i, _ = nearest(p[None, :], stage.centroids)
    k = int(i[0])
    return k, p - stage.centroids[k]


@dataclass
class RQResult:
    codebooks: list  # CodebookStage per stage
    codes: np.ndarray  # (N, M) int
    residual_norms: np.ndarray  # (N, M + 1): ||r^0|| .. ||r^M||
    residuals: np.ndarray  # (N, D) final residual r^M

    @property
    def M(self) -> int:
        return len(self.codebooks)


def rq_kmeans_fit(embeddings, M: int = 3, K: int = 16, seed: int = 0, max_iters: int = 100) -> RQResult:
    if M < 1:
        raise KMeansError("M must be >= 1")
    r = snap(embeddings)
    norms = [np.linalg.norm(r, axis=1)]
    stages, codes = [], []
    for m in range(1, M + 1):
        st = kmeans_fit(r, K, seed=seed * 1000 + m, max_iters=max_iters, stage=m)
        idx, _ = nearest(r, st.centroids)
        r = r - st.centroids[idx]
        stages.append(st)
        codes.append(idx)
        norms.append(np.linalg.norm(r, axis=1))
    return RQResult(stages, np.stack(codes, axis=1), np.stack(norms, axis=1), r)


def encode(embeddings, codebooks) -> tuple[np.ndarray, np.ndarray]:
    """Codes and final residuals for new embeddings against fitted codebooks."""
    r = snap(embeddings)
    codes = []
    for st in codebooks:
        idx, _ = nearest(r, st.centroids)
        r = r - st.centroids[idx]
        codes.append(idx)
    return np.stack(codes, axis=1), r


def reconstruct(code, codebooks) -> np.ndarray:
    if len(code) != len(codebooks):
        raise KMeansError(f"code length {len(code)} != number of stages {len(codebooks)}")
    out = np.zeros(codebooks[0].centroids.shape[1])
    for k, st in zip(code, codebooks):
        if not 0 <= int(k) < st.K:
            raise IndexError(f"code index {k} out of range for stage {st.stage} with K={st.K}")
        out = out + st.centroids[int(k)]
    return out


# ---------------------------------------------------------------- files
#
# codebooks.jsonl: header {"M": int, "K": int, "D": int}, then one
#   {"stage": m, "index": k, "centroid": [float, ...]} per row, stage-major.
# assignments.jsonl: {"user_id": int, "code": [id1, ..., idM]} per user, user_id ascending.


def save_codebooks(codebooks, path: str | Path):
    M, (K, D) = len(codebooks), codebooks[0].centroids.shape
    with Path(path).open("w", encoding="utf-8") as f:
        f.write(json.dumps({"M": M, "K": K, "D": D}) + "\n")
        for st in codebooks:
            for k, row in enumerate(st.centroids):
                vals = ",".join(repr(float(x)) for x in row)
                f.write(f'{{"stage": {st.stage}, "index": {k}, "centroid": [{vals}]}}\n')


def load_codebooks(path: str | Path) -> list[CodebookStage]:
    with Path(path).open(encoding="utf-8") as f:
        head = json.loads(f.readline())
        M, K, D = head["M"], head["K"], head["D"]
        cents = np.zeros((M, K, D))
        for line in f:
            r = json.loads(line)
            cents[r["stage"] - 1, r["index"]] = r["centroid"]
    return [CodebookStage(m + 1, cents[m]) for m in range(M)]


def save_assignments(user_ids, codes, path: str | Path):
    with Path(path).open("w", encoding="utf-8") as f:
        for uid, code in sorted(zip(user_ids, codes.tolist())):
            f.write(json.dumps({"user_id": int(uid), "code": [int(c) for c in code]}) + "\n")


def load_assignments(path: str | Path) -> dict[int, tuple]:
    out = {}
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            r = json.loads(line)
            out[r["user_id"]] = tuple(r["code"])
    return out
