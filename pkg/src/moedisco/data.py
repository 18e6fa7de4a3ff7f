"""Corpus loading, sentence vectors, k-means partitioning, PCA and batching."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DomainError, InputError

log = logging.getLogger(__name__)

SEPARATOR = "\n"


# ---------------------------------------------------------------------------
# tokenisation
# ---------------------------------------------------------------------------

class CharTokenizer:
    """Character vocabulary: the sorted set of characters seen, plus newline."""

    def __init__(self, chars: str):
        self.chars = "".join(sorted(set(chars) | {SEPARATOR}))
        self.index = {c: i for i, c in enumerate(self.chars)}

    @classmethod
    def from_lines(cls, lines):
        return cls("".join(lines))

    @property
    def vocab_size(self) -> int:
        return len(self.chars)

    @property
    def sep_id(self) -> int:
        return self.index[SEPARATOR]

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self.index[c] for c in text], dtype=np.int64)
        except KeyError as exc:
            raise InputError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.chars[i] for i in ids)


@dataclass(frozen=True)
class Sentence:
    tokens: np.ndarray
    source_id: int

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise DomainError(f"sentence {self.source_id} is empty")


def read_lines(path) -> list[str]:
    """Every non-blank line of a text file, newline stripped."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"corpus file {path} does not exist")
    lines = [ln.rstrip("\r\n") for ln in path.read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise InputError(f"corpus file {path} has no non-blank lines")
    return lines


def encode_corpus(lines, tokenizer) -> list[Sentence]:
    return [Sentence(tokenizer.encode(ln), i) for i, ln in enumerate(lines)]


def train_eval_split(n: int, eval_fraction: float, seed: int):
    """Deterministic index split; at least one sentence on each side when n >= 2."""
    if n < 1:
        raise DomainError("cannot split an empty corpus")
    perm = np.random.default_rng(seed).permutation(n)
    n_eval = int(round(eval_fraction * n))
    if n >= 2:
        n_eval = min(max(n_eval, 1), n - 1) if eval_fraction > 0 else 0
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


# ---------------------------------------------------------------------------
# sentence vectors
# ---------------------------------------------------------------------------

def embed_sentence(sentence, table) -> np.ndarray:
    tokens = np.asarray(getattr(sentence, "tokens", sentence))
    if tokens.size == 0:
        raise DomainError("cannot embed an empty sentence")
    if tokens.min() < 0 or tokens.max() >= len(table):
        raise InputError("token id out of range for embedding table")
    return table[tokens].mean(axis=0)


def sentence_vectors(sentences, table) -> np.ndarray:
    """Mean-pooled embedding of every sentence, one row each."""
    table = np.ascontiguousarray(table, dtype=np.float64)
    if not sentences:
        return np.zeros((0, table.shape[1]))
    lengths = np.array([len(s.tokens) for s in sentences], dtype=np.int64)
    if lengths.min() == 0:
        raise DomainError("cannot embed an empty sentence")
    tokens = np.concatenate([s.tokens for s in sentences]).astype(np.int64)
    if tokens.min() < 0 or tokens.max() >= len(table):
        raise InputError("token id out of range for embedding table")
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    return _kernels.mean_pool(table, tokens, offsets)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0


SEED_ENUMERATION_LIMIT = 256


def kmeans_objective(points, assignments, centroids) -> float:
    diff = points - centroids[assignments]
    return float(np.einsum("nd,nd->", diff, diff))


def _plusplus(points, k, rng):
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            pick = rng.integers(n)
        else:
            pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centroids[j] = points[pick]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(points, centroids, max_iters):
    k = len(centroids)
    labels, d2 = _kernels.kmeans_assign(points, centroids)
    history = [float(d2.sum())]
    it = 0
    for it in range(1, max_iters + 1):
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # repair: the worst-served point seeds the empty cluster, but never
            # one whose own cluster would empty in turn
            donors = np.where(counts[labels] > 1, d2, -1.0)
            far = int(np.argmax(donors))
            counts[labels[far]] -= 1
            counts[j] += 1
            labels[far] = j
            d2[far] = 0.0
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        centroids = sums / counts[:, None]
        history.append(kmeans_objective(points, labels, centroids))
        new_labels, d2 = _kernels.kmeans_assign(points, centroids)
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return new_labels, centroids, history, it


def _transfer_refine(points, labels, centroids, history, max_moves):
    """Single-point transfers that lower the objective, best first.

    A Lloyd fixpoint can still improve by moving one point, since moving it
    also shifts both centroids.  The exact change for moving x from A to B is
    n_B/(n_B+1)|x-mu_B|^2 - n_A/(n_A-1)|x-mu_A|^2.
    """
    k = len(centroids)
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    for _ in range(max_moves):
        d2 = ((points[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        own = np.arange(len(points)), labels
        n_own = counts[labels]
        leave = n_own / np.maximum(n_own - 1, 1) * d2[own]
        delta = counts / (counts + 1) * d2 - leave[:, None]
        delta[own] = np.inf
        delta[n_own < 2] = np.inf  # never empty a cluster
        i, j = np.unravel_index(int(np.argmin(delta)), delta.shape)
        if not delta[i, j] < -1e-12 * max(history[-1], 1e-300):
            break
        a = labels[i]
        centroids = centroids.copy()
        centroids[a] = (centroids[a] * counts[a] - points[i]) / (counts[a] - 1)
        centroids[j] = (centroids[j] * counts[j] + points[i]) / (counts[j] + 1)
        counts[a] -= 1
        counts[j] += 1
        labels[i] = j
        history.append(kmeans_objective(points, labels, centroids))
    return labels, centroids


def kmeans(vectors, k: int, seed: int = 0, max_iters: int = 100, n_init: int = 10) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    When there are at most ``SEED_ENUMERATION_LIMIT`` ways to pick k of the
    points, every such pick is tried instead of random restarts.
    Each Lloyd fixpoint is polished by single-point transfers; any point that
    is nearer another centroid is always worth moving, so the result is
    still a nearest-centroid assignment.

    ``history`` holds the objective after every assignment and every centroid
    update of the winning restart, so it is non-increasing.
    """
    points = np.ascontiguousarray(vectors, dtype=np.float64)
    if points.ndim != 2:
        raise InputError(f"expected a [n, d] array of vectors, got shape {points.shape}")
    if k < 1:
        raise InputError("k must be at least 1")
    if len(points) < k:
        raise InputError(f"{len(points)} vectors cannot form {k} clusters")
    if math.comb(len(points), k) <= SEED_ENUMERATION_LIMIT:
        # tiny problems: start once from every k-subset of the points
        inits = (points[list(c)].copy() for c in itertools.combinations(range(len(points)), k))
    else:
        rng = np.random.default_rng(seed)
        inits = (_plusplus(points, k, rng) for _ in range(max(1, n_init)))
    best = None
    for init in inits:
        labels, centroids, history, n_iter = _lloyd(points, init, max_iters)
        if k > 1:
            labels, centroids = _transfer_refine(points, labels, centroids, history, max_iters)
        obj = history[-1]
        if best is None or obj < best.objective:
            best = KMeansResult(labels, centroids, obj, history, n_iter)
    return best


# ---------------------------------------------------------------------------
# shards
# ---------------------------------------------------------------------------

@dataclass
class DataShard:
    cluster_id: int
    indices: np.ndarray
    sentences: list
    centroid: np.ndarray

    @property
    def n_k(self) -> int:
        return len(self.indices)


def partition_dataset(sentences, table, num_experts: int, seed: int = 0, mode: str = "kmeans") -> list[DataShard]:
    """Split ``sentences`` into ``num_experts`` disjoint shards.

    ``mode="kmeans"`` clusters mean-pooled sentence vectors; ``mode="random"``
    deals a seeded shuffle into near-equal parts (sizes differ by at most one).
    """
    if not sentences:
        raise DomainError("corpus is empty")
    vecs = sentence_vectors(sentences, table)
    if mode == "kmeans":
        res = kmeans(vecs, num_experts, seed=seed)
        labels, centroids = res.assignments, res.centroids
    elif mode == "random":
        if len(sentences) < num_experts:
            raise InputError(f"{len(sentences)} sentences cannot fill {num_experts} shards")
        perm = np.random.default_rng(seed).permutation(len(sentences))
        labels = np.empty(len(sentences), dtype=np.int64)
        for k, part in enumerate(np.array_split(perm, num_experts)):
            labels[part] = k
        centroids = np.stack([vecs[labels == k].mean(axis=0) for k in range(num_experts)])
    else:
        raise InputError(f"unknown partition mode {mode!r}")
    shards = []
    for k in range(num_experts):
        idx = np.flatnonzero(labels == k)
        shards.append(DataShard(k, idx, [sentences[i] for i in idx], centroids[k]))
    return shards


def shard_labels(shards, n: int) -> np.ndarray:
    labels = np.full(n, -1, dtype=np.int64)
    for s in shards:
        labels[s.indices] = s.cluster_id
    return labels


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PCAResult:
    coords: np.ndarray
    eigenvalues: np.ndarray      # all of them, descending; covariance normalised by n
    components: np.ndarray       # [out_dim, d]
    mean: np.ndarray
    degenerate: bool = False


def pca_project(vectors, out_dim: int = 2) -> PCAResult:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise DomainError("PCA needs at least two vectors")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    n_comp = min(out_dim, x.shape[1])
    comps = np.zeros((out_dim, x.shape[1]))
    comps[:n_comp] = evecs[:, :n_comp].T
    # fix each direction's sign so the largest-magnitude loading is positive
    for i in range(n_comp):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    if evals[0] <= 1e-300 or not np.any(xc):
        log.warning("PCA input is degenerate (all vectors identical); returning zeros")
        return PCAResult(np.zeros((len(x), out_dim)), evals, comps, mean, degenerate=True)
    return PCAResult(xc @ comps.T, evals, comps, mean)


# ---------------------------------------------------------------------------
# manifest and scatter files
# ---------------------------------------------------------------------------

def write_manifest(path, shards, n_sentences: int):
    """Plain-text shard manifest: assignments block then per-cluster block."""
    labels = shard_labels(shards, n_sentences)
    out = ["# shard manifest v1", "[assignments]", "sentence,cluster"]
    out += [f"{i},{c}" for i, c in enumerate(labels) if c >= 0]
    out += ["[clusters]", "cluster,n_k,centroid"]
    for s in shards:
        out.append(f"{s.cluster_id},{s.n_k}," + " ".join(repr(float(v)) for v in s.centroid))
    Path(path).write_text("\n".join(out) + "\n")


@dataclass
class Manifest:
    assignments: dict
    counts: dict
    centroids: dict

    @property
    def num_clusters(self):
        return len(self.counts)

    def centroid_matrix(self):
        return np.stack([self.centroids[k] for k in sorted(self.centroids)])


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"shard manifest {path} does not exist")
    assignments, counts, centroids = {}, {}, {}
    section = None
    for line in path.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            section = line
            continue
        if line in ("sentence,cluster", "cluster,n_k,centroid"):
            continue
        if section == "[assignments]":
            i, c = line.split(",")
            assignments[int(i)] = int(c)
        elif section == "[clusters]":
            c, n, vec = line.split(",", 2)
            counts[int(c)] = int(n)
            centroids[int(c)] = np.array([float(v) for v in vec.split()])
        else:
            raise InputError(f"malformed manifest line {line!r}")
    return Manifest(assignments, counts, centroids)


def write_scatter(path, coords, labels):
    rows = ["x,y,cluster"] + [f"{x!r},{y!r},{int(c)}" for (x, y), c in zip(coords[:, :2].tolist(), labels)]
    Path(path).write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class WindowStream:
    """Endless batches of next-token windows drawn from ``sentences``.

    Each epoch shuffles sentence order with the stream's own generator, joins
    the sentences with the separator token and cuts the result into
    consecutive windows of ``seq_len + 1`` tokens.
    """

    def __init__(self, sentences, seq_len, batch_size, seed, sep_id):
        if not sentences:
            raise DomainError("cannot stream from an empty shard")
        self.sentences = list(sentences)
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.sep_id = sep_id
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self.batches_drawn = 0
        self._buf = np.zeros(0, dtype=np.int64)

    def _refill(self):
        order = self.rng.permutation(len(self.sentences))
        parts = []
        for i in order:
            parts.append(self.sentences[i].tokens)
            parts.append(np.array([self.sep_id], dtype=np.int64))
        self._buf = np.concatenate([self._buf] + parts)
        self.epoch += 1

    def next_batch(self):
        need = self.batch_size * self.seq_len + 1
        while len(self._buf) < need:
            self._refill()
        chunk = self._buf[:need]
        self._buf = self._buf[need - 1:]
        self.batches_drawn += 1
        x = chunk[:-1].reshape(self.batch_size, self.seq_len)
        y = chunk[1:].reshape(self.batch_size, self.seq_len)
        return x, y


def eval_windows(sentences, seq_len, sep_id, max_windows=64, batch_size=16):
    """Non-overlapping windows over the held-out sentences, grouped into batches."""
    if not sentences:
        return []
    parts = []
    for s in sentences:
        parts += [s.tokens, np.array([sep_id], dtype=np.int64)]
    stream = np.concatenate(parts)
    n_win = min(max_windows, (len(stream) - 1) // seq_len)
    if n_win == 0:
        return [(stream[None, :-1], stream[None, 1:])]
    x = np.stack([stream[i * seq_len:(i + 1) * seq_len] for i in range(n_win)])
    y = np.stack([stream[i * seq_len + 1:(i + 1) * seq_len + 1] for i in range(n_win)])
    return [(x[i:i + batch_size], y[i:i + batch_size]) for i in range(0, n_win, batch_size)]
