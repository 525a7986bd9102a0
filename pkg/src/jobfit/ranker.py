"""Exact top-k inner-product search over dense embeddings, plus lexical
baselines (BM25L and TF-IDF) and the ranking latency benchmark.

All rankers break score ties by ascending document id so output is
deterministic. The dense index is a flat matrix; exactness is the point,
since inner-product scoring makes ranking a single matrix-vector product.
"""

from __future__ import annotations

import json
import math
import struct
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import Document

INDEX_MAGIC = b"CFIDX1"


class IndexError_(ValueError):
    pass


class BenchError(ValueError):
    pass


def document_text(doc: Document) -> str:
    """Flatten a document for lexical rankers: all fields as "name: value"."""
    return " ".join(f"{f.name}: {f.value}" for f in doc.fields)


class DenseIndex:
    """Flat n x d float32 matrix with an id table; immutable after build."""

    def __init__(self, matrix: np.ndarray, ids: list[str]):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise IndexError_(f"matrix must be 2-D, got shape {matrix.shape}")
        if matrix.shape[0] != len(ids):
            raise IndexError_(f"{matrix.shape[0]} rows but {len(ids)} ids")
        if len(set(ids)) != len(ids):
            raise IndexError_("duplicate ids in index")
        self.matrix = matrix
        self.ids = list(ids)
        self._id_arr = np.array(ids, dtype=object)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_index(embeddings: list[tuple[str, np.ndarray]]) -> DenseIndex:
    """Build an index from (id, vector) pairs; dims must agree, ids be unique."""
    if not embeddings:
        return DenseIndex(np.zeros((0, 0), dtype=np.float32), [])
    dim = len(np.asarray(embeddings[0][1]).reshape(-1))
    rows = []
    ids = []
    for doc_id, vec in embeddings:
        v = np.asarray(vec, dtype=np.float32).reshape(-1)
        if v.size != dim:
            raise IndexError_(f"vector for {doc_id!r} has dim {v.size}, expected {dim}")
        rows.append(v)
        ids.append(doc_id)
    return DenseIndex(np.stack(rows), ids)


def top_k(index: DenseIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact maximum-inner-product search: min(k, n) results in non-increasing
    score order, ties broken by ascending id."""
    if k < 1:
        raise IndexError_("k must be >= 1")
    if len(index) == 0:
        return []
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.size != index.dim:
        raise IndexError_(f"query dim {q.size} does not match index dim {index.dim}")
    scores = index.matrix @ q
    order = np.lexsort((index._id_arr, -scores))[: min(k, len(index))]
    return [(index.ids[i], float(scores[i])) for i in order]


def save_index(index: DenseIndex, path) -> None:
    header = {"n": len(index), "d": index.dim, "ids": index.ids}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())


def load_index(path) -> DenseIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise IndexError_("bad magic: not an index file")
    pos = len(INDEX_MAGIC)
    (header_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos: pos + header_len].decode("utf-8"))
    pos += header_len
    n, d = int(header["n"]), int(header["d"])
    body = data[pos:]
    if len(body) != n * d * 4:
        raise IndexError_(f"matrix section is {len(body)} bytes, header expects {n * d * 4}")
    matrix = np.frombuffer(body, dtype="<f4", count=n * d).reshape(n, d).astype(np.float32)
    return DenseIndex(matrix.copy() if n else np.zeros((0, 0), dtype=np.float32),
                      [str(i) for i in header["ids"]])


class Bm25Index:
    """BM25L scoring over tokenized documents.

    score(q, doc) = sum over query terms t present in doc of
        idf(t) * (k1 + 1) * c' / (k1 + c'),
        c' = tf / (1 - b + b * len/avglen) + delta,
        idf(t) = ln((n + 1) / (df + 0.5)).

    Terms absent from the document (or corpus) contribute 0, so a document
    scores 0 iff it shares no term with the query.
    """

    def __init__(self, docs: list[tuple[str, list[str]]],
                 k1: float = 1.5, b: float = 0.75, delta: float = 0.5):
        self.k1 = k1
        self.b = b
        self.delta = delta
        self.ids = [doc_id for doc_id, _ in docs]
        if len(set(self.ids)) != len(self.ids):
            raise IndexError_("duplicate ids in BM25 corpus")
        self.term_freqs = [Counter(tokens) for _, tokens in docs]
        self.doc_lens = [len(tokens) for _, tokens in docs]
        self.avg_len = float(np.mean(self.doc_lens)) if docs else 0.0
        df: Counter = Counter()
        for tf in self.term_freqs:
            df.update(tf.keys())
        n = len(docs)
        self.idf = {t: math.log((n + 1) / (d + 0.5)) for t, d in df.items()}
        self._row = {doc_id: i for i, doc_id in enumerate(self.ids)}

    def score(self, query_tokens: list[str], doc_id: str) -> float:
        i = self._row[doc_id]
        tf = self.term_freqs[i]
        norm = 1.0 - self.b + self.b * self.doc_lens[i] / self.avg_len if self.avg_len else 1.0
        total = 0.0
        for t in query_tokens:
            c = tf.get(t, 0)
            if c == 0 or t not in self.idf:
                continue
            c_norm = c / norm + self.delta
            total += self.idf[t] * (self.k1 + 1.0) * c_norm / (self.k1 + c_norm)
        return total

    def rank(self, query_tokens: list[str], k: int) -> list[tuple[str, float]]:
        scored = [(doc_id, self.score(query_tokens, doc_id)) for doc_id in self.ids]
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        return scored[: min(k, len(scored))]


def bm25_tokenize(text: str) -> list[str]:
    import re
    return re.findall(r"\w+", text.lower())


class TfidfVectorizer:
    """Corpus-fit TF-IDF with smooth idf ln((1+n)/(1+df)) + 1 and L2-normalized
    document vectors (zero vectors stay zero)."""

    def __init__(self):
        self.vocabulary: dict[str, int] = {}
        self.idf: np.ndarray | None = None

    def fit(self, token_lists: list[list[str]]) -> "TfidfVectorizer":
        vocab: dict[str, int] = {}
        for tokens in token_lists:
            for t in tokens:
                if t not in vocab:
                    vocab[t] = len(vocab)
        df = np.zeros(len(vocab), dtype=np.float64)
        for tokens in token_lists:
            for t in set(tokens):
                df[vocab[t]] += 1
        n = len(token_lists)
        self.vocabulary = vocab
        self.idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
        return self

    def transform(self, tokens: list[str]) -> np.ndarray:
        if self.idf is None:
            raise IndexError_("vectorizer is not fit")
        vec = np.zeros(len(self.vocabulary), dtype=np.float64)
        for t in tokens:
            idx = self.vocabulary.get(t)
            if idx is not None:
                vec[idx] += 1.0
        vec *= self.idf
        norm = np.linalg.norm(vec)
        if norm > 0.0:
            vec /= norm
        return vec


def tfidf_rank(vectorizer: TfidfVectorizer, query_tokens: list[str],
               pool: list[tuple[str, list[str]]], k: int) -> list[tuple[str, float]]:
    """Cosine similarity over normalized vectors, ties broken by ascending id."""
    q = vectorizer.transform(query_tokens)
    scored = [(doc_id, float(q @ vectorizer.transform(tokens))) for doc_id, tokens in pool]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[: min(k, len(scored))]


@dataclass(frozen=True)
class BenchRow:
    pool_size: int
    mean_ms: float
    p95_ms: float
    runs: int


def bench_rank(index: DenseIndex, queries: np.ndarray, pool_sizes: list[int],
               k: int = 10, runs: int = 3) -> list[BenchRow]:
    """Wall-clock latency of exact top-k per query over nested pool prefixes.

    Query embeddings are precomputed by the caller and excluded from timing;
    only the search is measured. Each pool size is repeated ``runs`` times and
    all per-query latencies pool into the mean/p95.
    """
    if runs < 3:
        raise BenchError("at least 3 runs are required")
    queries = np.asarray(queries, dtype=np.float32)
    if queries.ndim != 2 or queries.shape[1] != index.dim:
        raise BenchError(f"queries must be (m, {index.dim}), got {queries.shape}")
    rows = []
    for size in sorted(pool_sizes):
        if size > len(index):
            raise BenchError(f"pool size {size} exceeds index size {len(index)}")
        sub = DenseIndex(index.matrix[:size], index.ids[:size])
        latencies = []
        for _ in range(runs):
            for q in queries:
                start = time.perf_counter()
                top_k(sub, q, k)
                latencies.append((time.perf_counter() - start) * 1000.0)
        lat = np.asarray(latencies)
        rows.append(BenchRow(pool_size=size, mean_ms=float(lat.mean()),
                             p95_ms=float(np.percentile(lat, 95)), runs=runs))
    return rows


def bench_csv(rows: list[BenchRow]) -> str:
    lines = ["pool_size,mean_ms,p95_ms,runs"]
    for r in rows:
        lines.append(f"{r.pool_size},{r.mean_ms:.6f},{r.p95_ms:.6f},{r.runs}")
    return "\n".join(lines) + "\n"
