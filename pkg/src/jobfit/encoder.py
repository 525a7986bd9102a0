"""Field-wise bi-encoder: hash tokenizer, per-field mean pooling, one
multi-head self-attention layer across fields, and a per-kind linear fusion
into a single dense vector. One parameter set encodes both resumes and jobs;
only the fusion layer is kind-specific because field counts differ.
"""

from __future__ import annotations

import io
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .corpus import Document, JOB, KINDS, RESUME

CHECKPOINT_MAGIC = b"CONFIT1"

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_FNV_MASK = 0xFFFFFFFFFFFFFFFF


class CheckpointError(ValueError):
    pass


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerConfig:
    hash_buckets: int = 65536
    max_tokens_per_field: int = 512

    def __post_init__(self):
        if self.hash_buckets < 2:
            raise EncoderError("hash_buckets must be >= 2")
        if self.max_tokens_per_field < 1:
            raise EncoderError("max_tokens_per_field must be >= 1")


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _FNV_MASK
    return h


def tokenize(text: str, config: TokenizerConfig) -> list[int]:
    """Lowercase, split on whitespace/punctuation, hash each token into a
    bucket. Empty text gives an empty sequence."""
    tokens = _TOKEN_RE.findall(text.lower())[: config.max_tokens_per_field]
    return [fnv1a64(t.encode("utf-8")) % config.hash_buckets for t in tokens]


@dataclass
class ModelParams:
    """All trainable arrays plus the schema and tokenizer settings.

    Arrays (keyed in ``arrays``):
      embed                      hash_buckets x embed_dim
      attn.{q,k,v}{i}            embed_dim x head_dim, per head i
      attn.o{i}                  head_dim x embed_dim, per head i
      fusion.{kind}.weight       (p_kind * embed_dim) x out_dim
      fusion.{kind}.bias         1 x out_dim
    """

    embed_dim: int
    out_dim: int
    n_heads: int
    tokenizer: TokenizerConfig
    schemas: dict[str, list[str]]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise EncoderError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        for kind in KINDS:
            if kind not in self.schemas or not self.schemas[kind]:
                raise EncoderError(f"schema for kind {kind!r} is missing or empty")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def field_count(self, kind: str) -> int:
        return len(self.schemas[kind])

    def copy(self) -> "ModelParams":
        return ModelParams(
            embed_dim=self.embed_dim,
            out_dim=self.out_dim,
            n_heads=self.n_heads,
            tokenizer=self.tokenizer,
            schemas={k: list(v) for k, v in self.schemas.items()},
            arrays={k: v.copy() for k, v in self.arrays.items()},
        )


def init_params(schemas: dict[str, list[str]], seed: int = 0, embed_dim: int = 64,
                out_dim: int = 128, n_heads: int = 4,
                tokenizer: TokenizerConfig | None = None) -> ModelParams:
    tokenizer = tokenizer or TokenizerConfig()
    params = ModelParams(embed_dim=embed_dim, out_dim=out_dim, n_heads=n_heads,
                         tokenizer=tokenizer, schemas=schemas)
    rng = np.random.default_rng(seed)

    def xavier(rows, cols):
        bound = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-bound, bound, size=(rows, cols)).astype(np.float32)

    arrays = params.arrays
    arrays["embed"] = (rng.standard_normal((tokenizer.hash_buckets, embed_dim)) * 0.05).astype(np.float32)
    hd = params.head_dim
    for i in range(n_heads):
        arrays[f"attn.q{i}"] = xavier(embed_dim, hd)
        arrays[f"attn.k{i}"] = xavier(embed_dim, hd)
        arrays[f"attn.v{i}"] = xavier(embed_dim, hd)
        arrays[f"attn.o{i}"] = xavier(hd, embed_dim)
    for kind in KINDS:
        p = params.field_count(kind)
        arrays[f"fusion.{kind}.weight"] = xavier(p * embed_dim, out_dim)
        arrays[f"fusion.{kind}.bias"] = np.zeros((1, out_dim), dtype=np.float32)
    return params


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    source_id: str
    kind: str


def encode_field(name: str, value: str, params: ModelParams) -> np.ndarray:
    """Mean of embedding-table rows for the tokenized "name: value" string.
    All-zero when the string has no tokens."""
    ids = tokenize(f"{name}: {value}", params.tokenizer)
    if not ids:
        return np.zeros((1, params.embed_dim), dtype=np.float32)
    return params.arrays["embed"][ids].mean(axis=0, keepdims=True).astype(np.float32)


def _field_token_ids(doc: Document, params: ModelParams) -> list[list[int] | None]:
    """Token ids per schema slot; None marks a slot encoded as the zero vector.

    A schema field absent from the document is treated as empty text (zero
    vector before attention), matching how real records omit sections.
    """
    present = {f.name: f.value for f in doc.fields}
    slots: list[list[int] | None] = []
    for name in params.schemas[doc.kind]:
        if name not in present:
            slots.append(None)
            continue
        ids = tokenize(f"{name}: {present[name]}", params.tokenizer)
        slots.append(ids if ids else None)
    return slots


def document_node(doc: Document, params: ModelParams, tape: nm.Tape,
                  leaves: dict[str, nm.Node],
                  token_slots: list[list[int] | None] | None = None) -> nm.Node:
    """Build the full encoder forward graph for one document on ``tape``.

    ``leaves`` maps array names to tape leaf nodes (shared across documents so
    gradients accumulate). Returns the 1 x out_dim embedding node.
    """
    if doc.kind not in params.schemas:
        raise EncoderError(f"no schema for document kind {doc.kind!r}")
    if token_slots is None:
        token_slots = _field_token_ids(doc, params)
    embed = leaves["embed"]

    field_nodes = []
    for ids in token_slots:
        if ids is None:
            field_nodes.append(tape.leaf(np.zeros((1, params.embed_dim), dtype=np.float32)))
        else:
            field_nodes.append(nm.mean_rows(nm.gather_rows(embed, ids)))
    x = nm.stack_rows(field_nodes) if len(field_nodes) > 1 else field_nodes[0]

    inv_sqrt = 1.0 / np.sqrt(params.head_dim)
    attn_out = None
    for i in range(params.n_heads):
        q = nm.matmul(x, leaves[f"attn.q{i}"])
        k = nm.matmul(x, leaves[f"attn.k{i}"])
        v = nm.matmul(x, leaves[f"attn.v{i}"])
        weights = nm.row_softmax(nm.scale(nm.matmul(q, k, transpose_b=True), inv_sqrt))
        head = nm.matmul(nm.matmul(weights, v), leaves[f"attn.o{i}"])
        attn_out = head if attn_out is None else nm.add(attn_out, head)

    z = nm.layer_norm_rows(nm.add(x, attn_out))
    flat = nm.concat_rows(z)
    return nm.add(nm.matmul(flat, leaves[f"fusion.{doc.kind}.weight"]),
                  leaves[f"fusion.{doc.kind}.bias"])


def param_leaves(params: ModelParams, tape: nm.Tape, requires_grad: bool = False) -> dict[str, nm.Node]:
    return {name: tape.leaf(arr, requires_grad=requires_grad) for name, arr in params.arrays.items()}


def encode_document(doc: Document, params: ModelParams, normalize: bool = False) -> Embedding:
    """Encode one document to a dense vector. Pure function of (doc, params)."""
    tape = nm.Tape()
    out = document_node(doc, params, tape, param_leaves(params, tape))
    vec = out.value[0].copy()
    if normalize:
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec = (vec / norm).astype(np.float32)
    return Embedding(vector=vec, source_id=doc.id, kind=doc.kind)


def score(emb_r: np.ndarray, emb_j: np.ndarray) -> float:
    """Raw inner product; no normalization."""
    a = np.asarray(emb_r, dtype=np.float32).reshape(-1)
    b = np.asarray(emb_j, dtype=np.float32).reshape(-1)
    if a.shape != b.shape:
        raise EncoderError(f"embedding dims differ: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def save_checkpoint(params: ModelParams, path) -> None:
    """Write magic + JSON header (dims, schema, hash config, array manifest
    with shapes and byte offsets) + little-endian f32 arrays in manifest order."""
    names = sorted(params.arrays)
    manifest = []
    offset = 0
    for name in names:
        arr = params.arrays[name]
        nbytes = arr.size * 4
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    header = {
        "embed_dim": params.embed_dim,
        "out_dim": params.out_dim,
        "n_heads": params.n_heads,
        "hash_buckets": params.tokenizer.hash_buckets,
        "max_tokens_per_field": params.tokenizer.max_tokens_per_field,
        "schemas": params.schemas,
        "arrays": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(np.ascontiguousarray(params.arrays[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 4:
        raise CheckpointError("truncated header length")
    (header_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        header = json.loads(data[pos: pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    pos += header_len

    params = ModelParams(
        embed_dim=int(header["embed_dim"]),
        out_dim=int(header["out_dim"]),
        n_heads=int(header["n_heads"]),
        tokenizer=TokenizerConfig(
            hash_buckets=int(header["hash_buckets"]),
            max_tokens_per_field=int(header["max_tokens_per_field"]),
        ),
        schemas={k: list(v) for k, v in header["schemas"].items()},
    )
    body = data[pos:]
    total = 0
    for entry in header["arrays"]:
        rows, cols = (int(x) for x in entry["shape"])
        total = max(total, int(entry["offset"]) + rows * cols * 4)
    if len(body) != total:
        raise CheckpointError(f"array section is {len(body)} bytes, manifest expects {total}")
    for entry in header["arrays"]:
        rows, cols = (int(x) for x in entry["shape"])
        off = int(entry["offset"])
        arr = np.frombuffer(body, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        params.arrays[str(entry["name"])] = arr.astype(np.float32).copy()
    _validate_shapes(params)
    return params


def _validate_shapes(params: ModelParams) -> None:
    expected: dict[str, tuple[int, int]] = {
        "embed": (params.tokenizer.hash_buckets, params.embed_dim)
    }
    hd = params.head_dim
    for i in range(params.n_heads):
        expected[f"attn.q{i}"] = (params.embed_dim, hd)
        expected[f"attn.k{i}"] = (params.embed_dim, hd)
        expected[f"attn.v{i}"] = (params.embed_dim, hd)
        expected[f"attn.o{i}"] = (hd, params.embed_dim)
    for kind, fields in params.schemas.items():
        expected[f"fusion.{kind}.weight"] = (len(fields) * params.embed_dim, params.out_dim)
        expected[f"fusion.{kind}.bias"] = (1, params.out_dim)
    if set(expected) != set(params.arrays):
        missing = set(expected) - set(params.arrays)
        extra = set(params.arrays) - set(expected)
        raise CheckpointError(f"array manifest mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
    for name, shape in expected.items():
        if tuple(params.arrays[name].shape) != shape:
            raise CheckpointError(f"array {name} has shape {params.arrays[name].shape}, expected {shape}")
