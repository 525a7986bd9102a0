"""Dataset ingestion, the bipartite interaction graph, splits, and evaluation tasks.

Documents are ordered collections of named text fields. Interactions are
binary accept/reject labels between one resume and one job, forming a sparse
bipartite graph. Files are UTF-8 line-delimited JSON; see ``parse_dataset``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

RESUME = "resume"
JOB = "job"
KINDS = (RESUME, JOB)

RANK_RESUME = "rank-resume"
RANK_JOB = "rank-job"


class DatasetError(ValueError):
    """Malformed record or referential-integrity failure (carries line number)."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class SplitError(ValueError):
    """Split request cannot be satisfied by the graph."""


class TaskError(ValueError):
    """Ranking-task construction failed for a named query."""


def opposite_kind(kind: str) -> str:
    return JOB if kind == RESUME else RESUME


@dataclass(frozen=True)
class FieldEntry:
    name: str
    value: str


@dataclass(frozen=True)
class Document:
    """A resume or job post: an ordered list of named text fields."""

    id: str
    kind: str
    fields: tuple[FieldEntry, ...]

    def __post_init__(self):
        if not self.id:
            raise DatasetError("document id is empty")
        if self.kind not in KINDS:
            raise DatasetError(f"unknown document kind {self.kind!r}")
        if not self.fields:
            raise DatasetError(f"document {self.id!r} has no fields")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise DatasetError(f"document {self.id!r} has duplicate field names")
        if any(not n for n in names):
            raise DatasetError(f"document {self.id!r} has an empty field name")

    def field_value(self, name: str) -> str | None:
        for f in self.fields:
            if f.name == name:
                return f.value
        return None

    def field_names(self) -> list[str]:
        return [f.name for f in self.fields]


@dataclass(frozen=True)
class InteractionLabel:
    """Binary signal: did job ``job_id`` accept resume ``resume_id`` for interview."""

    resume_id: str
    job_id: str
    y: int

    def __post_init__(self):
        if self.y not in (0, 1):
            raise DatasetError(f"label for ({self.resume_id}, {self.job_id}) has y={self.y}, expected 0 or 1")


def parse_dataset(
    lines: Iterable[str],
    known_documents: Iterable[Document] = (),
) -> tuple[list[Document], list[InteractionLabel]]:
    """Parse a line-delimited JSON stream of document and/or label records.

    A document line looks like
    ``{"id": "...", "kind": "resume"|"job", "fields": [{"name": "...", "value": "..."}]}``
    and a label line like ``{"resume_id": "...", "job_id": "...", "label": 0|1}``.
    Field order in the array is the schema order and is preserved. Labels are
    checked against the documents seen in the stream plus ``known_documents``
    (pass the already-parsed document list when labels live in a separate file).

    Raises DatasetError with a line number for malformed lines, duplicate ids,
    duplicate label pairs, or labels referencing unknown documents.
    """
    documents: list[Document] = []
    labels: list[InteractionLabel] = []
    seen_ids: dict[str, set[str]] = {RESUME: set(), JOB: set()}
    for doc in known_documents:
        seen_ids[doc.kind].add(doc.id)
    seen_pairs: set[tuple[str, str]] = set()
    pending_labels: list[tuple[int, InteractionLabel]] = []

    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON ({exc.msg})", line_no) from exc
        if not isinstance(obj, dict):
            raise DatasetError("record is not a JSON object", line_no)

        if "resume_id" in obj or "job_id" in obj or "label" in obj:
            try:
                label = InteractionLabel(
                    resume_id=str(obj["resume_id"]),
                    job_id=str(obj["job_id"]),
                    y=int(obj["label"]),
                )
            except KeyError as exc:
                raise DatasetError(f"label record missing key {exc.args[0]!r}", line_no) from exc
            except (TypeError, ValueError, DatasetError) as exc:
                raise DatasetError(str(exc), line_no) from exc
            pair = (label.resume_id, label.job_id)
            if pair in seen_pairs:
                raise DatasetError(f"duplicate label for pair {pair}", line_no)
            seen_pairs.add(pair)
            pending_labels.append((line_no, label))
        elif "id" in obj or "kind" in obj or "fields" in obj:
            try:
                fields = tuple(
                    FieldEntry(name=str(f["name"]), value=str(f["value"])) for f in obj["fields"]
                )
                doc = Document(id=str(obj["id"]), kind=str(obj["kind"]), fields=fields)
            except KeyError as exc:
                raise DatasetError(f"document record missing key {exc.args[0]!r}", line_no) from exc
            except (TypeError, DatasetError) as exc:
                raise DatasetError(str(exc), line_no) from exc
            if doc.id in seen_ids[doc.kind]:
                raise DatasetError(f"duplicate {doc.kind} id {doc.id!r}", line_no)
            seen_ids[doc.kind].add(doc.id)
            documents.append(doc)
        else:
            raise DatasetError("record is neither a document nor a label", line_no)

    # Referential check happens after the whole stream so labels may precede
    # their documents within one file.
    for line_no, label in pending_labels:
        if label.resume_id not in seen_ids[RESUME]:
            raise DatasetError(f"label references unknown resume id {label.resume_id!r}", line_no)
        if label.job_id not in seen_ids[JOB]:
            raise DatasetError(f"label references unknown job id {label.job_id!r}", line_no)
        labels.append(label)
    return documents, labels


def serialize_document(doc: Document) -> str:
    obj = {
        "id": doc.id,
        "kind": doc.kind,
        "fields": [{"name": f.name, "value": f.value} for f in doc.fields],
    }
    return json.dumps(obj, ensure_ascii=False)


def serialize_label(label: InteractionLabel) -> str:
    return json.dumps(
        {"resume_id": label.resume_id, "job_id": label.job_id, "label": label.y},
        ensure_ascii=False,
    )


def write_dataset(documents: Iterable[Document], labels: Iterable[InteractionLabel],
                  documents_path, labels_path) -> None:
    with open(documents_path, "w", encoding="utf-8") as fh:
        for doc in documents:
            fh.write(serialize_document(doc) + "\n")
    with open(labels_path, "w", encoding="utf-8") as fh:
        for label in labels:
            fh.write(serialize_label(label) + "\n")


def read_dataset(documents_path, labels_path=None) -> tuple[list[Document], list[InteractionLabel]]:
    with open(documents_path, encoding="utf-8") as fh:
        documents, labels = parse_dataset(fh)
    if labels_path is not None:
        with open(labels_path, encoding="utf-8") as fh:
            _, more = parse_dataset(fh, known_documents=documents)
        labels.extend(more)
    return documents, labels


class InteractionGraph:
    """Bipartite accept/reject graph over resumes and jobs.

    Immutable after construction; adjacency indices are derived from the edge
    list once and shared by all readers.
    """

    def __init__(self, documents: Iterable[Document], edges: Iterable[InteractionLabel]):
        self.resumes: dict[str, Document] = {}
        self.jobs: dict[str, Document] = {}
        for doc in documents:
            store = self.resumes if doc.kind == RESUME else self.jobs
            if doc.id in store:
                raise DatasetError(f"duplicate {doc.kind} id {doc.id!r}")
            store[doc.id] = doc

        self.edges: tuple[InteractionLabel, ...] = tuple(edges)
        seen: set[tuple[str, str]] = set()
        self._acc: dict[tuple[str, str], list[str]] = {}
        self._rej: dict[tuple[str, str], list[str]] = {}
        for e in self.edges:
            if e.resume_id not in self.resumes:
                raise DatasetError(f"label references unknown resume id {e.resume_id!r}")
            if e.job_id not in self.jobs:
                raise DatasetError(f"label references unknown job id {e.job_id!r}")
            pair = (e.resume_id, e.job_id)
            if pair in seen:
                raise DatasetError(f"duplicate label for pair {pair}")
            seen.add(pair)
            adj = self._acc if e.y == 1 else self._rej
            adj.setdefault((RESUME, e.resume_id), []).append(e.job_id)
            adj.setdefault((JOB, e.job_id), []).append(e.resume_id)

    def documents(self, kind: str) -> Mapping[str, Document]:
        return self.resumes if kind == RESUME else self.jobs

    def document(self, kind: str, node_id: str) -> Document:
        return self.documents(kind)[node_id]

    def ids(self, kind: str) -> list[str]:
        return sorted(self.documents(kind))

    def accepted_neighbors(self, kind: str, node_id: str) -> tuple[str, ...]:
        return tuple(self._acc.get((kind, node_id), ()))

    def rejected_neighbors(self, kind: str, node_id: str) -> tuple[str, ...]:
        return tuple(self._rej.get((kind, node_id), ()))

    def degree(self, kind: str, node_id: str) -> int:
        return len(self.accepted_neighbors(kind, node_id)) + len(self.rejected_neighbors(kind, node_id))

    def positives(self) -> list[tuple[str, str]]:
        return [(e.resume_id, e.job_id) for e in self.edges if e.y == 1]

    @property
    def n_accept(self) -> int:
        return sum(1 for e in self.edges if e.y == 1)

    @property
    def n_reject(self) -> int:
        return sum(1 for e in self.edges if e.y == 0)

    def all_documents(self) -> list[Document]:
        return list(self.resumes.values()) + list(self.jobs.values())

    def adjacency_consistent(self) -> bool:
        """Rebuild adjacency from the edge list and compare (invariant check)."""
        rebuilt = InteractionGraph(self.all_documents(), self.edges)
        return rebuilt._acc == self._acc and rebuilt._rej == self._rej


def build_graph(documents: Iterable[Document], labels: Iterable[InteractionLabel]) -> InteractionGraph:
    return InteractionGraph(documents, labels)


@dataclass(frozen=True)
class DatasetSplit:
    """Label-level split. No document id used by a val or test label appears
    anywhere in the train graph."""

    train: InteractionGraph
    val: InteractionGraph
    test: InteractionGraph
    dropped_train_labels: int


def split_dataset(graph: InteractionGraph, seed: int, n_val_labels: int, n_test_labels: int) -> DatasetSplit:
    """Sample val/test labels, then drop train labels touching held-out documents.

    Held-out document ids (endpoints of val and test labels) are excluded from
    the train graph entirely; unlabeled documents stay on the train side as
    ranking-pool fillers. Deterministic for a fixed seed.
    """
    edges = list(graph.edges)
    if n_val_labels < 0 or n_test_labels < 0:
        raise SplitError("split sizes must be non-negative")
    if n_val_labels + n_test_labels > len(edges):
        raise SplitError(
            f"requested {n_val_labels}+{n_test_labels} held-out labels but graph has {len(edges)}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(edges))
    val_edges = [edges[i] for i in order[:n_val_labels]]
    test_edges = [edges[i] for i in order[n_val_labels:n_val_labels + n_test_labels]]
    rest = [edges[i] for i in order[n_val_labels + n_test_labels:]]

    held_resumes = {e.resume_id for e in val_edges} | {e.resume_id for e in test_edges}
    held_jobs = {e.job_id for e in val_edges} | {e.job_id for e in test_edges}
    train_edges = [e for e in rest if e.resume_id not in held_resumes and e.job_id not in held_jobs]
    dropped = len(rest) - len(train_edges)
    if rest and not train_edges:
        raise SplitError(
            f"no train labels left after excluding held-out documents ({dropped} dropped)"
        )

    def endpoint_docs(split_edges):
        docs = []
        for rid in sorted({e.resume_id for e in split_edges}):
            docs.append(graph.resumes[rid])
        for jid in sorted({e.job_id for e in split_edges}):
            docs.append(graph.jobs[jid])
        return docs

    train_docs = [d for d in graph.resumes.values() if d.id not in held_resumes]
    train_docs += [d for d in graph.jobs.values() if d.id not in held_jobs]
    return DatasetSplit(
        train=InteractionGraph(train_docs, train_edges),
        val=InteractionGraph(endpoint_docs(val_edges), val_edges),
        test=InteractionGraph(endpoint_docs(test_edges), test_edges),
        dropped_train_labels=dropped,
    )


@dataclass(frozen=True)
class RankingTask:
    """One query document plus a q-slot candidate pool with binary relevance."""

    query: Document
    candidates: tuple[str, ...]
    relevance: tuple[int, ...]
    q: int

    def __post_init__(self):
        if len(self.candidates) != self.q:
            raise TaskError(f"task for {self.query.id!r} has {len(self.candidates)} candidates, expected q={self.q}")
        if len(set(self.candidates)) != len(self.candidates):
            raise TaskError(f"task for {self.query.id!r} has duplicate candidates")
        if not any(self.relevance):
            raise TaskError(f"task for {self.query.id!r} has no relevant candidate")


@dataclass(frozen=True)
class ClassificationTask:
    resume_id: str
    job_id: str
    y: int


def build_ranking_tasks(graph: InteractionGraph, side: str, q: int, seed: int) -> list[RankingTask]:
    """Build one q-slot ranking task per query document with >= 1 accept edge.

    ``side`` is "rank-resume" (queries are jobs, candidates resumes) or
    "rank-job" (queries are resumes, candidates jobs). The pool holds every
    labeled candidate for the query (accepts relevant, explicit rejects
    non-relevant) padded with random unlabeled fillers of the opposite kind,
    drawn uniformly without replacement. Deterministic per seed.
    """
    if q < 1:
        raise TaskError("q must be >= 1")
    if side not in (RANK_RESUME, RANK_JOB):
        raise TaskError(f"unknown ranking side {side!r}")
    query_kind = JOB if side == RANK_RESUME else RESUME
    cand_kind = opposite_kind(query_kind)
    all_candidates = graph.ids(cand_kind)
    rng = np.random.default_rng(seed)

    tasks = []
    for query_id in graph.ids(query_kind):
        accepted = graph.accepted_neighbors(query_kind, query_id)
        if not accepted:
            continue
        rejected = graph.rejected_neighbors(query_kind, query_id)
        labeled = sorted(accepted) + sorted(rejected)
        if len(labeled) > q:
            raise TaskError(f"query {query_id!r} has {len(labeled)} labeled candidates but q={q}")
        labeled_set = set(labeled)
        filler_pool = [c for c in all_candidates if c not in labeled_set]
        n_fill = q - len(labeled)
        if n_fill > len(filler_pool):
            raise TaskError(
                f"query {query_id!r} needs {n_fill} fillers but only {len(filler_pool)} documents are available"
            )
        fillers = [filler_pool[i] for i in rng.choice(len(filler_pool), size=n_fill, replace=False)] if n_fill else []
        candidates = tuple(labeled) + tuple(fillers)
        relevance = tuple([1] * len(accepted) + [0] * (len(rejected) + n_fill))
        tasks.append(RankingTask(query=graph.document(query_kind, query_id),
                                 candidates=candidates, relevance=relevance, q=q))
    return tasks


def build_classification_tasks(graph: InteractionGraph) -> list[ClassificationTask]:
    """One task per explicit label, verbatim; unlabeled pairs are never used."""
    return [ClassificationTask(e.resume_id, e.job_id, e.y) for e in graph.edges]
