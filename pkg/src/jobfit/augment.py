"""Paraphrased document variants and edge-inheriting graph augmentation.

A paraphrase provider rewrites the text of selected fields; the augmented
document then inherits every interaction edge of its source. Resumes are
augmented before jobs so job variants also inherit edges that point at the
new resume variants.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import requests

from .corpus import Document, FieldEntry, InteractionGraph, InteractionLabel, JOB, RESUME


class AugmentError(ValueError):
    pass


class ProviderError(RuntimeError):
    """Paraphrase provider failure, annotated with the field being rewritten."""


@dataclass(frozen=True)
class EdaParams:
    """Per-word operation rates for the word-level paraphraser."""

    alpha_replace: float = 0.1
    alpha_delete: float = 0.1
    alpha_swap: float = 0.1
    alpha_insert: float = 0.1
    num_variants: int = 1

    def __post_init__(self):
        for name in ("alpha_replace", "alpha_delete", "alpha_swap", "alpha_insert"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AugmentError(f"{name}={v} outside [0, 1]")
        if self.num_variants < 1:
            raise AugmentError("num_variants must be >= 1")


def load_synonyms(path) -> dict[str, list[str]]:
    """Parse a `word<TAB>synonym1,synonym2,...` table."""
    table: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise AugmentError(f"synonym table line {line_no}: missing tab separator")
            word, syns = line.split("\t", 1)
            entries = [s.strip() for s in syns.split(",") if s.strip()]
            if not word or not entries:
                raise AugmentError(f"synonym table line {line_no}: empty word or synonym list")
            table[word] = entries
    return table


def eda_paraphrase(text: str, params: EdaParams, seed: int,
                   synonyms: dict[str, list[str]] | None = None) -> str:
    """Word-level paraphrase: replace, insert, swap, then delete, in that
    fixed order, each touching ceil(alpha * n_words) positions.

    Replacement and insertion draw from the synonym table; a word without an
    entry is left unchanged. Deletion always leaves at least one word. Pure
    function of (text, params, seed, synonyms).
    """
    words = text.split()
    if not words:
        raise AugmentError("cannot paraphrase empty text")
    synonyms = synonyms or {}
    rng = np.random.default_rng(seed)

    def n_ops(alpha: float, n: int) -> int:
        return int(np.ceil(alpha * n)) if alpha > 0 else 0

    # replace
    k = n_ops(params.alpha_replace, len(words))
    if k:
        k = min(k, len(words))
        for i in sorted(rng.choice(len(words), size=k, replace=False)):
            options = synonyms.get(words[i])
            if options:
                words[i] = options[rng.integers(len(options))]

    # insert
    k = n_ops(params.alpha_insert, len(words))
    for _ in range(k):
        sources = [w for w in words if synonyms.get(w)]
        if not sources:
            break
        word = sources[rng.integers(len(sources))]
        syn = synonyms[word][rng.integers(len(synonyms[word]))]
        words.insert(int(rng.integers(len(words) + 1)), syn)

    # swap
    k = n_ops(params.alpha_swap, len(words))
    if len(words) >= 2:
        for _ in range(k):
            i, j = rng.choice(len(words), size=2, replace=False)
            words[i], words[j] = words[j], words[i]

    # delete, floor-guarded so at least one word survives
    k = min(n_ops(params.alpha_delete, len(words)), len(words) - 1)
    if k:
        drop = set(rng.choice(len(words), size=k, replace=False).tolist())
        words = [w for i, w in enumerate(words) if i not in drop]

    return " ".join(words)


def eda_variants(text: str, params: EdaParams, seed: int,
                 synonyms: dict[str, list[str]] | None = None) -> list[str]:
    """num_variants independent paraphrases of one text (seeds seed, seed+1, ...)."""
    return [eda_paraphrase(text, params, seed + i, synonyms) for i in range(params.num_variants)]


class ParaphraseProvider(Protocol):
    def paraphrase(self, text: str, seed: int) -> str: ...


class EdaProvider:
    def __init__(self, params: EdaParams | None = None,
                 synonyms: dict[str, list[str]] | None = None):
        self.params = params or EdaParams()
        self.synonyms = synonyms or {}

    def paraphrase(self, text: str, seed: int) -> str:
        return eda_paraphrase(text, self.params, seed, self.synonyms)


class StubProvider:
    """Deterministic hermetic stand-in: reverses sentence order."""

    def paraphrase(self, text: str, seed: int) -> str:
        sentences = re.split(r"(?<=[.!?])\s+", text.strip())
        return " ".join(reversed([s for s in sentences if s]))


DEFAULT_ENDPOINT_ENV = "JOBFIT_PARAPHRASE_ENDPOINT"
DEFAULT_API_KEY_ENV = "JOBFIT_PARAPHRASE_API_KEY"


class HttpProvider:
    """Generic HTTP-POST text-in/text-out paraphrase client.

    The prompt template file must contain a ``{{TEXT}}`` placeholder. Endpoint
    and API key fall back to environment variables. Never exercised by tests;
    use ``StubProvider`` for anything hermetic.
    """

    def __init__(self, template_path, endpoint: str | None = None,
                 api_key: str | None = None, timeout: float = 60.0):
        with open(template_path, encoding="utf-8") as fh:
            self.template = fh.read()
        if "{{TEXT}}" not in self.template:
            raise AugmentError("prompt template has no {{TEXT}} placeholder")
        self.endpoint = endpoint or os.environ.get(DEFAULT_ENDPOINT_ENV, "")
        self.api_key = api_key or os.environ.get(DEFAULT_API_KEY_ENV, "")
        self.timeout = timeout
        if not self.endpoint:
            raise AugmentError(f"no endpoint configured (set {DEFAULT_ENDPOINT_ENV})")

    def render(self, text: str) -> str:
        return self.template.replace("{{TEXT}}", text)

    def paraphrase(self, text: str, seed: int) -> str:
        headers = {"Content-Type": "text/plain; charset=utf-8"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = requests.post(self.endpoint, data=self.render(text).encode("utf-8"),
                             headers=headers, timeout=self.timeout)
        if resp.status_code != 200:
            raise ProviderError(f"paraphrase endpoint returned {resp.status_code}")
        out = resp.text
        if text and not out:
            raise ProviderError("paraphrase endpoint returned empty text")
        return out


def paraphrase_document(doc: Document, target_fields: list[str],
                        provider: ParaphraseProvider, seed: int,
                        variant: int = 1) -> Document:
    """Clone ``doc`` under a fresh `<source_id>#aug<k>` id with the listed
    fields rewritten by the provider; every other field stays byte-identical.
    Empty target fields are left untouched."""
    targets = set(target_fields)
    new_fields = []
    for entry in doc.fields:
        if entry.name in targets and entry.value.strip():
            try:
                value = provider.paraphrase(entry.value, seed)
            except Exception as exc:
                raise ProviderError(f"provider failed on field {entry.name!r} of {doc.id!r}: {exc}") from exc
            if not value:
                raise ProviderError(f"provider returned empty text for field {entry.name!r} of {doc.id!r}")
            new_fields.append(FieldEntry(entry.name, value))
        else:
            new_fields.append(entry)
    return Document(id=f"{doc.id}#aug{variant}", kind=doc.kind, fields=tuple(new_fields))


@dataclass(frozen=True)
class AugmentPlan:
    """How many sources to augment per side, which fields to rewrite, and the
    provider to use. Multi-provider runs compose by augmenting repeatedly."""

    n_aug_resumes: int
    n_aug_jobs: int
    target_fields_resume: tuple[str, ...] = ()
    target_fields_job: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_aug_resumes < 0 or self.n_aug_jobs < 0:
            raise AugmentError("augmentation counts must be >= 0")


def augment_graph(graph: InteractionGraph, plan: AugmentPlan,
                  provider: ParaphraseProvider, seed: int) -> InteractionGraph:
    """Extend the graph with paraphrased variants that inherit their source's
    edges: resumes first, then jobs, so job variants also pick up edges to the
    freshly added resume variants. The number of new labels is exactly the
    two-phase degree sum of the selected sources.

    Sources are drawn uniformly without replacement from documents with
    degree >= 1 (augmenting an isolated node would add no labels).
    """
    rng = np.random.default_rng(seed)
    documents = list(graph.all_documents())
    edges = list(graph.edges)
    existing_ids = {(d.kind, d.id) for d in documents}

    def fresh_variant(source: Document, targets, variant_seed: int) -> Document:
        k = 1
        while (source.kind, f"{source.id}#aug{k}") in existing_ids:
            k += 1
        doc = paraphrase_document(source, list(targets), provider, variant_seed, variant=k)
        existing_ids.add((doc.kind, doc.id))
        return doc

    def pick_sources(kind: str, count: int, adjacency) -> list[str]:
        eligible = sorted(nid for nid in (graph.resumes if kind == RESUME else graph.jobs)
                          if adjacency.get(nid))
        if count > len(eligible):
            raise AugmentError(
                f"plan asks for {count} {kind} sources but only {len(eligible)} have degree >= 1"
            )
        if count == 0:
            return []
        return sorted(eligible[i] for i in rng.choice(len(eligible), size=count, replace=False))

    # current adjacency, updated as inherited edges land
    res_edges: dict[str, list[InteractionLabel]] = {}
    job_edges: dict[str, list[InteractionLabel]] = {}
    for e in edges:
        res_edges.setdefault(e.resume_id, []).append(e)
        job_edges.setdefault(e.job_id, []).append(e)

    resume_sources = pick_sources(RESUME, plan.n_aug_resumes, res_edges)
    for idx, rid in enumerate(resume_sources):
        variant = fresh_variant(graph.resumes[rid], plan.target_fields_resume, seed + idx)
        documents.append(variant)
        for e in list(res_edges.get(rid, ())):
            new_edge = InteractionLabel(variant.id, e.job_id, e.y)
            edges.append(new_edge)
            res_edges.setdefault(variant.id, []).append(new_edge)
            job_edges.setdefault(e.job_id, []).append(new_edge)

    job_sources = pick_sources(JOB, plan.n_aug_jobs, job_edges)
    for idx, jid in enumerate(job_sources):
        variant = fresh_variant(graph.jobs[jid], plan.target_fields_job, seed + plan.n_aug_resumes + idx)
        documents.append(variant)
        for e in list(job_edges.get(jid, ())):
            new_edge = InteractionLabel(e.resume_id, variant.id, e.y)
            edges.append(new_edge)
            res_edges.setdefault(e.resume_id, []).append(new_edge)
            job_edges.setdefault(variant.id, []).append(new_edge)

    return InteractionGraph(documents, edges)
