"""Contrastive training: batch construction with in-batch and hard negatives,
the symmetric cross-entropy loss, and the epoch loop with AdamW, warmup/decay,
and best-checkpoint selection by validation loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .corpus import DatasetSplit, InteractionGraph, JOB, RESUME
from .encoder import ModelParams, _field_token_ids, document_node, param_leaves


class TrainerError(ValueError):
    pass


class TrainDiverged(RuntimeError):
    """Non-finite loss; carries the step and the offending batch ids."""

    def __init__(self, step: int, batch: "ContrastiveBatch"):
        super().__init__(
            f"non-finite loss at optimizer step {step}; "
            f"positives={batch.positives} hard_neg_resumes={batch.hard_neg_resumes} "
            f"hard_neg_jobs={batch.hard_neg_jobs}"
        )
        self.step = step
        self.batch = batch


@dataclass
class TrainConfig:
    batch_size: int = 8          # positives per batch
    hard_negatives: int = 8      # hard negatives per side per batch
    epochs: int = 10
    base_lr: float = 0.02
    warmup_frac: float = 0.05
    weight_decay: float = 1e-2
    grad_accumulation: int = 2
    seed: int = 0
    mask_collisions: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")
        if self.hard_negatives < 0:
            raise TrainerError("hard_negatives must be >= 0")
        if self.epochs < 1 or self.grad_accumulation < 1:
            raise TrainerError("epochs and grad_accumulation must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise TrainerError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def pair_count(batch_size: int, hard_negatives: int) -> int:
    """Distinct resume-job pairs scored by a fully populated batch:
    (B + B_hard)^2 - B_hard^2 (the hard-vs-hard block is never scored)."""
    return (batch_size + hard_negatives) ** 2 - hard_negatives ** 2


@dataclass
class ContrastiveBatch:
    """B positive pairs, shared hard negatives, and collision masks.

    Candidate order is positives-first: for resume anchor i the positive job
    sits in column i, then hard-negative jobs; symmetrically for job anchors.
    A True mask entry is excluded from the softmax denominator because that
    pair is a known positive elsewhere in the graph.
    """

    positives: list[tuple[str, str]]
    hard_neg_resumes: list[str]
    hard_neg_jobs: list[str]
    resume_anchor_mask: np.ndarray  # B x (B + n_hard_jobs), over job candidates
    job_anchor_mask: np.ndarray     # B x (B + n_hard_resumes), over resume candidates

    @property
    def size(self) -> int:
        return len(self.positives)

    def scored_pairs(self) -> int:
        """Distinct (resume, job) pairs the two score matrices touch."""
        b = self.size
        pairs = set()
        resumes = [r for r, _ in self.positives]
        jobs = [j for _, j in self.positives]
        for r in resumes:
            for j in jobs + self.hard_neg_jobs:
                pairs.add((r, j))
        for j in jobs:
            for r in resumes + self.hard_neg_resumes:
                pairs.add((r, j))
        return len(pairs)


def make_batch(graph: InteractionGraph, positives: list[tuple[str, str]],
               hard_negatives: int, rng: np.random.Generator,
               mask_collisions: bool = True) -> ContrastiveBatch:
    """Assemble a batch around the given positive pairs.

    Hard negatives are drawn uniformly without replacement from the union of
    reject-neighbors of the batch members (resumes rejected by any batch job,
    jobs that rejected any batch resume), never reusing a batch positive, and
    are shared by every anchor. Pools may be smaller than requested.
    """
    batch_resumes = [r for r, _ in positives]
    batch_jobs = [j for _, j in positives]

    resume_pool = sorted(
        {r for j in batch_jobs for r in graph.rejected_neighbors(JOB, j)} - set(batch_resumes)
    )
    job_pool = sorted(
        {j for r in batch_resumes for j in graph.rejected_neighbors(RESUME, r)} - set(batch_jobs)
    )

    def draw(pool: list[str]) -> list[str]:
        k = min(hard_negatives, len(pool))
        if k == 0:
            return []
        return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]

    hard_resumes = draw(resume_pool)
    hard_jobs = draw(job_pool)

    b = len(positives)
    positive_set = {(e.resume_id, e.job_id) for e in graph.edges if e.y == 1}
    job_candidates = batch_jobs + hard_jobs
    resume_candidates = batch_resumes + hard_resumes
    r_mask = np.zeros((b, len(job_candidates)), dtype=bool)
    j_mask = np.zeros((b, len(resume_candidates)), dtype=bool)
    if mask_collisions:
        for i, r in enumerate(batch_resumes):
            for c, j in enumerate(job_candidates):
                if c != i and (r, j) in positive_set:
                    r_mask[i, c] = True
        for i, j in enumerate(batch_jobs):
            for c, r in enumerate(resume_candidates):
                if c != i and (r, j) in positive_set:
                    j_mask[i, c] = True

    return ContrastiveBatch(positives=list(positives), hard_neg_resumes=hard_resumes,
                            hard_neg_jobs=hard_jobs, resume_anchor_mask=r_mask,
                            job_anchor_mask=j_mask)


def build_batch(graph: InteractionGraph, config: TrainConfig,
                rng: np.random.Generator) -> ContrastiveBatch:
    """Sample one batch of B positives (without replacement) from the graph."""
    positives = sorted(graph.positives())
    if len(positives) < config.batch_size:
        raise TrainerError(
            f"graph has {len(positives)} positive labels, need at least {config.batch_size}"
        )
    picked = [positives[i] for i in rng.choice(len(positives), size=config.batch_size, replace=False)]
    return make_batch(graph, picked, config.hard_negatives, rng, config.mask_collisions)


_MASK_BIAS = -1e9  # additive logit mask; exp underflows to exactly 0 after max-subtraction


def _masked_ce(tape: nm.Tape, scores: nm.Node, mask: np.ndarray) -> nm.Node:
    """Mean over rows of -log softmax picking column i of row i."""
    b, c = scores.shape
    bias = np.where(mask, _MASK_BIAS, 0.0).astype(np.float32)
    logp = nm.row_log_softmax(nm.add(scores, tape.leaf(bias)))
    pick = np.zeros((b, c), dtype=np.float32)
    pick[np.arange(b), np.arange(b)] = 1.0 / b
    return nm.scale(nm.sum_all(nm.mul(logp, tape.leaf(pick))), -1.0)


def contrastive_loss(tape: nm.Tape, resume_anchor_scores: nm.Node, resume_anchor_mask: np.ndarray,
                     job_anchor_scores: nm.Node, job_anchor_mask: np.ndarray) -> nm.Node:
    """Symmetric cross-entropy over both anchor directions.

    Each row holds the positive score in column i plus every in-batch and
    hard negative; masked entries drop out of the denominator. A row whose
    negatives are all masked contributes -log(1) = 0.
    """
    loss_r = _masked_ce(tape, resume_anchor_scores, resume_anchor_mask)
    loss_j = _masked_ce(tape, job_anchor_scores, job_anchor_mask)
    return nm.add(loss_r, loss_j)


class _DocEncoder:
    """Per-run cache of tokenized field slots so epochs re-tokenize nothing."""

    def __init__(self, params: ModelParams):
        self.params = params
        self._slots: dict[tuple[str, str], list] = {}

    def node(self, graph: InteractionGraph, kind: str, doc_id: str, tape: nm.Tape,
             leaves: dict[str, nm.Node], cache: dict) -> nm.Node:
        key = (kind, doc_id)
        if key in cache:
            return cache[key]
        if key not in self._slots:
            self._slots[key] = _field_token_ids(graph.document(kind, doc_id), self.params)
        node = document_node(graph.document(kind, doc_id), self.params, tape, leaves,
                             token_slots=self._slots[key])
        cache[key] = node
        return node


def batch_loss(graph: InteractionGraph, batch: ContrastiveBatch, params: ModelParams,
               doc_encoder: _DocEncoder | None = None, with_grad: bool = True
               ) -> tuple[float, dict[str, np.ndarray] | None]:
    """Forward (and optionally backward) pass for one batch.

    Every document is encoded once per batch even when it appears as both a
    positive and a candidate. Returns the scalar loss and, when requested,
    gradients for every parameter array.
    """
    doc_encoder = doc_encoder or _DocEncoder(params)
    tape = nm.Tape()
    leaves = param_leaves(params, tape, requires_grad=with_grad)
    node_cache: dict = {}

    def enc(kind, doc_id):
        return doc_encoder.node(graph, kind, doc_id, tape, leaves, node_cache)

    resume_nodes = [enc(RESUME, r) for r, _ in batch.positives]
    job_nodes = [enc(JOB, j) for _, j in batch.positives]
    hard_resume_nodes = [enc(RESUME, r) for r in batch.hard_neg_resumes]
    hard_job_nodes = [enc(JOB, j) for j in batch.hard_neg_jobs]

    r_anchor = nm.stack_rows(resume_nodes)
    j_anchor = nm.stack_rows(job_nodes)
    job_cands = nm.stack_rows(job_nodes + hard_job_nodes)
    resume_cands = nm.stack_rows(resume_nodes + hard_resume_nodes)

    s_r = nm.matmul(r_anchor, job_cands, transpose_b=True)
    s_j = nm.matmul(j_anchor, resume_cands, transpose_b=True)
    loss = contrastive_loss(tape, s_r, batch.resume_anchor_mask, s_j, batch.job_anchor_mask)
    value = float(loss.value[0, 0])
    if not with_grad:
        return value, None
    nm.backward(tape, loss)
    grads = {}
    for name, leaf in leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(params.arrays[name])
    return value, grads


@dataclass
class TrainReport:
    epoch_train_loss: list[float] = field(default_factory=list)
    epoch_val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    scored_pairs_per_epoch: list[int] = field(default_factory=list)
    optimizer_steps: int = 0

    def to_lines(self) -> list[str]:
        """Line-delimited JSON metrics log; epoch 0 is the untrained baseline."""
        lines = []
        for i, val in enumerate(self.epoch_val_loss):
            entry = {
                "epoch": i,
                "train_loss": None if i == 0 else self.epoch_train_loss[i - 1],
                "val_loss": val,
            }
            lines.append(json.dumps(entry, sort_keys=True))
        lines.append(json.dumps({"best_epoch": self.best_epoch,
                                 "optimizer_steps": self.optimizer_steps}, sort_keys=True))
        return lines


def _epoch_batches(positives: list[tuple[str, str]], batch_size: int,
                   rng: np.random.Generator, keep_short: bool) -> list[list[tuple[str, str]]]:
    order = rng.permutation(len(positives))
    shuffled = [positives[i] for i in order]
    batches = [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]
    if batches and len(batches[-1]) < batch_size and not keep_short:
        batches.pop()
    return batches


def _validation_loss(graph: InteractionGraph, params: ModelParams, config: TrainConfig,
                     doc_encoder: _DocEncoder, seed: int) -> float:
    positives = sorted(graph.positives())
    if not positives:
        raise TrainerError("validation graph has no positive labels")
    rng = np.random.default_rng(seed)
    # trailing short batch kept: tiny validation sets must still yield a loss
    batches = _epoch_batches(positives, config.batch_size, rng, keep_short=True)
    losses = []
    for pairs in batches:
        batch = make_batch(graph, pairs, config.hard_negatives, rng, config.mask_collisions)
        value, _ = batch_loss(graph, batch, params, doc_encoder, with_grad=False)
        losses.append(value)
    return float(np.mean(losses))


def train(split: DatasetSplit, params: ModelParams, config: TrainConfig
          ) -> tuple[ModelParams, TrainReport]:
    """Optimize the encoder on the train graph, selecting the checkpoint with
    the lowest validation loss (epoch 0 = the untrained parameters).

    One epoch is one pass over the shuffled positive labels; the trailing
    short batch is dropped. Gradients are averaged over grad_accumulation
    micro-batches before each AdamW step, with linear warmup then decay.
    Deterministic for a fixed config.seed.
    """
    train_graph = split.train
    positives = sorted(train_graph.positives())
    if len(positives) < config.batch_size:
        raise TrainerError(
            f"train graph has {len(positives)} positive labels, need at least {config.batch_size}"
        )
    params = params.copy()
    doc_encoder = _DocEncoder(params)
    val_encoder = _DocEncoder(params)
    rng = np.random.default_rng(config.seed)
    val_seed = int(np.random.default_rng(config.seed + 1).integers(2 ** 63))

    batches_per_epoch = len(positives) // config.batch_size
    steps_per_epoch = int(np.ceil(batches_per_epoch / config.grad_accumulation))
    total_steps = config.epochs * steps_per_epoch
    if total_steps == 0:
        raise TrainerError("no full batches to train on")

    state = nm.AdamWState(weight_decay=config.weight_decay, base_lr=config.base_lr)
    report = TrainReport()
    report.epoch_val_loss.append(_validation_loss(split.val, params, config, val_encoder, val_seed))
    best_val = report.epoch_val_loss[0]
    best_params = params.copy()

    step = 0
    for epoch in range(1, config.epochs + 1):
        batch_plans = _epoch_batches(positives, config.batch_size, rng, keep_short=False)
        epoch_losses = []
        scored = 0
        accum: dict[str, np.ndarray] | None = None
        accum_count = 0
        for b_idx, pairs in enumerate(batch_plans):
            batch = make_batch(train_graph, pairs, config.hard_negatives, rng, config.mask_collisions)
            value, grads = batch_loss(train_graph, batch, params, doc_encoder, with_grad=True)
            if not np.isfinite(value):
                raise TrainDiverged(step, batch)
            epoch_losses.append(value)
            scored += batch.scored_pairs()
            if accum is None:
                accum = {k: g.copy() for k, g in grads.items()}
            else:
                for k, g in grads.items():
                    accum[k] += g
            accum_count += 1
            if accum_count == config.grad_accumulation or b_idx == len(batch_plans) - 1:
                step += 1
                lr = nm.lr_at(step, total_steps, config.warmup_frac, config.base_lr)
                for k in accum:
                    accum[k] /= accum_count
                nm.adamw_step(params.arrays, accum, state, lr)
                accum = None
                accum_count = 0

        report.epoch_train_loss.append(float(np.mean(epoch_losses)))
        report.scored_pairs_per_epoch.append(scored)
        val_loss = _validation_loss(split.val, params, config, val_encoder, val_seed)
        report.epoch_val_loss.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            report.best_epoch = epoch

    report.optimizer_steps = step
    return best_params, report
