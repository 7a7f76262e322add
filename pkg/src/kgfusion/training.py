"""Training orchestration and filtered-ranking evaluation.

Queries are the original train triples plus, by default, their reverse
form under the augmented relation ids. During training each query hides
its own graph edge from its propagation so the answer cannot be copied
off the adjacency. Evaluation ranks every entity, drops other known true
tails, and reports MRR and Hit@k; the best checkpoint is chosen by
validation MRR.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ABLATIONS, TrainConfig
from .errors import DataError, TrainingDiverged
from .model import Model
from .optim import AdamState, ParameterRegistry, adam_step, backward
from .store import TripleStore


@dataclass
class EvalReport:
    mrr: float
    hit1: float
    hit10: float
    ranks: np.ndarray
    seconds: float

    def as_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "hit1": self.hit1,
            "hit10": self.hit10,
            "n_queries": int(len(self.ranks)),
            "seconds": self.seconds,
        }


@dataclass
class TrainResult:
    best_arrays: dict[str, np.ndarray]
    best_valid_mrr: float
    best_epoch: int
    history: list[dict]
    model: Model


def filtered_rank(
    query: tuple[int, int, int],
    scores: np.ndarray,
    known_facts: set[tuple[int, int, int]],
) -> int:
    """Rank of the answer after removing other known true tails.

    Ties share the average rank, rounded up.
    """
    q_e, q_r, q_a = query
    kept = np.ones(len(scores), dtype=bool)
    for t in range(len(scores)):
        if t != q_a and (q_e, q_r, t) in known_facts:
            kept[t] = False
    if not kept[q_a]:
        raise AssertionError("filtered_rank: target was filtered out")
    target = scores[q_a]
    kept_scores = scores[kept]
    greater = int((kept_scores > target).sum())
    ties = int((kept_scores == target).sum()) - 1  # exclude the target itself
    return 1 + greater + math.ceil(ties / 2)


def build_queries(
    store: TripleStore, split: str, reverse_queries: bool
) -> np.ndarray:
    """(n, 3) array of (entity, relation, answer) rows for a split."""
    triples = store.splits[split]
    if not triples:
        raise DataError(f"split {split!r} is empty")
    rows = [(h, r, t) for h, r, t in triples]
    if reverse_queries:
        n = store.scheme.n_original
        rows += [(t, r + n, h) for h, r, t in triples]
    return np.asarray(rows, dtype=np.int64)


def evaluate(
    store: TripleStore,
    model: Model,
    split: str = "valid",
    queries: np.ndarray | None = None,
) -> EvalReport:
    """Filtered-ranking metrics over a split, deterministic inference."""
    start = time.perf_counter()
    if queries is None:
        queries = build_queries(store, split, model.config.reverse_queries)
    if len(queries) == 0:
        raise DataError("evaluate: no queries")
    ranks = np.zeros(len(queries), dtype=np.int64)
    bs = max(1, model.config.eval_batch_size)
    with torch.no_grad():
        for lo in range(0, len(queries), bs):
            chunk = queries[lo : lo + bs]
            scores, _ = model.score_queries(chunk[:, :2], mode="infer")
            scores_np = scores.double().numpy()
            for j, (q_e, q_r, q_a) in enumerate(chunk):
                ranks[lo + j] = filtered_rank(
                    (int(q_e), int(q_r), int(q_a)), scores_np[j], store.known_facts
                )
    mrr = float((1.0 / ranks).mean())
    hit1 = float((ranks <= 1).mean())
    hit10 = float((ranks <= 10).mean())
    return EvalReport(
        mrr=mrr,
        hit1=hit1,
        hit10=hit10,
        ranks=ranks,
        seconds=time.perf_counter() - start,
    )


def apply_ablation(config: TrainConfig, variant: str) -> TrainConfig:
    """Copy of the config rewired for one ablation variant."""
    if variant not in ABLATIONS:
        raise DataError(f"unknown ablation {variant!r}, expected one of {ABLATIONS}")
    cfg = dataclasses.replace(config, ablation=variant)
    cfg.validate()
    return cfg


def _pretrain_semantic(
    model: Model, registry: ParameterRegistry, queries: np.ndarray, log
) -> None:
    """Optional warm start of the factor matrices on the pure trilinear
    objective, no propagation involved."""
    cfg = model.config
    emb = model.emb
    opt = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed ^ 0x5EED)
    for epoch in range(1, cfg.pretrain_epochs + 1):
        perm = rng.permutation(len(queries))
        total = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            batch = queries[perm[lo : lo + cfg.batch_size]]
            q_e = torch.from_numpy(batch[:, 0])
            q_r = torch.from_numpy(batch[:, 1])
            q_a = torch.from_numpy(batch[:, 2])
            registry.zero_grad()
            scores = (emb.head_factors[q_e] * emb.rel_factors[q_r]) @ emb.tail_factors.T
            lse = torch.logsumexp(scores, dim=1)
            ll = lse - scores[torch.arange(len(batch)), q_a]
            loss = ll.mean()
            if cfg.reg_weight > 0:
                reg = (
                    (emb.head_factors[q_e].abs() ** 3).sum(1)
                    + (emb.rel_factors[q_r].abs() ** 3).sum(1)
                    + (emb.tail_factors[q_a].abs() ** 3).sum(1)
                )
                loss = loss + cfg.reg_weight * reg.mean()
            loss.backward()
            adam_step(registry, opt)
            total += loss.item() * len(batch)
        log(f"pretrain epoch {epoch}: loss {total / len(queries):.4f}")


def train(store: TripleStore, config: TrainConfig, log=print) -> TrainResult:
    """Train for up to ``max_epochs`` epochs, evaluating on the validation
    split each epoch and keeping the checkpoint with the best MRR."""
    config.validate()
    if not store.splits["train"]:
        raise DataError("train split is empty")
    if not store.splits["valid"]:
        raise DataError("valid split is empty")
    if config.deterministic:
        torch.set_num_threads(1)

    model = Model(store, config)
    registry = ParameterRegistry(model.parameter_groups())
    queries = build_queries(store, "train", config.reverse_queries)
    if config.pretrain_epochs > 0 and config.ablation != "random_query":
        _pretrain_semantic(model, registry, queries, log)

    adam = AdamState(lr=config.lr)
    shuffle_rng = np.random.default_rng(config.seed)
    gumbel_gen = torch.Generator().manual_seed(config.seed)

    history: list[dict] = []
    best_arrays = {k: v.copy() for k, v in model.state_arrays().items()}
    best_mrr = -1.0
    best_epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_start = time.perf_counter()
        perm = shuffle_rng.permutation(len(queries))
        total = 0.0
        for batch_idx, lo in enumerate(range(0, len(perm), config.batch_size)):
            batch = queries[perm[lo : lo + config.batch_size]]
            registry.zero_grad()
            loss = model.loss_on_batch(batch, mode="train", gen=gumbel_gen)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, batch_idx)
            backward(loss, registry)
            adam_step(registry, adam)
            total += value * len(batch)
        train_loss = total / len(queries)
        report = evaluate(store, model, "valid")
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "valid_mrr": report.mrr,
            "valid_hit1": report.hit1,
            "valid_hit10": report.hit10,
            "seconds": time.perf_counter() - epoch_start,
        }
        history.append(record)
        log(
            f"epoch {epoch}: loss {train_loss:.4f} valid MRR {report.mrr:.4f} "
            f"Hit@1 {report.hit1:.4f} Hit@10 {report.hit10:.4f} "
            f"({record['seconds']:.1f}s)"
        )
        if report.mrr > best_mrr:
            best_mrr = report.mrr
            best_epoch = epoch
            best_arrays = {k: v.copy() for k, v in model.state_arrays().items()}
    return TrainResult(
        best_arrays=best_arrays,
        best_valid_mrr=best_mrr,
        best_epoch=best_epoch,
        history=history,
        model=model,
    )
