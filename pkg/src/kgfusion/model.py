"""Full model assembly: parameter groups, ablation wiring and batched
query scoring."""

from __future__ import annotations

import numpy as np
import torch

from .config import TrainConfig
from .embeddings import CpEmbeddings, init_embeddings
from .propagation import (
    LayerParams,
    PropagationTrace,
    SelectionParams,
    init_layer_params,
    init_selection_params,
    propagate_batch,
)
from .refine import GateCell, chain_stack, init_gate_cell
from .store import TripleStore

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class Model:
    """Learnable state for one store/config pair.

    Construction is deterministic in ``config.seed``. The ablation field
    rewires scoring: ``no_gsp`` skips propagation and scores purely with
    the trilinear term, ``no_phi`` drops that term, ``no_crr`` freezes
    relation embeddings at their base values, and ``random_query``
    replaces the query's own initial vectors with fixed random ones that
    are excluded from training.
    """

    def __init__(self, store: TripleStore, config: TrainConfig):
        config.validate()
        self.store = store
        self.config = config
        self.dtype = DTYPES[config.dtype]
        dim = config.embed_dim
        root = np.random.default_rng(config.seed)
        seeds = root.integers(0, 2**63 - 1, size=8)

        self.emb: CpEmbeddings = init_embeddings(
            store.n_entities,
            store.n_relations_augmented,
            dim,
            seed=int(seeds[0]),
            scale=config.init_scale,
            dtype=self.dtype,
        )
        self.cell: GateCell = init_gate_cell(
            dim, np.random.default_rng(int(seeds[1])), dtype=self.dtype
        )
        self.query_cell: GateCell | None = None
        if config.separate_query_cell:
            self.query_cell = init_gate_cell(
                dim, np.random.default_rng(int(seeds[2])), dtype=self.dtype
            )
        self.layers: LayerParams = init_layer_params(
            config.n_layers, dim, np.random.default_rng(int(seeds[3])), dtype=self.dtype
        )
        self.selection: SelectionParams = init_selection_params(
            dim, np.random.default_rng(int(seeds[4])), dtype=self.dtype
        )
        readout = np.random.default_rng(int(seeds[5])).uniform(
            -np.sqrt(3.0 / dim), np.sqrt(3.0 / dim), size=(dim,)
        )
        self.readout_weight = torch.from_numpy(readout).to(self.dtype)
        self.readout_weight.requires_grad_(True)

        self.random_query_entity: torch.Tensor | None = None
        self.random_query_rel: torch.Tensor | None = None
        if config.ablation == "random_query":
            rng = np.random.default_rng(int(seeds[6]))
            self.random_query_entity = torch.from_numpy(
                rng.uniform(-config.init_scale, config.init_scale, (store.n_entities, dim))
            ).to(self.dtype)
            self.random_query_rel = torch.from_numpy(
                rng.uniform(
                    -config.init_scale,
                    config.init_scale,
                    (store.n_relations_augmented, dim),
                )
            ).to(self.dtype)

    # -- parameters ------------------------------------------------------

    def parameter_groups(self) -> dict[str, dict[str, torch.Tensor]]:
        groups = {
            "embeddings": self.emb.tensors(),
            "gate_cell": self.cell.tensors(),
            "layers": self.layers.tensors(),
            "selection": self.selection.tensors(),
            "readout": {"weight": self.readout_weight},
        }
        if self.query_cell is not None:
            groups["query_gate_cell"] = self.query_cell.tensors()
        return groups

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return {
            f"{group}.{name}": tensor
            for group, tensors in self.parameter_groups().items()
            for name, tensor in tensors.items()
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays (learnable and fixed), for checkpoints."""
        out = {k: v.detach().numpy() for k, v in self.named_parameters().items()}
        if self.random_query_entity is not None:
            out["fixed.random_query_entity"] = self.random_query_entity.numpy()
            out["fixed.random_query_rel"] = self.random_query_rel.numpy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        fixed = {}
        if self.random_query_entity is not None:
            fixed = {
                "fixed.random_query_entity": self.random_query_entity,
                "fixed.random_query_rel": self.random_query_rel,
            }
        for name, arr in arrays.items():
            target = named.get(name, fixed.get(name))
            if target is None:
                raise KeyError(f"checkpoint array {name!r} has no matching parameter")
            if tuple(target.shape) != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name}: model {tuple(target.shape)}, "
                    f"checkpoint {arr.shape}"
                )
            with torch.no_grad():
                target.copy_(torch.from_numpy(arr.copy()))

    # -- query wiring ------------------------------------------------------

    def _query_vectors(
        self, q_ent: np.ndarray, q_rel: np.ndarray
    ) -> tuple[torch.Tensor, torch.Tensor]:
        ent_t = torch.from_numpy(q_ent)
        rel_t = torch.from_numpy(q_rel)
        if self.config.ablation == "random_query":
            return self.random_query_entity[ent_t], self.random_query_rel[rel_t]
        return self.emb.head_factors[ent_t], self.emb.rel_factors[rel_t]

    def refined_query_rel(
        self, q_ent: np.ndarray, q_rel: np.ndarray, n_layers: int | None = None
    ) -> torch.Tensor:
        """Query-relation embedding after the final refinement step."""
        ent_vecs, rel_vecs = self._query_vectors(q_ent, q_rel)
        if self.config.ablation in ("no_crr", "no_gsp"):
            return rel_vecs
        steps = self.config.n_layers if n_layers is None else n_layers
        chain = chain_stack(self.query_cell or self.cell, rel_vecs, ent_vecs, steps)
        return chain[-1]

    def effective_fusion_weight(self) -> float:
        if self.config.ablation == "no_gsp":
            return 0.0
        if self.config.ablation == "no_phi":
            return 1.0
        return self.config.fusion_weight

    # -- scoring -----------------------------------------------------------

    def score_queries(
        self,
        queries: np.ndarray,
        mode: str,
        gen: torch.Generator | None = None,
        hide_triples: np.ndarray | None = None,
    ) -> tuple[torch.Tensor, dict]:
        """Hybrid scores of every entity for each (q_e, q_r) row.

        Returns the (batch, n_entities) score matrix and auxiliary pieces
        used by the loss: the query entity vectors, the refined query
        relation and the reached mask.
        """
        cfg = self.config
        q_ent = queries[:, 0].astype(np.int64)
        q_rel = queries[:, 1].astype(np.int64)
        lam = self.effective_fusion_weight()
        ent_vecs, rel_vecs = self._query_vectors(q_ent, q_rel)

        if cfg.ablation == "no_gsp":
            query_rel = rel_vecs
            scores = (ent_vecs * query_rel) @ self.emb.tail_factors.T
            reached = np.zeros((len(q_ent), self.store.n_entities), dtype=bool)
            reached[np.arange(len(q_ent)), q_ent] = True
            return scores, {
                "query_entity_vecs": ent_vecs,
                "query_rel": query_rel,
                "reached": reached,
            }

        result = propagate_batch(
            self.store,
            queries,
            self.emb,
            self.cell,
            self.layers,
            self.selection,
            n_layers=cfg.n_layers,
            k=cfg.select_k,
            mode=mode,
            temperature=cfg.temperature,
            gen=gen,
            query_cell=self.query_cell,
            hide_triples=hide_triples,
            query_entity_vecs=ent_vecs,
            query_rel_vecs=rel_vecs,
            refine_relations=cfg.ablation != "no_crr",
        )
        batch = len(q_ent)
        structural = result.hidden.reshape(batch * self.store.n_entities, -1) @ (
            self.readout_weight
        )
        structural = structural.reshape(batch, self.store.n_entities)
        if lam >= 1.0:
            scores = structural
        else:
            semantic = (ent_vecs * result.query_rel) @ self.emb.tail_factors.T
            scores = lam * structural + (1.0 - lam) * semantic
        return scores, {
            "query_entity_vecs": ent_vecs,
            "query_rel": result.query_rel,
            "reached": result.reached,
        }

    def loss_on_batch(
        self,
        triples: np.ndarray,
        mode: str = "train",
        gen: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Mean log-loss plus the cubic penalty for (q_e, q_r, q_a) rows."""
        cfg = self.config
        queries = triples[:, :2]
        answers = torch.from_numpy(triples[:, 2].astype(np.int64))
        hide = triples if (mode == "train" and cfg.hide_query_edges) else None
        scores, aux = self.score_queries(queries, mode, gen=gen, hide_triples=hide)
        batch = scores.shape[0]
        target = scores[torch.arange(batch), answers]
        if cfg.normalizer == "subgraph":
            mask = torch.from_numpy(aux["reached"].copy())
            mask[torch.arange(batch), answers] = True
            masked = scores.masked_fill(~mask, float("-inf"))
            lse = torch.logsumexp(masked, dim=1)
        else:
            lse = torch.logsumexp(scores, dim=1)
        log_losses = lse - target
        loss = log_losses.mean()
        if cfg.reg_weight > 0:
            reg = (
                (aux["query_entity_vecs"].abs() ** 3).sum(dim=1)
                + (aux["query_rel"].abs() ** 3).sum(dim=1)
                + (self.emb.tail_factors[answers].abs() ** 3).sum(dim=1)
            )
            loss = loss + cfg.reg_weight * reg.mean()
        return loss

    def run_propagation(
        self, query: tuple[int, int], mode: str = "infer", seed: int = 0
    ) -> PropagationTrace:
        gen = torch.Generator().manual_seed(seed)
        result = propagate_batch(
            self.store,
            np.array([query], dtype=np.int64),
            self.emb,
            self.cell,
            self.layers,
            self.selection,
            n_layers=self.config.n_layers,
            k=self.config.select_k,
            mode=mode,
            temperature=self.config.temperature,
            gen=gen,
            query_cell=self.query_cell,
            refine_relations=self.config.ablation != "no_crr",
            record_trace=True,
        )
        return result.traces[0]
