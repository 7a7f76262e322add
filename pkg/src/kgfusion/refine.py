"""Gated recurrent refinement of relation embeddings.

One cell serves two recurrences: per-edge chains keyed by (head entity,
relation) whose gate input is the previous refined embedding and whose
hidden input is the static head-entity embedding, and per-query chains
keyed by the query relation with the query entity embedding as hidden
input. A chain's first step starts from the base relation embedding and
a zero cell state.

Because the hidden input never changes along a chain, the state after n
steps depends only on (key, n). The batched propagation engine exploits
this: it precomputes `chain_stack` for all adjacency pairs and reads the
entry matching each pair's per-query step count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

GATES = ("forget", "input", "candidate", "output")


@dataclass
class GateCell:
    """Weights for the four gates; each maps (input, hidden) -> dim."""

    in_weights: dict[str, torch.Tensor]  # gate -> (dim, dim)
    hid_weights: dict[str, torch.Tensor]  # gate -> (dim, dim)
    biases: dict[str, torch.Tensor]  # gate -> (dim,)

    @property
    def dim(self) -> int:
        return self.biases["forget"].shape[0]

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for g in GATES:
            out[f"w_{g}"] = self.in_weights[g]
            out[f"u_{g}"] = self.hid_weights[g]
            out[f"b_{g}"] = self.biases[g]
        return out

    def fused(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Gate weights stacked along the output axis, order f,i,c,o."""
        w = torch.cat([self.in_weights[g] for g in GATES], dim=0)
        u = torch.cat([self.hid_weights[g] for g in GATES], dim=0)
        b = torch.cat([self.biases[g] for g in GATES], dim=0)
        return w, u, b


def init_gate_cell(
    dim: int,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
    requires_grad: bool = True,
) -> GateCell:
    """Glorot-uniform gate weights, zero biases."""
    bound = float(np.sqrt(3.0 / dim))

    def mat() -> torch.Tensor:
        t = torch.from_numpy(rng.uniform(-bound, bound, size=(dim, dim))).to(dtype)
        t.requires_grad_(requires_grad)
        return t

    def vec() -> torch.Tensor:
        t = torch.zeros(dim, dtype=dtype)
        t.requires_grad_(requires_grad)
        return t

    return GateCell(
        in_weights={g: mat() for g in GATES},
        hid_weights={g: mat() for g in GATES},
        biases={g: vec() for g in GATES},
    )


def cell_step(
    cell: GateCell, x: torch.Tensor, hidden: torch.Tensor, c_prev: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """One gated update; supports (dim,) vectors or (n, dim) batches."""
    if x.shape != hidden.shape or x.shape != c_prev.shape or x.shape[-1] != cell.dim:
        raise ValueError(
            f"cell_step: shape mismatch x={tuple(x.shape)} hidden={tuple(hidden.shape)} "
            f"c_prev={tuple(c_prev.shape)} dim={cell.dim}"
        )
    w, u, b = cell.fused()
    gates = x @ w.T + hidden @ u.T + b
    f, i, c_cand, o = gates.chunk(4, dim=-1)
    f = torch.sigmoid(f)
    i = torch.sigmoid(i)
    c_cand = torch.tanh(c_cand)
    o = torch.sigmoid(o)
    c_new = f * c_prev + i * c_cand
    h_new = o * torch.tanh(c_new)
    return h_new, c_new


def chain_stack(
    cell: GateCell, start: torch.Tensor, hidden: torch.Tensor, n_steps: int
) -> torch.Tensor:
    """Outputs of n_steps successive cell applications, shape
    (n_steps, n, dim); entry k-1 is the state after k steps.

    The hidden input is constant per row, so its projection is hoisted
    out of the step loop.
    """
    w, u, b = cell.fused()
    hid_part = hidden @ u.T + b
    x = start
    c = torch.zeros_like(start)
    outs = []
    for _ in range(n_steps):
        gates = x @ w.T + hid_part
        f, i, c_cand, o = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(c_cand)
        x = torch.sigmoid(o) * torch.tanh(c)
        outs.append(x)
    return torch.stack(outs, dim=0)


class RelationStateTable:
    """Per-query refinement state: key -> (refined embedding, cell state).

    Keys are relation ids for the query chain and (head, relation) pairs
    for edge chains. Reading an absent key yields the base relation
    embedding and a zero cell state. One table per in-flight query;
    tables are never shared.
    """

    def __init__(self, rel_factors: torch.Tensor):
        self.rel_factors = rel_factors
        self._states: dict[object, tuple[torch.Tensor, torch.Tensor]] = {}

    def read(self, key: object, r: int) -> tuple[torch.Tensor, torch.Tensor]:
        state = self._states.get(key)
        if state is None:
            base = self.rel_factors[r]
            return base, torch.zeros_like(base)
        return state

    def write(self, key: object, emb: torch.Tensor, c: torch.Tensor) -> None:
        self._states[key] = (emb, c)


def refine_edge_relation(
    table: RelationStateTable,
    cell: GateCell,
    h: int,
    r: int,
    head_factors: torch.Tensor,
    rel_factors: torch.Tensor,
) -> torch.Tensor:
    """Advance the (h, r) chain one step and return the refined embedding."""
    if not 0 <= h < head_factors.shape[0]:
        raise ValueError(f"entity id {h} out of range")
    if not 0 <= r < rel_factors.shape[0]:
        raise ValueError(f"relation id {r} out of range")
    key = ("edge", h, r)
    prev, c_prev = table.read(key, r)
    h_new, c_new = cell_step(cell, prev, head_factors[h], c_prev)
    table.write(key, h_new, c_new)
    return h_new


def refine_query_relation(
    table: RelationStateTable,
    cell: GateCell,
    q_r: int,
    q_e: int,
    head_factors: torch.Tensor,
    rel_factors: torch.Tensor,
) -> torch.Tensor:
    """Advance the query-relation chain one step under context q_e."""
    if not 0 <= q_e < head_factors.shape[0]:
        raise ValueError(f"entity id {q_e} out of range")
    if not 0 <= q_r < rel_factors.shape[0]:
        raise ValueError(f"relation id {q_r} out of range")
    key = ("query", q_r)
    prev, c_prev = table.read(key, q_r)
    h_new, c_new = cell_step(cell, prev, head_factors[q_e], c_prev)
    table.write(key, h_new, c_new)
    return h_new
