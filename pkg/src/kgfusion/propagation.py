"""Query-guided layered subgraph construction.

Each layer expands the frontier's out-edges, refines the relation
embedding of every candidate edge, scores edges with query-conditioned
sigmoid attention, aggregates messages into candidate states, and keeps
the top-K candidates. During training the top-K is perturbed with Gumbel
noise and the kept/dropped decision is applied through a straight-through
mask so the importance scorer still receives gradient.

`propagate_batch` is the single engine; `run_propagation` wraps it for
one query and records a full trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .embeddings import CpEmbeddings
from .refine import GateCell, chain_stack
from .store import TripleStore


@dataclass
class LayerView:
    msg_weight: torch.Tensor  # (dim, dim)
    att_weight: torch.Tensor  # (dim, dim)
    att_vec: torch.Tensor  # (dim,)


@dataclass
class LayerParams:
    """Per-layer message/attention transforms, stacked over layers."""

    msg_weight: torch.Tensor  # (n_layers, dim, dim)
    att_weight: torch.Tensor  # (n_layers, dim, dim)
    att_vec: torch.Tensor  # (n_layers, dim)

    @property
    def n_layers(self) -> int:
        return self.msg_weight.shape[0]

    def at(self, layer: int) -> LayerView:
        """Parameters of layer `layer` (1-based, like the loop index)."""
        i = layer - 1
        return LayerView(self.msg_weight[i], self.att_weight[i], self.att_vec[i])

    def tensors(self) -> dict[str, torch.Tensor]:
        return {
            "msg_weight": self.msg_weight,
            "att_weight": self.att_weight,
            "att_vec": self.att_vec,
        }


@dataclass
class SelectionParams:
    score_weight: torch.Tensor  # (dim,)

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"score_weight": self.score_weight}


def init_layer_params(
    n_layers: int,
    dim: int,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
    requires_grad: bool = True,
) -> LayerParams:
    bound = float(np.sqrt(3.0 / dim))

    def draw(*shape) -> torch.Tensor:
        t = torch.from_numpy(rng.uniform(-bound, bound, size=shape)).to(dtype)
        t.requires_grad_(requires_grad)
        return t

    return LayerParams(
        msg_weight=draw(n_layers, dim, dim),
        att_weight=draw(n_layers, dim, dim),
        att_vec=draw(n_layers, dim),
    )


def init_selection_params(
    dim: int,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
    requires_grad: bool = True,
) -> SelectionParams:
    bound = float(np.sqrt(3.0 / dim))
    t = torch.from_numpy(rng.uniform(-bound, bound, size=(dim,))).to(dtype)
    t.requires_grad_(requires_grad)
    return SelectionParams(score_weight=t)


# -- single-edge operations (contract surfaces) ---------------------------


def expand(
    store: TripleStore, frontier: set[int] | list[int]
) -> tuple[list[tuple[int, int, int]], set[int]]:
    """Union of augmented out-edges of the frontier, in (head, relation,
    tail) order, plus the candidate tail set."""
    edges: list[tuple[int, int, int]] = []
    for h in sorted(set(frontier)):
        for r, t in store.neighbors(h):
            edges.append((h, r, t))
    return edges, {t for _, _, t in edges}


def attention_weight(
    h_head: torch.Tensor, e_r: torch.Tensor, e_qr: torch.Tensor, layer: LayerView
) -> torch.Tensor:
    """Edge attention sigma(v . relu(W (h_head + e_r + e_qr)))."""
    z = torch.relu(layer.att_weight @ (h_head + e_r + e_qr))
    return torch.sigmoid(layer.att_vec @ z)


def aggregate_node(
    messages: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]], layer: LayerView
) -> torch.Tensor:
    """tanh(W . sum_i alpha_i (h_i + e_i)); empty input gives the zero vector."""
    dim = layer.msg_weight.shape[0]
    total = layer.msg_weight.new_zeros(dim)
    for alpha, h_head, e_r in messages:
        total = total + alpha * (h_head + e_r)
    return torch.tanh(layer.msg_weight @ total)


def importance(h: torch.Tensor, sel: SelectionParams) -> torch.Tensor:
    """Scalar relevance score of a candidate state."""
    if h.shape != sel.score_weight.shape:
        raise ValueError(
            f"importance: shape mismatch {tuple(h.shape)} vs {tuple(sel.score_weight.shape)}"
        )
    return sel.score_weight @ h


def gumbel_noise(
    shape: tuple[int, ...], gen: torch.Generator | None, dtype: torch.dtype
) -> torch.Tensor:
    u = torch.rand(shape, generator=gen, dtype=torch.float64)
    eps = 1e-20
    return (-torch.log(-torch.log(u + eps) + eps)).to(dtype)


def topk_mask(
    group: np.ndarray, ids: np.ndarray, scores: np.ndarray, k: int
) -> np.ndarray:
    """Boolean keep-mask of the k best scores per group; ties broken by
    smaller id. Groups with at most k members keep everything."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = np.lexsort((ids, -scores, group))
    g_sorted = group[order]
    starts = np.ones(len(order), dtype=bool)
    starts[1:] = g_sorted[1:] != g_sorted[:-1]
    start_pos = np.flatnonzero(starts)
    block = np.repeat(start_pos, np.diff(np.append(start_pos, len(order))))
    rank_in_group = np.arange(len(order)) - block
    keep = np.zeros(len(order), dtype=bool)
    keep[order] = rank_in_group < k
    return keep


def select_topk(
    scores: dict[int, float],
    k: int,
    mode: str,
    temperature: float = 1.0,
    seed: int | None = None,
) -> tuple[set[int], dict[int, int], dict[int, float]]:
    """Top-k node selection over a score map.

    infer mode is deterministic (ties to the smaller id); train mode adds
    Gumbel(0,1) noise scaled by `temperature` before ranking. Returns the
    selected set, the 0/1 hard mask and the untouched soft scores.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    ids = np.array(sorted(scores), dtype=np.int64)
    vals = np.array([scores[i] for i in ids], dtype=np.float64)
    if mode == "train":
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        vals = vals + gumbel_noise((len(ids),), gen, torch.float64).numpy() * temperature
    keep = topk_mask(np.zeros(len(ids), dtype=np.int64), ids, vals, k)
    selected = {int(i) for i in ids[keep]}
    hard = {int(i): int(i in selected) for i in ids}
    return selected, hard, dict(scores)


def apply_hard_mask(
    h: torch.Tensor, s_hard: float | torch.Tensor, s_soft: torch.Tensor
) -> torch.Tensor:
    """Straight-through mask: forward value h * s_hard, gradient w.r.t.
    the soft score as if the output were h * s_soft."""
    if not torch.is_tensor(s_hard):
        s_hard = torch.as_tensor(s_hard, dtype=h.dtype)
    return h * (s_hard - s_soft.detach() + s_soft)


# -- batched engine --------------------------------------------------------


@dataclass
class LayerTrace:
    frontier: np.ndarray  # entity ids entering this layer
    edge_head: np.ndarray
    edge_rel: np.ndarray
    edge_tail: np.ndarray
    attention: np.ndarray  # per-edge alpha
    candidates: np.ndarray  # distinct tails, sorted
    soft_scores: np.ndarray  # per candidate
    hard_mask: np.ndarray  # per candidate, 0/1
    hidden: np.ndarray  # per candidate pre-mask state


@dataclass
class PropagationTrace:
    query: tuple[int, int]
    n_layers: int
    layers: list[LayerTrace] = field(default_factory=list)

    @property
    def selected_per_layer(self) -> list[np.ndarray]:
        return [lt.candidates[lt.hard_mask.astype(bool)] for lt in self.layers]

    def final_nodes(self) -> np.ndarray:
        if not self.layers:
            return np.array([self.query[0]], dtype=np.int64)
        return self.selected_per_layer[-1]


@dataclass
class PropagationResult:
    hidden: torch.Tensor  # (batch, n_entities, dim), zero where unvisited
    query_rel: torch.Tensor  # (batch, dim) refined query relation at final layer
    reached: np.ndarray  # (batch, n_entities) bool, ever selected
    traces: list[PropagationTrace] | None


def _expand_arrays(
    store: TripleStore, f_query: np.ndarray, f_node: np.ndarray
) -> tuple[np.ndarray, ...]:
    """Concatenated out-edges of all (query, node) frontier rows."""
    ptr = store.head_ptr
    starts = ptr[f_node]
    counts = ptr[f_node + 1] - starts
    total = int(counts.sum())
    if total == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z, z, z
    block = np.repeat(np.cumsum(counts) - counts, counts)
    idx = np.repeat(starts, counts) + (np.arange(total) - block)
    e_query = np.repeat(f_query, counts)
    return (
        e_query,
        store.edge_head[idx],
        store.edge_rel[idx],
        store.edge_tail[idx],
        store.edge_pair[idx],
    )


def propagate_batch(
    store: TripleStore,
    queries: np.ndarray,  # (batch, 2) of (entity, augmented relation id)
    emb: CpEmbeddings,
    cell: GateCell,
    layers: LayerParams,
    selection: SelectionParams,
    n_layers: int,
    k: int,
    mode: str,
    temperature: float = 1.0,
    gen: torch.Generator | None = None,
    query_cell: GateCell | None = None,
    hide_triples: np.ndarray | None = None,  # (batch, 3), train-time leak guard
    query_entity_vecs: torch.Tensor | None = None,
    query_rel_vecs: torch.Tensor | None = None,
    refine_relations: bool = True,
    record_trace: bool = False,
) -> PropagationResult:
    """Run `n_layers` rounds of expand/refine/attend/aggregate/select for a
    batch of queries and return per-entity states plus the refined query
    relation. States are zero for entities that never held a selected
    state; a node dropped by selection keeps a zeroed state whose gradient
    still reaches its soft score.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if n_layers < 1:
        raise ValueError(f"n_layers must be >= 1, got {n_layers}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    batch = queries.shape[0]
    n_ent = store.n_entities
    dim = emb.dim
    dtype = emb.head_factors.dtype
    q_ent = queries[:, 0].astype(np.int64)
    q_rel = queries[:, 1].astype(np.int64)
    if q_ent.size and (q_ent.min() < 0 or q_ent.max() >= n_ent):
        raise ValueError("query entity id out of range")
    if q_rel.size and (q_rel.min() < 0 or q_rel.max() >= store.n_relations_augmented):
        raise ValueError("query relation id out of range")

    q_ent_t = torch.from_numpy(q_ent)
    if query_entity_vecs is None:
        query_entity_vecs = emb.head_factors[q_ent_t]
    if query_rel_vecs is None:
        query_rel_vecs = emb.rel_factors[torch.from_numpy(q_rel)]

    # refined query relation per layer: (n_layers, batch, dim)
    if refine_relations:
        q_chain = chain_stack(
            query_cell or cell, query_rel_vecs, query_entity_vecs, n_layers
        )
    else:
        q_chain = query_rel_vecs.unsqueeze(0).expand(n_layers, batch, dim)

    # refined edge-relation value after n steps, for every adjacency pair
    n_pairs = len(store.pair_head)
    if refine_relations:
        pair_start = emb.rel_factors[torch.from_numpy(store.pair_rel)]
        pair_hidden = emb.head_factors[torch.from_numpy(store.pair_head)]
        pair_chain = chain_stack(cell, pair_start, pair_hidden, n_layers)
    else:
        pair_chain = None
    steps_taken = np.zeros(batch * n_pairs, dtype=np.int64)

    # seed the query nodes' states; layer 1 always overwrites these rows
    hidden = torch.zeros(batch, n_ent, dim, dtype=dtype).index_put(
        (torch.arange(batch), q_ent_t), query_entity_vecs
    )
    reached = np.zeros((batch, n_ent), dtype=bool)
    reached[np.arange(batch), q_ent] = True

    f_query = np.arange(batch, dtype=np.int64)
    f_node = q_ent.copy()
    traces = None
    if record_trace:
        traces = [PropagationTrace(query=(int(e), int(r)), n_layers=n_layers)
                  for e, r in zip(q_ent, q_rel)]

    for layer in range(1, n_layers + 1):
        e_query, e_head, e_rel, e_tail, e_pair = _expand_arrays(store, f_query, f_node)
        if hide_triples is not None and e_query.size:
            hh, hr, ht = (hide_triples[e_query, i] for i in range(3))
            n_orig = store.scheme.n_original
            hr_rev = np.where(
                hr == store.scheme.identity_id,
                hr,
                np.where(hr < n_orig, hr + n_orig, hr - n_orig),
            )
            fwd_hit = (e_head == hh) & (e_rel == hr) & (e_tail == ht)
            bwd_hit = (e_head == ht) & (e_rel == hr_rev) & (e_tail == hh)
            keep_rows = ~(fwd_hit | bwd_hit)
            e_query, e_head, e_rel, e_tail, e_pair = (
                a[keep_rows] for a in (e_query, e_head, e_rel, e_tail, e_pair)
            )
        if e_query.size == 0:
            break

        if refine_relations:
            flat = e_query * n_pairs + e_pair
            touched = np.unique(flat)
            steps_taken[touched] += 1
            n_step = steps_taken[flat]
            e_rel_vec = pair_chain[
                torch.from_numpy(n_step - 1), torch.from_numpy(e_pair)
            ]
        else:
            e_rel_vec = emb.rel_factors[torch.from_numpy(e_rel)]

        e_query_t = torch.from_numpy(e_query)
        head_state = hidden[e_query_t, torch.from_numpy(e_head)]
        pre = head_state + e_rel_vec  # shared by attention input and message
        lv = layers.at(layer)
        att_in = pre + q_chain[layer - 1][e_query_t]
        alpha = torch.sigmoid(torch.relu(att_in @ lv.att_weight.T) @ lv.att_vec)
        msg = alpha.unsqueeze(1) * pre

        ckey = e_query * n_ent + e_tail
        cand_key, inverse = np.unique(ckey, return_inverse=True)
        cand_query = (cand_key // n_ent).astype(np.int64)
        cand_node = (cand_key % n_ent).astype(np.int64)
        agg = torch.zeros(len(cand_key), dim, dtype=dtype).index_add(
            0, torch.from_numpy(inverse), msg
        )
        h_new = torch.tanh(agg @ lv.msg_weight.T)
        soft = h_new @ selection.score_weight

        rank_scores = soft.detach().double().numpy()
        if mode == "train":
            noise = gumbel_noise((len(cand_key),), gen, torch.float64).numpy()
            rank_scores = rank_scores + noise * temperature
        keep = topk_mask(cand_query, cand_node, rank_scores, k)

        hard = torch.from_numpy(keep).to(dtype)
        st_factor = hard - soft.detach() + soft
        h_masked = h_new * st_factor.unsqueeze(1)
        hidden = hidden.index_put(
            (torch.from_numpy(cand_query), torch.from_numpy(cand_node)), h_masked
        )
        reached[cand_query[keep], cand_node[keep]] = True

        if record_trace:
            for b in range(batch):
                rows = e_query == b
                crows = cand_query == b
                traces[b].layers.append(
                    LayerTrace(
                        frontier=f_node[f_query == b].copy(),
                        edge_head=e_head[rows].copy(),
                        edge_rel=e_rel[rows].copy(),
                        edge_tail=e_tail[rows].copy(),
                        attention=alpha.detach().double().numpy()[rows],
                        candidates=cand_node[crows].copy(),
                        soft_scores=soft.detach().double().numpy()[crows],
                        hard_mask=keep[crows].astype(np.int64),
                        hidden=h_new.detach().double().numpy()[crows],
                    )
                )

        f_query = cand_query[keep]
        f_node = cand_node[keep]

    return PropagationResult(
        hidden=hidden, query_rel=q_chain[-1], reached=reached, traces=traces
    )


def run_propagation(
    store: TripleStore,
    query: tuple[int, int],
    emb: CpEmbeddings,
    cell: GateCell,
    layers: LayerParams,
    selection: SelectionParams,
    n_layers: int,
    k: int,
    mode: str = "infer",
    temperature: float = 1.0,
    seed: int = 0,
    query_cell: GateCell | None = None,
    refine_relations: bool = True,
) -> PropagationTrace:
    """Propagate a single query and return its full layer-by-layer trace."""
    gen = torch.Generator().manual_seed(seed)
    result = propagate_batch(
        store,
        np.array([query], dtype=np.int64),
        emb,
        cell,
        layers,
        selection,
        n_layers=n_layers,
        k=k,
        mode=mode,
        temperature=temperature,
        gen=gen,
        query_cell=query_cell,
        refine_relations=refine_relations,
        record_trace=True,
    )
    return result.traces[0]
