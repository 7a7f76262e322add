"""Inference-path extraction from recorded propagation traces.

A path chains one trace edge per layer from the query entity to the
target; its weight is the product of the attention values along it.
The extractor is an exact k-best layered Viterbi: attention lies in
(0, 1), so keeping the `beam` best prefixes per node is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass

from .propagation import PropagationTrace
from .store import TripleStore


@dataclass(frozen=True)
class PathEdge:
    head: int
    rel: int
    tail: int
    layer: int
    attention: float


@dataclass
class ExplanationPath:
    edges: tuple[PathEdge, ...]
    weight: float  # product of attention values
    terminal_score: float | None = None

    @property
    def nodes(self) -> list[int]:
        return [self.edges[0].head] + [e.tail for e in self.edges]


def extract_paths(
    trace: PropagationTrace, target: int, beam: int = 5
) -> list[ExplanationPath]:
    """Up to `beam` maximum-attention-product paths from the query entity
    to `target`; empty when the target was never reached."""
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    q_e = trace.query[0]
    # per node: best (weight, edge tuple) prefixes, highest weight first
    partials: dict[int, list[tuple[float, tuple[PathEdge, ...]]]] = {
        q_e: [(1.0, ())]
    }
    completed: list[tuple[float, tuple[PathEdge, ...]]] = []
    for depth, layer in enumerate(trace.layers, start=1):
        extended: dict[int, list[tuple[float, tuple[PathEdge, ...]]]] = {}
        for h, r, t, alpha in zip(
            layer.edge_head, layer.edge_rel, layer.edge_tail, layer.attention
        ):
            for weight, edges in partials.get(int(h), []):
                edge = PathEdge(int(h), int(r), int(t), depth, float(alpha))
                entry = (weight * float(alpha), edges + (edge,))
                extended.setdefault(int(t), []).append(entry)
        for node, entries in extended.items():
            entries.sort(key=lambda e: (-e[0], [se.tail for se in e[1]]))
            del entries[beam:]
            if node == target:
                completed.extend(entries)
        partials = extended
    completed.sort(key=lambda e: (-e[0], len(e[1]), [se.tail for se in e[1]]))
    return [ExplanationPath(edges=e, weight=w) for w, e in completed[:beam]]


def relation_display(store: TripleStore, rel: int) -> str:
    if rel < store.scheme.n_original:
        return store.relations.label_of(rel)
    if rel < store.scheme.identity_id:
        return "~" + store.relations.label_of(rel - store.scheme.n_original)
    return "<self>"


def paths_to_text(paths: list[ExplanationPath], store: TripleStore) -> str:
    if not paths:
        return "target not reached within the propagation depth\n"
    lines = []
    for i, path in enumerate(paths, start=1):
        hops = " -> ".join(
            f"[{relation_display(store, e.rel)} a={e.attention:.3f}] "
            f"{store.entities.label_of(e.tail)}"
            for e in path.edges
        )
        start = store.entities.label_of(path.edges[0].head)
        score = "" if path.terminal_score is None else f" score={path.terminal_score:.4f}"
        lines.append(f"#{i} weight={path.weight:.4f}{score}: {start} -> {hops}")
    return "\n".join(lines) + "\n"


def paths_to_dot(paths: list[ExplanationPath], store: TripleStore) -> str:
    """DOT graph of the explanation paths, attention as edge weight."""
    lines = ["digraph explanation {", "  rankdir=LR;"]
    nodes = {}
    for path in paths:
        for node in path.nodes:
            nodes.setdefault(node, store.entities.label_of(node))
    for node, label in sorted(nodes.items()):
        lines.append(f'  n{node} [label="{label}"];')
    seen = set()
    for path in paths:
        for e in path.edges:
            key = (e.head, e.rel, e.tail, e.layer)
            if key in seen:
                continue
            seen.add(key)
            lines.append(
                f'  n{e.head} -> n{e.tail} [label="{relation_display(store, e.rel)} '
                f'({e.attention:.3f})" penwidth={max(0.3, 4.0 * e.attention):.2f}];'
            )
    lines.append("}")
    return "\n".join(lines) + "\n"
