"""Triple storage: vocabularies, splits, graph augmentation and adjacency.

Facts from the ``background`` and ``train`` splits form the propagation
graph; ``valid``/``test`` triples contribute to vocabularies and to the
known-fact filter only, so evaluation queries can never walk over their
own answer edges.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

SPLITS = ("background", "train", "valid", "test")
GRAPH_SPLITS = ("background", "train")


@dataclass
class AugmentedRelationScheme:
    """Id layout after adding reverse and identity relations.

    Original relations keep their ids, the reverse of ``r`` is
    ``r + n_original`` and the single identity relation sits at
    ``2 * n_original``.
    """

    n_original: int

    @property
    def n_augmented(self) -> int:
        return 2 * self.n_original + 1

    @property
    def identity_id(self) -> int:
        return 2 * self.n_original

    def reverse_of(self, r: int) -> int:
        if r == self.identity_id:
            return r
        if r >= self.n_original:
            return r - self.n_original
        return r + self.n_original


class IdMap:
    """Dense string-label <-> integer-id bijection, first-seen order."""

    def __init__(self):
        self._ids: dict[str, int] = {}
        self._labels: list[str] = []

    def __len__(self) -> int:
        return len(self._labels)

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    def get_or_add(self, label: str) -> int:
        i = self._ids.get(label)
        if i is None:
            i = len(self._labels)
            self._ids[label] = i
            self._labels.append(label)
        return i

    def id_of(self, label: str) -> int:
        try:
            return self._ids[label]
        except KeyError:
            raise DataError(f"unknown label {label!r}") from None

    def label_of(self, i: int) -> str:
        return self._labels[i]

    @property
    def labels(self) -> list[str]:
        return list(self._labels)


class TripleStore:
    """Entity/relation vocabularies, split triples and the augmented graph.

    Mutable while loading; :func:`augment` freezes it and builds the
    CSR adjacency over background+train facts plus reverse edges and one
    identity self-loop per entity. After that the store is read-only and
    safe to share across threads.
    """

    def __init__(self):
        self.entities = IdMap()
        self.relations = IdMap()  # original relations only
        self.splits: dict[str, list[tuple[int, int, int]]] = {s: [] for s in SPLITS}
        self._split_seen: dict[str, set] = {s: set() for s in SPLITS}
        self.scheme: AugmentedRelationScheme | None = None
        self.known_facts: set[tuple[int, int, int]] = set()
        # CSR adjacency, filled by augment()
        self.edge_head: np.ndarray | None = None
        self.edge_rel: np.ndarray | None = None
        self.edge_tail: np.ndarray | None = None
        self.head_ptr: np.ndarray | None = None
        # dense ids for distinct (head, relation) pairs of the adjacency
        self.edge_pair: np.ndarray | None = None
        self.pair_head: np.ndarray | None = None
        self.pair_rel: np.ndarray | None = None

    # -- loading ---------------------------------------------------------

    @property
    def augmented(self) -> bool:
        return self.scheme is not None

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations_original(self) -> int:
        return len(self.relations)

    @property
    def n_relations_augmented(self) -> int:
        if self.scheme is None:
            raise DataError("store not augmented yet")
        return self.scheme.n_augmented

    @property
    def n_edges(self) -> int:
        return 0 if self.edge_head is None else len(self.edge_head)

    def add_triple(self, head: str, relation: str, tail: str, split: str) -> bool:
        """Insert one labelled triple; returns False for an in-split duplicate."""
        if self.augmented:
            raise DataError("store already augmented; cannot add triples")
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}, expected one of {SPLITS}")
        h = self.entities.get_or_add(head)
        r = self.relations.get_or_add(relation)
        t = self.entities.get_or_add(tail)
        if (h, r, t) in self._split_seen[split]:
            return False
        self._split_seen[split].add((h, r, t))
        self.splits[split].append((h, r, t))
        return True

    # -- augmentation ----------------------------------------------------

    def graph_facts(self) -> list[tuple[int, int, int]]:
        """Deduplicated background+train facts, in original id order."""
        seen = set()
        out = []
        for split in GRAPH_SPLITS:
            for f in self.splits[split]:
                if f not in seen:
                    seen.add(f)
                    out.append(f)
        return out

    def neighbors(self, h: int) -> list[tuple[int, int]]:
        """Augmented out-edges of ``h``, sorted by (relation, tail)."""
        if not self.augmented:
            raise DataError("store not augmented yet")
        if not 0 <= h < self.n_entities:
            raise DataError(f"entity id {h} out of range [0, {self.n_entities})")
        lo, hi = self.head_ptr[h], self.head_ptr[h + 1]
        return list(zip(self.edge_rel[lo:hi].tolist(), self.edge_tail[lo:hi].tolist()))


def load_triples(path: str, store: TripleStore, split: str) -> int:
    """Load one tab-separated triple file into ``split``; returns the
    number of distinct triples read from this file."""
    if not os.path.exists(path):
        raise DataError(f"triple file not found: {path}")
    count = 0
    nonblank = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            nonblank += 1
            parts = line.split("\t")
            if len(parts) != 3:
                # tolerate space-separated files, common in the wild
                parts = line.split()
            if len(parts) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            if store.add_triple(parts[0], parts[1], parts[2], split):
                count += 1
    if nonblank == 0:
        raise DataError(f"{path}: no triples")
    return count


def load_dataset(data_dir: str, store: TripleStore | None = None) -> TripleStore:
    """Load ``train/valid/test.txt`` (and optional ``background.txt``)
    from a dataset directory and augment the result."""
    if not os.path.isdir(data_dir):
        raise DataError(f"dataset directory not found: {data_dir}")
    store = store or TripleStore()
    for split in SPLITS:
        path = os.path.join(data_dir, f"{split}.txt")
        if split == "background" and not os.path.exists(path):
            continue
        load_triples(path, store, split)
    augment(store)
    return store


def augment(store: TripleStore) -> AugmentedRelationScheme:
    """Add reverse edges and identity self-loops and freeze the store.

    Every entity gets an identity loop, including entities that only
    appear in valid/test, so any query node can propagate to itself.
    """
    if store.augmented:
        raise DataError("store already augmented")
    if store.n_entities == 0:
        raise DataError("no triples")
    n_rel = store.n_relations_original
    scheme = AugmentedRelationScheme(n_original=n_rel)
    facts = store.graph_facts()

    heads, rels, tails = [], [], []
    for h, r, t in facts:
        heads.append(h)
        rels.append(r)
        tails.append(t)
        heads.append(t)
        rels.append(r + n_rel)
        tails.append(h)
    for e in range(store.n_entities):
        heads.append(e)
        rels.append(scheme.identity_id)
        tails.append(e)

    head = np.asarray(heads, dtype=np.int64)
    rel = np.asarray(rels, dtype=np.int64)
    tail = np.asarray(tails, dtype=np.int64)
    order = np.lexsort((tail, rel, head))
    store.edge_head = head[order]
    store.edge_rel = rel[order]
    store.edge_tail = tail[order]
    counts = np.bincount(store.edge_head, minlength=store.n_entities)
    store.head_ptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)

    # dense pair ids: edges are sorted by (head, rel), so a pair starts
    # wherever head or rel changes
    new_pair = np.ones(len(order), dtype=bool)
    new_pair[1:] = (np.diff(store.edge_head) != 0) | (np.diff(store.edge_rel) != 0)
    store.edge_pair = np.cumsum(new_pair) - 1
    starts = np.flatnonzero(new_pair)
    store.pair_head = store.edge_head[starts].copy()
    store.pair_rel = store.edge_rel[starts].copy()

    known = set()
    for split in SPLITS:
        for h, r, t in store.splits[split]:
            known.add((h, r, t))
            known.add((t, r + n_rel, h))
    store.known_facts = known
    store.scheme = scheme
    return scheme


def kfold_split(
    triples: list[tuple[int, int, int]], k: int, seed: int
) -> list[list[tuple[int, int, int]]]:
    """Partition ``triples`` into k disjoint folds with sizes differing
    by at most one, deterministically for a fixed seed."""
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    if k > len(triples):
        raise DataError(f"k={k} exceeds number of triples ({len(triples)})")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(triples))
    folds: list[list[tuple[int, int, int]]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(triples[idx])
    return folds


def generate_synthetic(
    n_entities: int,
    n_relations: int,
    n_facts: int,
    seed: int,
    split_fractions: tuple[float, float, float] | None = None,
) -> TripleStore:
    """Uniformly sampled distinct facts on a synthetic vocabulary.

    All facts land in the train split unless ``split_fractions``
    (train, valid, test) is given. The returned store is augmented.
    """
    if n_entities < 1 or n_relations < 1:
        raise DataError("need at least one entity and one relation")
    capacity = n_entities * n_entities * n_relations
    if n_facts > capacity:
        raise DataError(
            f"cannot place {n_facts} distinct facts in a "
            f"{n_entities}x{n_relations}x{n_entities} graph (max {capacity})"
        )
    rng = np.random.default_rng(seed)
    chosen = set()
    while len(chosen) < n_facts:
        need = n_facts - len(chosen)
        h = rng.integers(0, n_entities, size=2 * need + 8)
        r = rng.integers(0, n_relations, size=2 * need + 8)
        t = rng.integers(0, n_entities, size=2 * need + 8)
        for trip in zip(h.tolist(), r.tolist(), t.tolist()):
            if trip not in chosen:
                chosen.add(trip)
                if len(chosen) == n_facts:
                    break
    facts = sorted(chosen)
    order = rng.permutation(n_facts)

    store = TripleStore()
    for e in range(n_entities):
        store.entities.get_or_add(f"e{e}")
    for r in range(n_relations):
        store.relations.get_or_add(f"r{r}")
    if split_fractions is None:
        bounds = (n_facts, n_facts)
    else:
        tr, va, te = split_fractions
        total = tr + va + te
        n_tr = int(round(n_facts * tr / total))
        n_va = int(round(n_facts * va / total))
        bounds = (n_tr, min(n_facts, n_tr + n_va))
    for pos, idx in enumerate(order):
        h, r, t = facts[idx]
        split = "train" if pos < bounds[0] else ("valid" if pos < bounds[1] else "test")
        store.add_triple(f"e{h}", f"r{r}", f"e{t}", split)
    augment(store)
    return store


def write_split_files(store: TripleStore, out_dir: str) -> None:
    """Write the store's splits back out as tab-separated files."""
    os.makedirs(out_dir, exist_ok=True)
    for split in SPLITS:
        triples = store.splits[split]
        if split == "background" and not triples:
            continue
        with open(os.path.join(out_dir, f"{split}.txt"), "w", encoding="utf-8") as fh:
            for h, r, t in triples:
                fh.write(
                    f"{store.entities.label_of(h)}\t"
                    f"{store.relations.label_of(r)}\t"
                    f"{store.entities.label_of(t)}\n"
                )
