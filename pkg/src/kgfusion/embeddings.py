"""CP factor matrices, the trilinear compatibility score and the cubic
regularizer.

The three factors assign each entity a head-role and a tail-role vector
and each augmented relation one vector. The head factors double as the
initial node states during propagation; the tail factors only ever enter
the trilinear score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class CpEmbeddings:
    head_factors: torch.Tensor  # (n_entities, dim)
    rel_factors: torch.Tensor  # (n_relations_augmented, dim)
    tail_factors: torch.Tensor  # (n_entities, dim)

    @property
    def dim(self) -> int:
        return self.head_factors.shape[1]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {
            "head_factors": self.head_factors,
            "rel_factors": self.rel_factors,
            "tail_factors": self.tail_factors,
        }


def phi(e_h: torch.Tensor, e_r: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
    """Trilinear score sum_d e_h[d] * e_r[d] * e_t[d] (scalar tensor)."""
    if e_h.shape != e_r.shape or e_r.shape != e_t.shape:
        raise ValueError(
            f"phi: shape mismatch {tuple(e_h.shape)}/{tuple(e_r.shape)}/{tuple(e_t.shape)}"
        )
    return (e_h * e_r * e_t).sum()

def phi_all_tails(
    e_h: torch.Tensor, e_r: torch.Tensor, tail_factors: torch.Tensor
) -> torch.Tensor:
    """Trilinear score of (e_h, e_r) against every tail row at once."""
    if e_h.shape != e_r.shape or tail_factors.shape[-1] != e_h.shape[-1]:
        raise ValueError(
            f"phi_all_tails: shape mismatch {tuple(e_h.shape)}/{tuple(e_r.shape)}"
            f"/{tuple(tail_factors.shape)}"
        )
    return tail_factors @ (e_h * e_r)


def n3_penalty(e1: torch.Tensor, e2: torch.Tensor, e3: torch.Tensor) -> torch.Tensor:
    """Sum of cubed absolute values over all three vectors."""
    return (e1.abs() ** 3).sum() + (e2.abs() ** 3).sum() + (e3.abs() ** 3).sum()


def init_embeddings(
    n_entities: int,
    n_relations: int,
    dim: int,
    seed: int,
    scale: float = 0.1,
    dtype: torch.dtype = torch.float32,
    requires_grad: bool = True,
) -> CpEmbeddings:
    """Entries i.i.d. uniform in [-scale, scale], deterministic per seed."""
    if dim < 1:
        raise ValueError(f"embedding dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)

    def draw(rows: int) -> torch.Tensor:
        arr = rng.uniform(-scale, scale, size=(rows, dim))
        t = torch.from_numpy(arr).to(dtype)
        t.requires_grad_(requires_grad)
        return t

    return CpEmbeddings(draw(n_entities), draw(n_relations), draw(n_entities))
