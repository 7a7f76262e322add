"""Hybrid scoring and the training loss.

The final score of a candidate is a convex blend of a structural readout
(a linear functional of the candidate's propagated state) and the
trilinear semantic score evaluated with the refined query relation.
Training minimises a multi-class log-loss over all entities plus a cubic
penalty on the positive triple's embeddings.
"""

from __future__ import annotations

import torch

from .embeddings import CpEmbeddings


def structural_score(h_state: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Readout w . h; entities that never held a state score zero."""
    if h_state.shape[-1] != w.shape[0]:
        raise ValueError(
            f"structural_score: shape mismatch {tuple(h_state.shape)} vs {tuple(w.shape)}"
        )
    return h_state @ w


def semantic_score(
    q_e: int, refined_rel: torch.Tensor, q_a: int, emb: CpEmbeddings
) -> torch.Tensor:
    """Trilinear score of (q_e, refined relation, q_a)."""
    if not 0 <= q_e < emb.head_factors.shape[0]:
        raise ValueError(f"entity id {q_e} out of range")
    if not 0 <= q_a < emb.tail_factors.shape[0]:
        raise ValueError(f"entity id {q_a} out of range")
    return (emb.head_factors[q_e] * refined_rel * emb.tail_factors[q_a]).sum()


def hybrid_score(
    f: torch.Tensor | float, phi: torch.Tensor | float, fusion_weight: float
) -> torch.Tensor | float:
    """fusion_weight * f + (1 - fusion_weight) * phi."""
    if not 0.0 <= fusion_weight <= 1.0:
        raise ValueError(f"fusion weight must lie in [0, 1], got {fusion_weight}")
    return fusion_weight * f + (1.0 - fusion_weight) * phi


def log_loss(target_score: torch.Tensor, all_scores: torch.Tensor) -> torch.Tensor:
    """-target + log sum exp(scores), stabilised by max subtraction."""
    if all_scores.numel() == 0:
        raise ValueError("log_loss: empty candidate vector")
    m = all_scores.max().detach()
    lse = m + torch.log(torch.exp(all_scores - m).sum())
    return lse - target_score


def total_loss(
    log_losses: torch.Tensor, reg_terms: torch.Tensor, reg_weight: float
) -> torch.Tensor:
    """Mean log-loss plus reg_weight times the mean cubic penalty."""
    if reg_weight < 0:
        raise ValueError(f"regularization weight must be >= 0, got {reg_weight}")
    loss = log_losses.mean()
    if reg_weight > 0:
        loss = loss + reg_weight * reg_terms.mean()
    return loss
