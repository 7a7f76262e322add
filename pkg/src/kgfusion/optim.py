"""Gradient plumbing: parameter registry, Adam and a finite-difference
gradient verifier.

Reverse-mode gradients come from the recorded evaluation graph of the
forward pass; the verifier replays the same seeded forward under central
differences, so the two routes stay independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import TrainConfig
from .errors import NumericalError
from .model import Model
from .store import TripleStore, generate_synthetic


class ParameterRegistry:
    """Named parameter groups with one gradient slot per value."""

    def __init__(self, groups: dict[str, dict[str, torch.Tensor]]):
        self.groups = groups

    def named(self) -> dict[str, torch.Tensor]:
        return {
            f"{group}.{name}": t
            for group, tensors in self.groups.items()
            for name, t in tensors.items()
        }

    def zero_grad(self) -> None:
        for t in self.named().values():
            if t.grad is not None:
                t.grad.detach_()
                t.grad.zero_()

    def gradients(self) -> dict[str, torch.Tensor | None]:
        return {name: t.grad for name, t in self.named().items()}


def backward(loss: torch.Tensor, registry: ParameterRegistry) -> dict[str, torch.Tensor]:
    """Populate gradient slots from a recorded forward evaluation."""
    if loss.grad_fn is None:
        raise NumericalError("backward: loss has no recorded evaluation graph")
    loss.backward()
    grads = {}
    for name, t in registry.named().items():
        grads[name] = (
            torch.zeros_like(t) if t.grad is None else t.grad.detach().clone()
        )
    return grads


@dataclass
class AdamState:
    """Standard Adam with bias correction."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(registry: ParameterRegistry, state: AdamState) -> None:
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, param in registry.named().items():
            grad = param.grad
            if grad is None:
                continue
            if name not in state.m:
                state.m[name] = torch.zeros_like(param)
                state.v[name] = torch.zeros_like(param)
            m = state.m[name]
            v = state.v[name]
            m.mul_(state.beta1).add_(grad, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(grad, grad, value=1.0 - state.beta2)
            m_hat = m / bc1
            v_hat = v / bc2
            param.addcdiv_(m_hat, v_hat.sqrt().add_(state.eps), value=-state.lr)


# -- finite-difference verification ---------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_err: dict[str, float]
    grad_scale: dict[str, float]

    @property
    def failed_groups(self) -> list[str]:
        return sorted(g for g, e in self.max_rel_err.items() if not e < self.tolerance)

    @property
    def passed(self) -> bool:
        return not self.failed_groups


def default_check_config(seed: int = 7) -> TrainConfig:
    return TrainConfig(
        embed_dim=4,
        n_layers=2,
        select_k=4,
        batch_size=5,
        seed=seed,
        dtype="float64",
        temperature=1.0,
    )


def default_check_store(seed: int = 11) -> TripleStore:
    return generate_synthetic(10, 3, 25, seed=seed)


def grad_check(
    store: TripleStore | None = None,
    config: TrainConfig | None = None,
    tolerance: float = 1e-4,
    perturbation: float = 1e-5,
    noise_seed: int = 3,
    n_queries: int = 5,
    _corrupt_group: str | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences on a
    seeded tiny instance, in double precision.

    Both passes rebuild the train-mode Gumbel noise from the same seed,
    so the discrete top-K choice is held at the same draw. The relative
    error of a group is its worst component error normalised by the
    larger of the two gradients' magnitudes for that group.
    """
    store = store or default_check_store()
    config = config or default_check_config()
    if config.dtype != "float64":
        raise NumericalError("grad_check requires a float64 configuration")
    model = Model(store, config)
    registry = ParameterRegistry(model.parameter_groups())
    triples = np.asarray(store.splits["train"][:n_queries], dtype=np.int64)

    def forward() -> torch.Tensor:
        gen = torch.Generator().manual_seed(noise_seed)
        return model.loss_on_batch(triples, mode="train", gen=gen)

    registry.zero_grad()
    autograd = backward(forward(), registry)
    if _corrupt_group is not None:
        for name in autograd:
            if name.startswith(_corrupt_group + "."):
                autograd[name] = autograd[name] + 0.5

    max_rel_err: dict[str, float] = {}
    grad_scale: dict[str, float] = {}
    h = perturbation
    for group, tensors in registry.groups.items():
        worst = 0.0
        scale = 0.0
        for name, param in tensors.items():
            ad = autograd[f"{group}.{name}"].reshape(-1)
            flat = param.data.reshape(-1)
            fd = torch.zeros_like(ad)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = forward().item()
                flat[i] = orig - h
                down = forward().item()
                flat[i] = orig
                fd[i] = (up - down) / (2.0 * h)
            scale = max(scale, float(ad.abs().max()), float(fd.abs().max()))
            worst = max(worst, float((ad - fd).abs().max()))
        denom = max(scale, 1e-12)
        max_rel_err[group] = worst / denom
        grad_scale[group] = scale
    report = GradCheckReport(
        tolerance=tolerance, max_rel_err=max_rel_err, grad_scale=grad_scale
    )
    return report
