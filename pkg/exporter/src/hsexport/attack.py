"""Projected gradient descent on an image-to-image model.

Sign-of-gradient ascent on the squared output error against a reference
(the clean output by default, or the true target), projected back onto the
epsilon-ball after every step so the constraint holds throughout, not only
at return.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ExporterError

#: Budgets used in randomized evaluation sweeps.
STANDARD_EPSILONS = (1 / 255, 4 / 255, 8 / 255)

#: Default step counts; the larger one is for models that barely move under
#: small perturbations.
DEFAULT_STEPS = 10
RESILIENT_STEPS = 50


@dataclass
class AttackSpec:
    epsilon: float
    norm: float = math.inf
    steps: int = DEFAULT_STEPS
    alpha: float | None = None
    target: str = "clean"  # "clean": attack vs. G(s); "true": vs. given target
    seed: int = 0  # seeds the random start inside the ball

    def __post_init__(self):
        if self.epsilon < 0:
            raise ExporterError("epsilon must be non-negative")
        if self.norm not in (2, math.inf):
            raise ExporterError("norm must be 2 or inf")
        if self.steps < 1:
            raise ExporterError("steps must be positive")
        if self.target not in ("clean", "true"):
            raise ExporterError("target must be 'clean' or 'true'")
        if self.alpha is None:
            self.alpha = 1 / 255 if self.norm == math.inf else 0.2


def _f32_floor(x: float) -> float:
    """Largest float32 value not exceeding `x` (as a double)."""
    v = np.float32(x)
    if float(v) > x:
        v = np.nextafter(v, np.float32(0.0))
    return float(v)


def _project(images: torch.Tensor, delta: torch.Tensor,
             spec: AttackSpec) -> torch.Tensor:
    """Project `delta` onto the ball and snap it to the realized difference
    (images + delta) - images, shrinking until that difference also
    satisfies the bound: addition rounds, so the clamped value alone is not
    enough for an exact constraint on the returned tensor."""
    if spec.norm == math.inf:
        bound = _f32_floor(spec.epsilon)
        add = delta.clamp(-bound, bound)
        while True:
            realized = (images + add) - images
            over = realized.abs() > bound
            if not bool(over.any()):
                return realized
            shrunk = np.nextafter(add.numpy(), np.float32(0.0))
            add = torch.where(over, torch.from_numpy(shrunk), add)
    flat = delta.reshape(delta.shape[0], -1)
    norms = flat.norm(dim=1, keepdim=True).clamp_min(1e-12)
    scale = (spec.epsilon / norms).clamp(max=1.0)
    return (flat * scale).reshape(delta.shape)


def pgd_attack(model, images: torch.Tensor, spec: AttackSpec,
               target: torch.Tensor | None = None, on_step=None):
    """Return an adversarial version of `images` under `spec`.

    `target` supplies the true-target reference when spec.target == "true".
    `on_step`, if given, is called with the perturbed batch after each
    projected step (useful for auditing the constraint).
    """
    images = images.detach()
    if spec.epsilon == 0.0:
        return images.clone()
    with torch.no_grad():
        clean = model(images).detach()
    if spec.target == "true":
        if target is None:
            raise ExporterError("spec targets the true image but none given")
        reference = target.detach()
    else:
        reference = clean

    # Seeded random start inside the ball: starting exactly at the clean
    # input with the clean-output reference gives zero loss and a zero
    # gradient, so the ascent would never move.
    gen = torch.Generator().manual_seed(spec.seed)
    init = (torch.rand(images.shape, generator=gen, dtype=images.dtype)
            * 2.0 - 1.0)
    if spec.norm == math.inf:
        delta = _project(images, init * spec.epsilon, spec)
    else:
        delta = _project(images, init, spec)
    for _ in range(spec.steps):
        adv = (images + delta).requires_grad_(True)
        out = model(adv)
        if not out.requires_grad:
            raise ExporterError("model output is not differentiable")
        loss = ((out - reference) ** 2).sum()
        loss.backward()
        grad = adv.grad
        if grad is None:
            raise ExporterError("model produced no input gradient")
        with torch.no_grad():
            if spec.norm == math.inf:
                step = spec.alpha * grad.sign()
            else:
                flat = grad.reshape(grad.shape[0], -1)
                norms = flat.norm(dim=1).clamp_min(1e-12)
                step = spec.alpha * grad / norms.reshape(-1, *([1] * (grad.ndim - 1)))
            delta = _project(images, delta + step, spec)
        if on_step is not None:
            on_step((images + delta).detach())
    return (images + delta).detach()
