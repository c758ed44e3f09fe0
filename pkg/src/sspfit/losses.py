"""Loss terms for semi-signed fitting and their weighted total.

Every term is reduced as a batch mean. The per-sample values are kept so
the sampler can attribute losses to voxels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import astuple, dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

from .errors import NonFiniteLoss

log = logging.getLogger(__name__)

TERMS = ("dist_on", "dist_free", "grad_on", "grad_free", "eik", "signed")


@dataclass
class LossWeights:
    dist_on: float = 40.0
    dist_free: float = 20.0
    grad_on: float = 1.0
    grad_free: float = 1.0
    eik: float = 1.0
    signed: float = 10.0

    def __post_init__(self):
        for name, w in zip(TERMS, astuple(self)):
            if not (math.isfinite(w) and w >= 0):
                raise ValueError(f"weight {name} must be finite and >= 0, got {w}")

    @classmethod
    def clean(cls):
        return cls(40, 20, 1, 1, 1, 10)

    @classmethod
    def noisy(cls):
        return cls(20, 10, 20, 10, 1, 10)

    @classmethod
    def profile(cls, name: str):
        return {"clean": cls.clean, "noisy": cls.noisy, "test": cls.clean}[name]()

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(TERMS, astuple(self)))


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# per-sample terms (batched over the leading axes)
# ---------------------------------------------------------------------------

def on_surface_distance(f_vals) -> torch.Tensor:
    """Mean |f| over on-surface samples."""
    f = _t(f_vals)
    return f.abs().mean() if f.numel() else f.new_zeros(())


def unoriented_derivative(grad, n) -> torch.Tensor:
    grad, n = _t(grad), _t(n)
    return torch.minimum(torch.linalg.vector_norm(grad - n, dim=-1),
                         torch.linalg.vector_norm(grad + n, dim=-1))


def free_unsigned_distance(f_val, d) -> torch.Tensor:
    f, d = _t(f_val), _t(d)
    return torch.minimum((f - d).abs(), (f + d).abs())


def eikonal(grad) -> torch.Tensor:
    return (torch.linalg.vector_norm(_t(grad), dim=-1) - 1.0) ** 2


def signed_outside(f_val, epsilon: float) -> torch.Tensor:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return torch.clamp(epsilon - _t(f_val), min=0.0)


def total_loss(terms: Dict[str, float], weights: LossWeights):
    """Weighted sum of the six terms; works for floats and tensors alike."""
    w = weights.as_dict()
    total = sum(w[k] * terms[k] for k in TERMS)
    value = float(total.detach()) if isinstance(total, torch.Tensor) else float(total)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"total loss is not finite: {value}")
    return total


# ---------------------------------------------------------------------------
# batch evaluation
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    terms: Dict[str, float]
    total: float
    # per-sample values (detached numpy) keyed by term, for the tracker
    samples: Dict[str, np.ndarray] = field(default_factory=dict)


def _mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean() if x.numel() else x.new_zeros(())


def compute_losses(net, batch, mask: torch.Tensor, weights: LossWeights, epsilon: float):
    """Differentiable total loss for ``batch`` plus a detached breakdown.

    Gradient terms get their input gradients with ``create_graph=True`` so
    the parameter gradient includes the second-order paths.
    """
    d = net.config.dim
    x_on = torch.as_tensor(batch.on_points)
    x_free = torch.as_tensor(batch.free_points)
    x_out = torch.as_tensor(batch.out_points)
    n_on, n_free, n_out = len(x_on), len(x_free), len(x_out)
    x = torch.cat([x_on, x_free, x_out]).reshape(-1, d)
    f, g = net.value_and_grad(x, mask, create_graph=True)
    f_on, f_free, f_out = torch.split(f, [n_on, n_free, n_out])
    g_on, g_free, g_out = torch.split(g, [n_on, n_free, n_out])

    per = {}
    per["dist_on"] = f_on.abs()
    per["dist_free"] = free_unsigned_distance(f_free, torch.as_tensor(batch.free_dist))
    if batch.on_normals is not None and weights.grad_on > 0:
        per["grad_on"] = unoriented_derivative(g_on, torch.as_tensor(batch.on_normals))
    else:
        per["grad_on"] = f_on.new_zeros(0)
    if batch.free_normals is not None and weights.grad_free > 0:
        per["grad_free"] = unoriented_derivative(g_free, torch.as_tensor(batch.free_normals))
    else:
        per["grad_free"] = f_on.new_zeros(0)
    per["eik"] = eikonal(torch.cat([g_free, g_out]))
    per["signed"] = signed_outside(f_out, epsilon)

    means = {k: _mean(v) for k, v in per.items()}
    total = total_loss(means, weights)
    breakdown = LossBreakdown(
        terms={k: float(v.detach()) for k, v in means.items()},
        total=float(total.detach()),
        samples={k: v.detach().numpy() for k, v in per.items()},
    )
    return total, breakdown


def loss_parameter_gradients(net, batch, mask, weights: LossWeights, epsilon: float):
    """Exact gradient of the total loss with respect to every parameter.

    Returns ``(grads, breakdown)`` where ``grads`` is a list of arrays in
    ``net.parameters()`` order.
    """
    params = list(net.parameters())
    total, breakdown = compute_losses(net, batch, mask, weights, epsilon)
    if not total.requires_grad:
        return [np.zeros(p.shape) for p in params], breakdown
    grads = torch.autograd.grad(total, params, allow_unused=True)
    out = [np.zeros(p.shape) if g is None else g.detach().numpy().copy() for p, g in zip(params, grads)]
    return out, breakdown
