"""Optimization loop: sampling, losses, ADAM updates and loss tracking."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .errors import NonFiniteGradient, NonFiniteLoss
from .field import NetworkConfig, NeuralField, PeState, evaluate, init_geometric, save_checkpoint
from .losses import LossWeights, compute_losses
from .partition import (
    MAX_RESOLUTION,
    MIN_RESOLUTION,
    VoxelGrid,
    build_voxel_grid,
    grid_resolution,
    partition_space,
)
from .pointcloud import KnnIndex, PointCloud, density_indicator
from .sampler import LossTracker, SampleBatch, SampleBudget, sample_batch

log = logging.getLogger(__name__)

LOG_HEADER = ["iteration", "lr", "l_dist_on", "l_dist_free", "l_grad_on",
              "l_grad_free", "l_eik", "l_signed", "total"]
ABLATIONS = ("signed", "lrs", "pe", "deriv-free")


@dataclass
class TrainConfig:
    iterations: int = 10000
    lr0: float = 0.005
    decay_every: int = 2000
    decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights.clean)
    budget: SampleBudget = field(default_factory=SampleBudget)
    network: NetworkConfig = field(default_factory=NetworkConfig.full)
    pe_bands: int = 6
    pe_initial: int = 3
    pe_growth: float = 1000.0
    init_radius: float = 0.9
    seed: int = 0
    resolution: Optional[int] = None  # None: derived from point density
    min_resolution: int = MIN_RESOLUTION
    max_resolution: int = MAX_RESOLUTION
    adaptive_fraction: float = 0.5
    on_surface_k: int = 8
    checkpoint_every: int = 0
    disable: tuple = ()

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        bad = set(self.disable) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablation switches {sorted(bad)}")
        self.disable = tuple(self.disable)

    @classmethod
    def profile(cls, name: str, dim: int = 3, seed: int = 0, **overrides):
        """``clean``/``noisy`` use the full network and budget; ``test`` is desk scale."""
        if name == "test":
            base = cls(weights=LossWeights.clean(), budget=SampleBudget.scaled(1 / 8),
                       network=NetworkConfig.test(dim, seed), seed=seed)
        elif name in ("clean", "noisy"):
            base = cls(weights=LossWeights.profile(name), network=NetworkConfig.full(dim, seed), seed=seed)
        else:
            raise ValueError(f"unknown profile {name!r}")
        return replace(base, **overrides)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "budget" in d and isinstance(d["budget"], dict):
            d["budget"] = SampleBudget(**d["budget"])
        if "network" in d and isinstance(d["network"], dict):
            d["network"] = NetworkConfig(**d["network"])
        if "disable" in d:
            d["disable"] = tuple(d["disable"])
        return cls(**d)


def learning_rate(iteration: int, lr0: float = 0.005, decay_every: int = 2000, factor: float = 0.5) -> float:
    return lr0 * factor ** (iteration // decay_every)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        zero = [p * 0 for p in params]
        return cls([z.clone() if torch.is_tensor(z) else z.copy() for z in zero],
                   [z.clone() if torch.is_tensor(z) else z.copy() for z in zero], **kw)


def _finite(x) -> bool:
    return bool(torch.isfinite(x).all()) if torch.is_tensor(x) else bool(np.all(np.isfinite(x)))


def adam_step(params, grads, state: AdamState, lr: float):
    """Canonical bias-corrected ADAM; returns new parameters, mutates ``state``.

    Works on lists of numpy arrays or torch tensors.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for g in grads:
        if not _finite(g):
            raise NonFiniteGradient("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - lr * m_hat / (v_hat ** 0.5 + state.eps))
    return out, state


@dataclass
class FitResult:
    field: NeuralField
    pe: PeState
    grid: VoxelGrid
    tracker: LossTracker
    log: List[dict]
    cloud: PointCloud

    @property
    def epsilon(self) -> float:
        return self.grid.epsilon


class Trainer:
    """Holds the state of one fit so that steps can be driven externally."""

    def __init__(self, pc: PointCloud, config: TrainConfig):
        self.config = config
        self.pc = pc
        self.index = KnnIndex(pc)
        self.weights = config.weights
        if pc.normals is None and (self.weights.grad_on > 0 or self.weights.grad_free > 0):
            log.warning("cloud has no normals; derivative losses disabled")
            self.weights = replace(self.weights, grad_on=0.0, grad_free=0.0)
        if "deriv-free" in config.disable:
            self.weights = replace(self.weights, grad_free=0.0)
        self.use_signed = "signed" not in config.disable
        if not self.use_signed:
            self.weights = replace(self.weights, signed=0.0)
        self.adaptive_fraction = 0.0 if "lrs" in config.disable else config.adaptive_fraction

        if config.resolution is None:
            n = grid_resolution(density_indicator(pc, self.index),
                                config.min_resolution, config.max_resolution)
        else:
            n = int(config.resolution)
        self.grid = build_voxel_grid(pc, n)
        if self.use_signed:
            partition_space(self.grid)
        else:
            # without signed supervision the whole box is sign-uncertain
            self.grid.known = np.zeros_like(self.grid.occupancy)
        self.tracker = LossTracker(self.grid)
        log.info("voxel grid %d^%d, %d known / %d uncertain", n, pc.dim,
                 int(self.grid.known.sum()), int(self.grid.uncertain.sum()))

        net_cfg = replace(config.network, dim=pc.dim, pe_bands=config.pe_bands, seed=config.seed)
        torch.manual_seed(config.seed)
        self.field = init_geometric(net_cfg, config.init_radius)
        self.pe = PeState(config.pe_bands, config.pe_initial, config.pe_growth, 0,
                          enabled="pe" not in config.disable)
        self.params = list(self.field.parameters())
        self.adam = AdamState.zeros_like([p.detach() for p in self.params],
                                         beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self.log: List[dict] = []

    @property
    def use_grad(self) -> bool:
        return self.pc.normals is not None

    def sample(self) -> SampleBatch:
        return sample_batch(self.grid, self.tracker, self.index, self.config.budget, self.rng,
                            adaptive_fraction=self.adaptive_fraction, use_signed=self.use_signed,
                            use_grad=self.use_grad, on_k=self.config.on_surface_k)

    def batch_loss(self, batch: SampleBatch):
        return compute_losses(self.field, batch, self.pe.mask_tensor(), self.weights, self.grid.epsilon)

    def step(self, batch: Optional[SampleBatch] = None, track: bool = True) -> dict:
        n = self.iteration
        self.pe.iteration = n
        cfg = self.config
        lr = learning_rate(n, cfg.lr0, cfg.decay_every, cfg.decay_factor)
        if batch is None:
            batch = self.sample()
        try:
            total, breakdown = self.batch_loss(batch)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(str(exc), n) from None
        if not math.isfinite(breakdown.total):
            raise NonFiniteLoss("non-finite loss", n)
        grads = torch.autograd.grad(total, self.params, allow_unused=True) if total.requires_grad else [None] * len(self.params)
        grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(self.params, grads)]
        try:
            new, self.adam = adam_step([p.detach() for p in self.params], grads, self.adam, lr)
        except NonFiniteGradient as exc:
            raise NonFiniteGradient(str(exc), n) from None
        with torch.no_grad():
            for p, q in zip(self.params, new):
                p.copy_(q)
        if track:
            self._track(batch, breakdown.samples)
        row = {"iteration": n, "lr": lr}
        row.update({f"l_{k}": v for k, v in breakdown.terms.items()})
        row["total"] = breakdown.total
        self.log.append(row)
        self.iteration += 1
        return row

    def _track(self, batch: SampleBatch, samples):
        t = self.tracker
        t.update_batch("dist_on", batch.on_voxel, samples["dist_on"])
        if len(samples["grad_on"]):
            t.update_batch("grad_on", batch.on_voxel, samples["grad_on"])
        t.update_batch("dist_free", batch.free_voxel, samples["dist_free"])
        if len(samples["grad_free"]):
            t.update_batch("grad_free", batch.free_voxel, samples["grad_free"])
        if self.use_signed:
            t.update_batch("signed", batch.out_voxel, samples["signed"])

    def checkpoint(self, path, extra=None):
        meta = {"iteration": self.iteration, "resolution": self.grid.resolution}
        meta.update(extra or {})
        save_checkpoint(path, self.field, self.pe, meta)

    def run(self, log_path=None, checkpoint_path=None, extra=None, progress_every: int = 0) -> FitResult:
        cfg = self.config
        writer = fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_HEADER)
            writer.writeheader()
        try:
            while self.iteration < cfg.iterations:
                row = self.step()
                if writer is not None:
                    writer.writerow(row)
                if progress_every and row["iteration"] % progress_every == 0:
                    log.info("iter %d total %.5f", row["iteration"], row["total"])
                if checkpoint_path and cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
                    self.checkpoint(checkpoint_path, extra)
        finally:
            if fh is not None:
                fh.close()
        # extraction uses the final band mask
        self.pe.iteration = self.iteration
        if checkpoint_path:
            self.checkpoint(checkpoint_path, extra)
        return FitResult(self.field, self.pe, self.grid, self.tracker, self.log, self.pc)


def fit(pc: PointCloud, config: TrainConfig, log_path=None, checkpoint_path=None, extra=None) -> FitResult:
    return Trainer(pc, config).run(log_path, checkpoint_path, extra)


def known_voxel_margin(field: NeuralField, grid: VoxelGrid, pe: PeState) -> np.ndarray:
    """f at the center of every sign-known voxel."""
    ids = np.argwhere(grid.known)
    if len(ids) == 0:
        return np.zeros(0)
    return np.atleast_1d(evaluate(field, grid.centers(ids), pe))
