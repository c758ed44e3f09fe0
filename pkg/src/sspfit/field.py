"""Neural signed distance field with progressive positional encoding."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import NonFiniteParameters, ParseError

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"SSPF"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    dim: int = 3
    hidden_layers: int = 8
    hidden_width: int = 512
    skip_at: Optional[int] = 4
    beta: float = 100.0
    pe_bands: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.hidden_layers < 2:
            raise ValueError("hidden_layers must be >= 2")
        if self.skip_at is not None and not 0 < self.skip_at < self.hidden_layers:
            raise ValueError("skip_at must lie strictly inside the hidden stack")
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")

    @property
    def input_dim(self) -> int:
        return self.dim + 2 * self.dim * self.pe_bands

    @classmethod
    def full(cls, dim=3, seed=0):
        return cls(dim=dim, hidden_layers=8, hidden_width=512, skip_at=4, seed=seed)

    @classmethod
    def test(cls, dim=3, seed=0):
        return cls(dim=dim, hidden_layers=4, hidden_width=64, skip_at=2, seed=seed)


def pe_mask(n: float, L0: int = 3, L: int = 6, k: float = 1000.0) -> np.ndarray:
    """Band mask at iteration n: band i is off while i > L0 + n / k."""
    i = np.arange(L)
    return (i <= L0 + n / k).astype(np.float64)


@dataclass
class PeState:
    bands: int = 6
    initial: int = 3
    growth: float = 1000.0
    iteration: int = 0
    enabled: bool = True

    @property
    def mask(self) -> np.ndarray:
        if not self.enabled:
            return np.zeros(self.bands)
        return pe_mask(self.iteration, self.initial, self.bands, self.growth)

    def mask_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.mask, dtype=DTYPE)


def encode(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked sin/cos features, band-major: [sin(2^0 pi x), cos(2^0 pi x), ...]."""
    L = mask.shape[0]
    freqs = (2.0 ** torch.arange(L, dtype=x.dtype)) * math.pi
    arg = x[..., None, :] * freqs[:, None]  # (..., L, d)
    m = mask.to(x.dtype)[:, None]
    feats = torch.stack([m * torch.sin(arg), m * torch.cos(arg)], dim=-2)  # (..., L, 2, d)
    return feats.reshape(*x.shape[:-1], 2 * L * x.shape[-1])


def positional_encoding(p, mask) -> np.ndarray:
    x = torch.as_tensor(np.asarray(p, dtype=np.float64))
    return encode(x, torch.as_tensor(np.asarray(mask, dtype=np.float64))).numpy()


class NeuralField(nn.Module):
    """Softplus MLP over ``[x, encode(x)]`` with one skip re-concatenation."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        d_in = config.input_dim
        dims = [d_in] + [config.hidden_width] * config.hidden_layers + [1]
        layers = []
        for l in range(len(dims) - 1):
            out_dim = dims[l + 1]
            if config.skip_at is not None and l + 1 == config.skip_at:
                out_dim -= d_in
            layers.append(nn.Linear(dims[l], out_dim, dtype=DTYPE))
        self.layers = nn.ModuleList(layers)
        self.activation = nn.Softplus(beta=config.beta)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        inp = torch.cat([x, encode(x, mask)], dim=-1)
        h = inp
        last = len(self.layers) - 1
        for l, layer in enumerate(self.layers):
            if l == self.config.skip_at:
                h = torch.cat([h, inp], dim=-1) / math.sqrt(2.0)
            h = layer(h)
            if l < last:
                h = self.activation(h)
        return h[..., 0]

    def value_and_grad(self, x: torch.Tensor, mask: torch.Tensor, create_graph: bool = True):
        """Field values and input gradients; keeps the graph for second-order use."""
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        f = self(x, mask)
        (g,) = torch.autograd.grad(f.sum(), x, create_graph=create_graph)
        return f, g

    def check_finite(self):
        for p in self.parameters():
            if not torch.isfinite(p).all():
                raise NonFiniteParameters("field has non-finite parameters")

    # flat parameter access, layer order, weight row-major then bias
    def flat_parameters(self) -> np.ndarray:
        chunks = []
        for layer in self.layers:
            chunks += [layer.weight.detach().numpy().ravel(), layer.bias.detach().numpy()]
        return np.concatenate(chunks)

    def load_flat_parameters(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        with torch.no_grad():
            for layer in self.layers:
                for p in (layer.weight, layer.bias):
                    n = p.numel()
                    if pos + n > len(flat):
                        raise ParseError("parameter payload too short")
                    p.copy_(torch.from_numpy(flat[pos:pos + n].reshape(p.shape).copy()))
                    pos += n
        if pos != len(flat):
            raise ParseError("parameter payload too long")


def init_geometric(config: NetworkConfig, radius: float = 0.9) -> NeuralField:
    """Sphere-like initialization so that ``f(x) ~ |x| - radius``.

    Positional-encoding input columns start at zero, both in the first layer
    and in the skip layer, so the initial field depends on raw coordinates
    only.
    """
    net = NeuralField(config)
    gen = torch.Generator().manual_seed(int(config.seed))
    d, d_in = config.dim, config.input_dim
    last = len(net.layers) - 1
    with torch.no_grad():
        for l, layer in enumerate(net.layers):
            out_dim, in_dim = layer.weight.shape
            if l == last:
                w = torch.normal(math.sqrt(math.pi) / math.sqrt(in_dim), 1e-4,
                                 layer.weight.shape, generator=gen, dtype=DTYPE)
                layer.weight.copy_(w)
                layer.bias.fill_(-radius)
                continue
            w = torch.normal(0.0, math.sqrt(2.0) / math.sqrt(out_dim),
                             layer.weight.shape, generator=gen, dtype=DTYPE)
            if l == 0:
                w[:, d:] = 0.0
            elif l == config.skip_at:
                w[:, -(d_in - d):] = 0.0
            layer.weight.copy_(w)
            layer.bias.zero_()
        _refit_head(net, radius, gen)
    return net


def _refit_head(net: NeuralField, radius: float, gen: torch.Generator, probes: int = 4096):
    # narrow nets stray far from the sphere under the random recipe alone;
    # a ridge fit of the output layer pins f to |x| - radius on [-1, 1]^d
    d = net.config.dim
    x = torch.rand((probes, d), generator=gen, dtype=DTYPE) * 2.0 - 1.0
    target = torch.linalg.norm(x, dim=-1) - radius
    head = net.layers[-1]
    feats = []
    hook = head.register_forward_hook(lambda m, inp, out: feats.append(inp[0]))
    try:
        net(x, torch.zeros(net.config.pe_bands, dtype=DTYPE))
    finally:
        hook.remove()
    h = torch.cat([feats[0], torch.ones((probes, 1), dtype=DTYPE)], dim=1)
    reg = 1e-8 * torch.eye(h.shape[1], dtype=DTYPE)
    sol = torch.linalg.solve(h.T @ h + reg, h.T @ target)
    head.weight.copy_(sol[:-1][None, :])
    head.bias.fill_(float(sol[-1]))


def _as_points(field: NeuralField, q):
    x = torch.as_tensor(np.asarray(q, dtype=np.float64))
    single = x.ndim == 1
    if x.shape[-1] != field.config.dim:
        raise ValueError(f"expected {field.config.dim}-d points, got shape {tuple(x.shape)}")
    return x.reshape(-1, field.config.dim), single


def evaluate(field: NeuralField, q, pe: PeState, chunk: int = 65536):
    """f(q) for one point (returns float) or a batch (returns array)."""
    field.check_finite()
    x, single = _as_points(field, q)
    mask = pe.mask_tensor()
    out = []
    with torch.no_grad():
        for s in range(0, len(x), chunk):
            out.append(field(x[s:s + chunk], mask))
    vals = torch.cat(out).numpy() if out else np.zeros(0)
    return float(vals[0]) if single else vals


def input_gradient(field: NeuralField, q, pe: PeState, chunk: int = 65536):
    """Exact gradient of f with respect to the query coordinates."""
    field.check_finite()
    x, single = _as_points(field, q)
    mask = pe.mask_tensor()
    out = []
    for s in range(0, len(x), chunk):
        _, g = field.value_and_grad(x[s:s + chunk], mask, create_graph=False)
        out.append(g.detach())
    grads = torch.cat(out).numpy() if out else np.zeros((0, field.config.dim))
    return grads[0] if single else grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, field: NeuralField, pe: PeState, extra: Optional[dict] = None):
    header = {
        "network": asdict(field.config),
        "pe": asdict(pe),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    params = field.flat_parameters().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(params)))
        fh.write(params.tobytes())


def load_checkpoint(path):
    """Returns ``(field, pe_state, extra)``."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not an SSPF checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    params = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
    field = NeuralField(NetworkConfig(**header["network"]))
    field.load_flat_parameters(params)
    return field, PeState(**header["pe"]), header.get("extra", {})
