"""Personalized adapter: Global MLP, Aging MLP and one Style MLP per latent row."""

from __future__ import annotations

from typing import Optional, Tuple

import torch
from torch import nn

from .backends import BackendBundle
from .config import AdapterConfig
from .latent import N_STYLES, STYLE_DIM, check_latent, latent_add, normalize_age


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class AdapterNetwork(nn.Module):
    """Maps a global latent code and a target age to an additive latent offset.

    The global MLP compresses each of the 18 rows to ``global_dim`` features; the
    flattened 18 x ``global_dim`` vector is projected to ``global_out`` so every
    style MLP sees a fixed-size summary of the whole code. Style MLP output layers
    start at zero, so a fresh network returns a zero offset.
    """

    def __init__(self, config: Optional[AdapterConfig] = None):
        super().__init__()
        self.config = config or AdapterConfig()
        c = self.config
        self.global_mlp = _mlp(STYLE_DIM, c.global_hidden, c.global_dim)
        self.global_projection = nn.Linear(N_STYLES * c.global_dim, c.global_out)
        self.aging_mlp = _mlp(1, c.aging_hidden, c.age_features)
        style_in = STYLE_DIM + c.global_out + c.age_features
        self.style_mlps = nn.ModuleList(_mlp(style_in, c.style_hidden, STYLE_DIM) for _ in range(N_STYLES))
        for mlp in self.style_mlps:
            nn.init.zeros_(mlp[-1].weight)
            nn.init.zeros_(mlp[-1].bias)

    def parameter_groups(self) -> dict:
        return {
            "global_mlp": list(self.global_mlp.parameters()),
            "global_projection": list(self.global_projection.parameters()),
            "aging_mlp": list(self.aging_mlp.parameters()),
            "style_hidden": [p for mlp in self.style_mlps for p in mlp[0].parameters()],
            "style_output": [p for mlp in self.style_mlps for p in mlp[-1].parameters()],
        }

    def forward(self, code: torch.Tensor, age01: torch.Tensor) -> torch.Tensor:
        """``code`` is (..., 18, 512); ``age01`` is (...,) with ages divided by 100."""
        batch_shape = code.shape[:-2]
        w_global = self.global_projection(self.global_mlp(code).flatten(-2))
        age_feat = self.aging_mlp(age01.reshape(*batch_shape, 1))
        context = torch.cat([w_global, age_feat], dim=-1)
        rows = [
            mlp(torch.cat([code[..., i, :], context], dim=-1))
            for i, mlp in enumerate(self.style_mlps)
        ]
        return torch.stack(rows, dim=-2)


def build_adapter(config: Optional[AdapterConfig] = None, seed: int = 0, dtype: torch.dtype = torch.float32) -> AdapterNetwork:
    """Construct an adapter with seed-determined initial weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = AdapterNetwork(config)
    return net.to(dtype)


def adapter_forward(net: AdapterNetwork, code: torch.Tensor, target_age: float) -> torch.Tensor:
    check_latent(code, "code")
    age01 = torch.tensor(normalize_age(target_age), dtype=code.dtype)
    return net(code, age01)


def personalized_reage(
    bundle: BackendBundle,
    net: Optional[AdapterNetwork],
    image: torch.Tensor,
    target_age: float,
    use_adapter: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return the re-aged image and the combined latent that was decoded.

    With ``use_adapter=False`` (or no network) the global code is decoded as is.
    """
    code = bundle.encode(image, target_age)
    if net is None or not use_adapter:
        return bundle.decode(code), code
    combined = latent_add(code, adapter_forward(net, code, target_age))
    return bundle.decode(combined), combined
