"""The CRM network: backbone, initial stage, refinement stages, aggregation head.

Parameters live in a flat ``dict`` of named tensors. Layer names follow
``<block>.<layer>.w`` / ``<block>.<layer>.b`` with blocks ``backbone``,
``phi``, ``psi2`` .. ``psiT`` and ``zeta``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from crm import tensor as tt
from crm.tensor import Tensor

MODES = ("full", "feature-only", "map-only")


@dataclass
class CrmConfig:
    in_channels: int = 3
    grid: tuple[int, int] = (24, 40)
    n_individual: int = 4
    n_group: int = 4
    stages: int = 4
    feature_dim: int = 32
    backbone_widths: tuple[int, ...] = (16, 32, 32)
    phi_widths: tuple[int, ...] = (64, 64, 64, 128)
    psi_widths: tuple[int, ...] = (64, 64, 64, 128)
    zeta_widths: tuple[int, ...] = (64, 64, 64)
    mode: str = "full"
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.backbone_widths = tuple(self.backbone_widths)
        self.phi_widths = tuple(self.phi_widths)
        self.psi_widths = tuple(self.psi_widths)
        self.zeta_widths = tuple(self.zeta_widths)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.n_group < 1 or self.n_individual < 0:
            raise ValueError("need n_group >= 1 and n_individual >= 0")
        if len(self.phi_widths) != 4 or len(self.psi_widths) != 4 or len(self.zeta_widths) != 3:
            raise ValueError("phi/psi take 4 hidden widths, zeta takes 3")
        if len(self.backbone_widths) != 3:
            raise ValueError("backbone takes 3 hidden widths")

    @property
    def n_maps(self) -> int:
        return self.n_individual + self.n_group

    @property
    def uses_maps(self) -> bool:
        return self.mode != "feature-only"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CrmConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def layer_specs(cfg: CrmConfig) -> list[tuple[str, int, int, int]]:
    """``(name, kernel, cin, cout)`` for every conv layer, in creation order."""
    specs = []
    cin = cfg.in_channels
    for i, w in enumerate(cfg.backbone_widths + (cfg.feature_dim,)):
        specs.append((f"backbone.{i}", 3, cin, w))
        cin = w
    D, N = cfg.feature_dim, cfg.n_maps
    if cfg.uses_maps:
        kernels = (3, 3, 3, 1, 1)
        cin = D
        for i, (k, w) in enumerate(zip(kernels, cfg.phi_widths + (N,))):
            specs.append((f"phi.{i}", k, cin, w))
            cin = w
        for t in range(2, cfg.stages + 1):
            cin = D + N
            for i, (k, w) in enumerate(zip((7, 7, 7, 1, 1), cfg.psi_widths + (N,))):
                specs.append((f"psi{t}.{i}", k, cin, w))
                cin = w
    zin = {"full": D + N, "feature-only": D, "map-only": N}[cfg.mode]
    for i, (k, w) in enumerate(zip((7, 7, 7, 1), cfg.zeta_widths + (cfg.n_group,))):
        specs.append((f"zeta.{i}", k, zin, w))
        zin = w
    return specs


def init_params(cfg: CrmConfig) -> dict[str, Tensor]:
    """He-normal kernels (std = sqrt(2 / fan_in)), zero biases, seeded."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Tensor] = {}
    for name, k, cin, cout in layer_specs(cfg):
        std = np.sqrt(2.0 / (k * k * cin))
        params[f"{name}.w"] = Tensor(rng.normal(0.0, std, (k, k, cin, cout)), requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")
    return params


def layer_groups(params: dict[str, Tensor]) -> dict[str, list[str]]:
    """Parameter names grouped by block (``backbone``, ``phi``, ``psi2`` ...)."""
    groups: dict[str, list[str]] = {}
    for name in params:
        groups.setdefault(name.split(".")[0], []).append(name)
    return groups


def _conv(x: Tensor, params, name: str, act: bool = True) -> Tensor:
    y = tt.conv2d(x, params[f"{name}.w"], params[f"{name}.b"])
    return tt.relu(y) if act else y


def backbone_forward(clip, params, cfg: CrmConfig) -> Tensor:
    """``B x K x H x W x C`` frames (or ``K x H x W x C``) to ``B x H' x W' x D``.

    Each frame passes through four conv(3) blocks with 2x2 pooling after the
    first three, is resized to the grid, then frames are averaged.
    """
    x = clip if isinstance(clip, Tensor) else Tensor(clip)
    single = x.data.ndim == 4
    if single:
        x = tt.reshape(x, (1,) + x.shape)
    B, K, H, W, C = x.shape
    h = tt.reshape(x, (B * K, H, W, C))
    for i in range(4):
        h = _conv(h, params, f"backbone.{i}")
        if i < 3:
            h = tt.maxpool2(h)
    h = tt.resize_bilinear(h, cfg.grid)
    h = tt.reshape(h, (B, K) + h.shape[1:])
    F = tt.mean(h, axis=1)
    return tt.reshape(F, F.shape[1:]) if single else F


def _stage(x: Tensor, params, prefix: str) -> Tensor:
    for i in range(4):
        x = _conv(x, params, f"{prefix}.{i}")
    return _conv(x, params, f"{prefix}.4", act=False)


def phi_forward(F: Tensor, params) -> Tensor:
    return _stage(F, params, "phi")


def psi_forward(F: Tensor, prev: Tensor, params, t: int) -> Tensor:
    return _stage(tt.concat_channels(F, prev), params, f"psi{t}")


def zeta_logits(x: Tensor, params) -> Tensor:
    for i in range(3):
        x = tt.maxpool2(_conv(x, params, f"zeta.{i}"))
    x = _conv(x, params, "zeta.3", act=False)
    return tt.global_avg_pool(x)


def zeta_forward(x: Tensor, params) -> Tensor:
    return tt.softmax(zeta_logits(x, params))


@dataclass
class CrmOutput:
    stage_maps: list[Tensor] = field(default_factory=list)
    probs: Tensor | None = None
    features: Tensor | None = None


def crm_forward(clip, params, cfg: CrmConfig) -> CrmOutput:
    F = backbone_forward(clip, params, cfg)
    maps: list[Tensor] = []
    if cfg.uses_maps:
        maps.append(phi_forward(F, params))
        for t in range(2, cfg.stages + 1):
            maps.append(psi_forward(F, maps[-1], params, t))
    if cfg.mode == "full":
        zin = tt.concat_channels(F, maps[-1])
    elif cfg.mode == "map-only":
        zin = maps[-1]
    else:
        zin = F
    return CrmOutput(stage_maps=maps, probs=zeta_forward(zin, params), features=F)


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
