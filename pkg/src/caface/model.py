"""The full fusion model: style input maker, cluster network, aggregation network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .aggregate import AggregationNetwork
from .autodiff import Tensor
from .cluster import AssignmentMap, ClusterNetwork, ClusteredIntermediate
from .config import ModelConfig
from .nn import Module
from .records import as_record_set
from .style import StyleInputMaker


@dataclass
class FusionOutput:
    fused: np.ndarray          # (C_f,)
    P: np.ndarray              # (M, C_f)
    A: np.ndarray | None       # (M, N') when a single batch was used
    intermediate: ClusteredIntermediate | None = None


class CAFace(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        super().__init__()
        self.cfg = cfg.validate()
        rng = np.random.default_rng(seed)
        self.sim = self.child("sim", StyleInputMaker(cfg, rng))
        self.cn = self.child("cn", ClusterNetwork(cfg, rng))
        self.agn = self.child("agn", AggregationNetwork(cfg, rng))

    @property
    def centers(self) -> Tensor:
        return self.cn.centers

    @property
    def dtype(self):
        return self.centers.dtype

    def set_norm_stats(self, mu: float, sigma: float) -> None:
        self.sim.buffers["norm_stats"] = np.array([mu, sigma], dtype=np.float64)

    def style_inputs(self, features, style, train: bool = False) -> Tensor:
        return self.sim(features, style, train=train)

    def features(self, features) -> Tensor:
        return ad.as_tensor(np.asarray(features), like=self.centers)

    def cluster_network(self, S, F) -> tuple[ClusteredIntermediate, AssignmentMap]:
        return self.cn(S, F)

    def aggregate(self, S_prime, F_prime) -> tuple[Tensor, Tensor]:
        return self.agn(S_prime, F_prime, self.centers)

    def forward(self, features, style, train: bool = False):
        """Concurrent inference on stacked items; leading batch dims allowed."""
        S = self.style_inputs(features, style, train=train)
        inter, amap = self.cluster_network(S, self.features(features))
        fused, P = self.aggregate(inter.S_prime, inter.F_prime)
        return fused, P, inter, amap

    def fuse(self, batch) -> FusionOutput:
        """Fuse one set in a single concurrent pass."""
        rs = as_record_set(batch)
        with ad.no_grad():
            fused, P, inter, amap = self.forward(rs.features, rs.style)
        return FusionOutput(fused.data, P.data, amap.A.data, inter)

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())

