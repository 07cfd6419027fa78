"""Aggregation network: mixer-predicted per-channel weights over the M clusters."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError, ModelConfig
from .nn import MLP, LayerNorm, Linear, Module


class MixerBlock(Module):
    def __init__(self, rng: np.random.Generator, n_tokens: int, d: int, token_hidden: int, channel_hidden: int) -> None:
        super().__init__()
        self.ln_token = self.child("ln_token", LayerNorm(d))
        self.token_mlp = self.child("token_mlp", MLP(rng, n_tokens, token_hidden))
        self.ln_channel = self.child("ln_channel", LayerNorm(d))
        self.channel_mlp = self.child("channel_mlp", MLP(rng, d, channel_hidden))

    def __call__(self, x: Tensor) -> Tensor:
        # x: (..., M, d)
        x = x + self.token_mlp(self.ln_token(x).swap_last()).swap_last()
        return x + self.channel_mlp(self.ln_channel(x))


class AggregationNetwork(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.cfg = cfg
        d_tok = cfg.style_dim * 2   # [S'_j, C_j]
        self.blocks = [
            self.child(f"block{i}", MixerBlock(rng, cfg.n_centers, d_tok, cfg.token_hidden, cfg.channel_hidden))
            for i in range(cfg.mixer_depth)
        ]
        self.ln_out = self.child("ln_out", LayerNorm(d_tok))
        # zero head: training starts from uniform weights over clusters
        self.head = self.child("head", Linear(rng, d_tok, cfg.feat_dim, zero=True))

    def cluster_weights(self, S_prime: Tensor, centers: Tensor) -> Tensor:
        """P: softmax over clusters of the mixer logits, separately per channel."""
        cfg = self.cfg
        S_prime = ad.as_tensor(S_prime, like=centers)
        if S_prime.shape[-2:] != (cfg.n_centers, cfg.style_dim):
            raise ConfigError(f"S' shape {S_prime.shape} does not match model")
        lead = S_prime.shape[:-2]
        C = ad.broadcast_to(centers, lead + centers.shape) if lead else centers
        x = ad.concat([S_prime, C], axis=-1)
        for block in self.blocks:
            x = block(x)
        logits = self.head(self.ln_out(x))
        return ad.softmax_cols(logits)

    def __call__(self, S_prime: Tensor, F_prime: Tensor, centers: Tensor) -> tuple[Tensor, Tensor]:
        P = self.cluster_weights(S_prime, centers)
        return fuse(P, ad.as_tensor(F_prime, like=centers)), P


def fuse(P: Tensor, F_prime: Tensor) -> Tensor:
    """f_c = sum_j P_jc F'_jc."""
    return (P * F_prime).sum(axis=-2)
