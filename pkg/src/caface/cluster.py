"""Cluster network: soft assignment of items to learned global centers.

Orientation: the assignment map ``A`` is ``(M, N')`` with centers on rows and
items on columns; each column is a distribution over centers. Every function
here also accepts leading batch dims, e.g. ``A`` of shape ``(B, M, N')``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .nn import MLP, LayerNorm, Linear, Module

MASS_EPS = 1e-8


class SelfAttentionBlock(Module):
    """Pre-norm transformer block without positional encoding."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, ffn_mult: int) -> None:
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = self.child("ln1", LayerNorm(d))
        self.qkv = self.child("qkv", Linear(rng, d, 3 * d))
        self.proj = self.child("proj", Linear(rng, d, d))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.ffn = self.child("ffn", MLP(rng, d, ffn_mult * d))

    def attend(self, x: Tensor) -> Tensor:
        *lead, t, d = x.shape
        h = self.n_heads
        dh = d // h
        qkv = self.qkv(x).reshape(tuple(lead) + (t, 3, h, dh))
        nl = len(lead)
        # -> (3, ..., h, t, dh)
        qkv = ad.permute(qkv, (nl + 1, *range(nl), nl + 2, nl, nl + 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax_rows((q @ k.swap_last()) * (1.0 / math.sqrt(dh)))
        out = att @ v                                       # (..., h, t, dh)
        out = ad.permute(out, (*range(nl), nl + 1, nl, nl + 2)).reshape(tuple(lead) + (t, d))
        return self.proj(out)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attend(self.ln1(x))
        return x + self.ffn(self.ln2(x))


@dataclass
class AssignmentMap:
    A: Tensor          # (..., M, N') column-stochastic
    row_mass: Tensor   # (..., M, 1) sum over items per center

    @property
    def n_items(self) -> int:
        return self.A.shape[-1]


@dataclass
class ClusteredIntermediate:
    F_prime: Tensor    # (..., M, C_f)
    S_prime: Tensor    # (..., M, d)


@dataclass
class UnnormalizedSums:
    """Per-batch linear summaries, the quantities the streaming state merges."""

    AF: Tensor         # (..., M, C_f)  sum_i A_ji f_i
    AS: Tensor         # (..., M, d)
    row_mass: Tensor   # (..., M, 1)


def cluster(amap: AssignmentMap, V: Tensor) -> Tensor:
    """Row-normalized weighted mean of values per center."""
    return (amap.A @ V) / (amap.row_mass + MASS_EPS)


class ClusterNetwork(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        d = cfg.style_dim
        self.cfg = cfg
        self.param("centers", rng.normal(0.0, 1.0 / math.sqrt(d), (cfg.n_centers, d)))
        self.blocks = [
            self.child(f"block{i}", SelfAttentionBlock(rng, d, cfg.n_heads, cfg.ffn_mult))
            for i in range(cfg.n_layers)
        ]
        self.ln_out = self.child("ln_out", LayerNorm(d))
        bound = 1.0 / math.sqrt(d)
        self.param("w_q", rng.uniform(-bound, bound, (d, d)))
        self.param("w_k", rng.uniform(-bound, bound, (d, d)))

    @property
    def centers(self) -> Tensor:
        return self.params["centers"]

    def embed_keys(self, S: Tensor) -> Tensor:
        """Run [S; C] through the key transformer and keep the item rows."""
        *lead, n, d = S.shape
        C = self.centers
        if lead:
            C = ad.broadcast_to(C, tuple(lead) + C.shape)
        x = ad.concat([S, C], axis=-2)
        for block in self.blocks:
            x = block(x)
        x = self.ln_out(x)
        return x[(Ellipsis, slice(0, n), slice(None))]

    def assignment_map(self, K_emb: Tensor) -> AssignmentMap:
        return assignment_map(K_emb, self.centers, self.params["w_q"], self.params["w_k"])

    def sums(self, S: Tensor, F: Tensor) -> tuple[UnnormalizedSums, AssignmentMap]:
        """Unnormalized per-center sums for one batch, plus its assignment."""
        S = ad.as_tensor(S, like=self.centers)
        F = ad.as_tensor(F, like=self.centers)
        amap = self.assignment_map(self.embed_keys(S))
        return UnnormalizedSums(amap.A @ F, amap.A @ S, amap.row_mass), amap

    def __call__(self, S: Tensor, F: Tensor) -> tuple[ClusteredIntermediate, AssignmentMap]:
        """One assignment from the style keys, applied to both F and S."""
        S = ad.as_tensor(S, like=self.centers)
        F = ad.as_tensor(F, like=self.centers)
        if S.shape[:-1] != F.shape[:-1]:
            raise ValueError("S and F must describe the same items")
        amap = self.assignment_map(self.embed_keys(S))
        return ClusteredIntermediate(cluster(amap, F), cluster(amap, S)), amap


def assignment_map(K_emb: Tensor, centers: Tensor, w_q: Tensor, w_k: Tensor) -> AssignmentMap:
    d = centers.shape[-1]
    logits = (centers @ w_q) @ (K_emb @ w_k).swap_last() * (1.0 / math.sqrt(d))
    A = ad.softmax_cols(logits)
    return AssignmentMap(A, A.sum(axis=-1, keepdims=True))
