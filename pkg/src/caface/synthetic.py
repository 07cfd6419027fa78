"""Synthetic stand-in for a frozen face backbone.

Each subject has a unit identity center. An item of quality q points along
``normalize(q * center + (1 - q) * noise)`` where the noise leans towards a
nuisance direction shared by every subject, so low-quality items do
not simply average away. Feature norm grows with quality, and the style
statistics are a smooth function of quality plus noise.

The *world* (nuisance directions, style basis) is fixed by ``world_seed`` so
that training corpora and evaluation protocols drawn with different seeds
share the same quality-to-style mapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .records import RecordSet

NORM_BASE = 8.0
NORM_SLOPE = 8.0
LOW_QUALITY = (0.01, 0.1)
HIGH_QUALITY = (0.15, 0.5)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class SyntheticWorld:
    feat_dim: int
    style_channels: int
    n_taps: int
    nuisance: np.ndarray      # (n_nuisance, C_f) unit rows
    style_hi: np.ndarray      # (n_taps, 2, C_M) stats at quality 1
    style_lo: np.ndarray      # (n_taps, 2, C_M) stats at quality 0
    nuisance_weight: float = 0.95

    @classmethod
    def create(cls, feat_dim: int, style_channels: int, n_taps: int = 2, seed: int = 0, n_nuisance: int = 1):
        rng = np.random.default_rng([seed, 7919])
        nuisance = _unit(rng.normal(size=(n_nuisance, feat_dim)))
        hi = rng.normal(size=(n_taps, 2, style_channels))
        lo = rng.normal(size=(n_taps, 2, style_channels))
        hi[:, 1] = np.abs(hi[:, 1]) + 0.5
        lo[:, 1] = np.abs(lo[:, 1]) + 0.5
        return cls(feat_dim, style_channels, n_taps, nuisance, hi, lo)

    def norm_of(self, quality: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        jitter = np.exp(0.01 * rng.normal(size=np.shape(quality)))
        return (NORM_BASE + NORM_SLOPE * quality) * jitter

    def sample_items(self, centers: np.ndarray, quality: np.ndarray, rng: np.random.Generator,
                     style_noise: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
        """Features and style stats for items with the given centers and qualities."""
        n = len(quality)
        q = quality[:, None]
        k = rng.integers(0, len(self.nuisance), size=n)
        w = self.nuisance_weight
        iso = _unit(rng.normal(size=(n, self.feat_dim)))
        noise = _unit(w * self.nuisance[k] + np.sqrt(1 - w * w) * iso)
        direction = _unit(q * centers + (1 - q) * noise)
        feats = direction * self.norm_of(quality, rng)[:, None]
        qs = quality[:, None, None, None]
        style = qs * self.style_hi + (1 - qs) * self.style_lo
        style = style + style_noise * rng.normal(size=style.shape)
        style[:, :, 1] = np.abs(style[:, :, 1])
        return feats.astype(np.float32), style.astype(np.float32)


def sample_quality(rng: np.random.Generator, n: int, low_frac: float) -> np.ndarray:
    low = rng.random(n) < low_frac
    return np.where(low, rng.uniform(*LOW_QUALITY, n), rng.uniform(*HIGH_QUALITY, n))


def sample_centers(rng: np.random.Generator, n_ids: int, dim: int, max_cos: float = 0.5) -> np.ndarray:
    """Unit identity centers, rejection-sampled to pairwise cosine below ``max_cos``."""
    out = np.empty((n_ids, dim))
    i = 0
    while i < n_ids:
        c = _unit(rng.normal(size=dim))
        if i == 0 or np.max(out[:i] @ c) < max_cos:
            out[i] = c
            i += 1
    return out


@dataclass
class SyntheticCorpus:
    centers: np.ndarray        # (n_ids, C_f), the ground-truth f_GT rows
    records: RecordSet         # quality populated
    seed: int
    per_id: int

    @property
    def n_ids(self) -> int:
        return self.centers.shape[0]

    def subject_indices(self, sid: int) -> np.ndarray:
        return np.arange(sid * self.per_id, (sid + 1) * self.per_id)

    def averaged_targets(self) -> np.ndarray:
        f = self.records.features.reshape(self.n_ids, self.per_id, -1).astype(np.float64)
        return _unit(f.mean(axis=1))


def generate_corpus(seed: int, n_ids: int, per_id: int, world: SyntheticWorld,
                    low_quality_frac: float = 0.7) -> SyntheticCorpus:
    if n_ids < 2:
        raise ValueError("need at least two identities")
    rng = np.random.default_rng(seed)
    centers = sample_centers(rng, n_ids, world.feat_dim)
    sids = np.repeat(np.arange(n_ids), per_id)
    quality = sample_quality(rng, n_ids * per_id, low_quality_frac)
    feats, style = world.sample_items(centers[sids], quality, rng)
    rs = RecordSet(feats, style, sids.astype(np.uint32), quality.astype(np.float32))
    return SyntheticCorpus(centers, rs, seed, per_id)
