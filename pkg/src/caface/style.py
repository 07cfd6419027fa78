"""Style input maker: style statistics and feature norm -> style vector."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError, ModelConfig
from .nn import Linear, Module

BN_EPS = 1e-5


def norm_quantize(norm, mu: float, sigma: float, q: int, k: float):
    """Bucket a feature norm into an integer in ``[-q*k, q*k)``.

    Works elementwise on arrays. The upper clamp keeps ``+k`` standard
    deviations from landing on the excluded bound; the lower one only
    matters when ``q*k`` is not an integer.
    """
    if sigma <= 0:
        raise ConfigError("norm sigma must be positive")
    z = np.clip((np.asarray(norm, dtype=np.float64) - mu) / sigma, -k, k)
    v = np.floor(q * z).astype(np.int64)
    lo, hi = int(np.ceil(-q * k)), int(np.ceil(q * k)) - 1
    return np.clip(v, lo, hi)


def norm_embed(v, c: int) -> np.ndarray:
    """Sinusoidal embedding of integer(s) ``v`` into ``c`` channels."""
    if c % 2:
        raise ConfigError("embedding size must be even")
    v = np.asarray(v, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(0, c, 2) / c)
    ang = v[..., None] * freqs
    out = np.empty(v.shape + (c,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


class StyleInputMaker(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.cfg = cfg
        # per-tap gate on [mean, std]
        self.param("w_s", np.ones((cfg.n_taps, 2, cfg.style_channels)))
        self.fc = self.child("fc", Linear(rng, cfg.n_taps * cfg.style_channels, cfg.gamma_dim))
        self.param("bn_gain", np.ones(cfg.gamma_dim))
        self.param("bn_bias", np.zeros(cfg.gamma_dim))
        self.buffers["bn_mean"] = np.zeros(cfg.gamma_dim, dtype=np.float32)
        self.buffers["bn_var"] = np.ones(cfg.gamma_dim, dtype=np.float32)
        self.buffers["norm_stats"] = np.array([0.0, 1.0])  # mu_f, sigma_f

    def style_vector(self, style, train: bool = False) -> Tensor:
        """gamma = BN(FC(ReLU(AvgPool(W_s * stats)))) over any leading dims."""
        cfg = self.cfg
        style = ad.as_tensor(style, like=self.params["w_s"])
        if style.shape[-3:] != (cfg.n_taps, 2, cfg.style_channels):
            raise ConfigError(f"style stats shape {style.shape[-3:]} does not match model")
        lead = style.shape[:-3]
        gated = (style * self.params["w_s"]).mean(axis=-2)         # (..., taps, C_M)
        h = ad.relu(gated).reshape(lead + (cfg.n_taps * cfg.style_channels,))
        h = self.fc(h)
        if train:
            flat = h.reshape(-1, cfg.gamma_dim)
            mu = flat.mean(axis=0)
            centered = flat - mu
            var = (centered * centered).mean(axis=0)
            normed = centered / ad.sqrt(var + BN_EPS)
            normed = normed.reshape(h.shape)
            n = flat.shape[0]
            m = cfg.bn_momentum
            unbiased = var.data * (n / max(n - 1, 1))
            self.buffers["bn_mean"] = ((1 - m) * self.buffers["bn_mean"] + m * mu.data).astype(np.float32)
            self.buffers["bn_var"] = ((1 - m) * self.buffers["bn_var"] + m * unbiased).astype(np.float32)
        else:
            mu = self.buffers["bn_mean"].astype(h.dtype)
            inv = (1.0 / np.sqrt(self.buffers["bn_var"].astype(np.float64) + BN_EPS)).astype(h.dtype)
            normed = (h - mu) * inv
        return normed * self.params["bn_gain"] + self.params["bn_bias"]

    def norm_embedding(self, norms) -> np.ndarray:
        mu, sigma = self.buffers["norm_stats"]
        v = norm_quantize(norms, float(mu), float(sigma), self.cfg.q, self.cfg.k)
        return norm_embed(v, self.cfg.norm_dim)

    def __call__(self, features, style, train: bool = False) -> Tensor:
        """Style vectors s = [gamma, n] for a stack of items."""
        gamma = self.style_vector(style, train=train)
        norms = np.linalg.norm(np.asarray(features, dtype=np.float64), axis=-1)
        n = ad.as_tensor(self.norm_embedding(norms).astype(gamma.dtype))
        return ad.concat([gamma, n], axis=-1)
