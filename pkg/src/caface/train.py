"""Losses, AdamW, and the desk-scale training loop on synthetic corpora."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .model import CAFace
from .synthetic import SyntheticCorpus, SyntheticWorld, generate_corpus

log = logging.getLogger(__name__)

COS_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    pass


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    b = ad.as_tensor(b, like=a)
    num = (a * b).sum(axis=-1)
    den = ad.sqrt((a * a).sum(axis=-1)) * ad.sqrt((b * b).sum(axis=-1)) + COS_EPS
    return num / den


def template_loss(fused: Tensor, targets) -> Tensor:
    """Mean cosine distance between fused rows and their ground-truth centers."""
    # relu absorbs float rounding that would push cos a hair above 1
    return ad.relu(1.0 - cosine_rows(fused, targets)).mean()


def permutation_consistency_loss(f_concurrent: Tensor, f_split: Tensor) -> Tensor:
    return ad.relu(1.0 - cosine_rows(f_concurrent, f_split)).mean()


def total_loss(l_t, l_p, lambda_p: float = 1.0, lambda_t: float = 1.0):
    return l_t * lambda_t + l_p * lambda_p


def split_forward(model: CAFace, S: Tensor, F: Tensor, bounds: list[int]) -> Tensor:
    """Fused output when the item axis is processed in chunks and merged.

    The chunks are combined exactly like the streaming state does: summed
    unnormalized per-center sums over the summed row masses.
    """
    AF = AS = mass = None
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = (Ellipsis, slice(lo, hi), slice(None))
        sums, _ = model.cn.sums(S[sl], F[sl])
        AF = sums.AF if AF is None else AF + sums.AF
        AS = sums.AS if AS is None else AS + sums.AS
        mass = sums.row_mass if mass is None else mass + sums.row_mass
    fused, _ = model.aggregate(AS / mass, AF / mass)
    return fused


def random_split(rng: np.random.Generator, n: int, max_splits: int) -> list[int]:
    t = int(rng.integers(2, min(max_splits, n) + 1)) if n >= 2 else 1
    cuts = np.sort(rng.choice(np.arange(1, n), size=t - 1, replace=False)) if t > 1 else []
    return [0, *map(int, cuts), n]


def set_losses(model: CAFace, features: np.ndarray, style: np.ndarray, targets: np.ndarray,
               bounds: list[int] | None, train: bool = True) -> tuple[Tensor, Tensor | None]:
    """L_t on concurrent inference and, when ``bounds`` is given, L_p against a split pass.

    Shapes: features (B, N', C_f), style (B, N', taps, 2, C_M), targets (B, C_f).
    """
    S = model.style_inputs(features, style, train=train)
    F = model.features(features)
    inter, _ = model.cluster_network(S, F)
    fused, _ = model.aggregate(inter.S_prime, inter.F_prime)
    l_t = template_loss(fused, targets)
    if bounds is None:
        return l_t, None
    return l_t, permutation_consistency_loss(fused, split_forward(model, S, F, bounds))


@dataclass
class AdamW:
    params: dict[str, Tensor]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for k, p in self.params.items():
            self.m[k] = np.zeros_like(p.data)
            self.v[k] = np.zeros_like(p.data)

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data * (1 - self.lr * self.weight_decay) - self.lr * update).astype(p.data.dtype)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``; decays are listed as 1-based epochs."""
    drops = sum(1 for e in cfg.decay_epochs if epoch + 1 >= e)
    return cfg.lr * 0.1 ** drops


@dataclass
class TrainResult:
    model: CAFace
    epoch_losses: list[dict]
    trace: list[tuple[int, float, float, float]]

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "L_t", "L_p", "total"])
            for row in self.trace:
                w.writerow([row[0], *(f"{x:.8g}" for x in row[1:])])


def make_world(cfg: TrainConfig) -> SyntheticWorld:
    m = cfg.model
    return SyntheticWorld.create(m.feat_dim, m.style_channels, m.n_taps, seed=cfg.corpus.world_seed)


def training_corpus(cfg: TrainConfig) -> SyntheticCorpus:
    c = cfg.corpus
    return generate_corpus(cfg.seed, c.n_ids, c.per_id, make_world(cfg), c.low_quality_frac)


def init_model(cfg: TrainConfig, corpus: SyntheticCorpus) -> CAFace:
    model = CAFace(cfg.model, seed=cfg.seed)
    norms = np.linalg.norm(corpus.records.features.astype(np.float64), axis=1)
    model.set_norm_stats(float(norms.mean()), float(norms.std()))
    return model


def sample_step(rng: np.random.Generator, corpus: SyntheticCorpus, subjects: np.ndarray,
                n_set: int, style_noise: float):
    """Two sets of ``n_set`` records for every subject in ``subjects``."""
    idx = []
    for sid in subjects:
        pool = corpus.subject_indices(int(sid))
        for _ in range(2):
            idx.append(rng.choice(pool, size=n_set, replace=n_set > len(pool)))
    idx = np.asarray(idx)
    rs = corpus.records
    feats = rs.features[idx]
    style = rs.style[idx]
    if style_noise > 0:
        style = style + style_noise * rng.normal(size=style.shape).astype(np.float32)
        style[..., 1, :] = np.abs(style[..., 1, :])
    return feats, style, np.repeat(subjects, 2)


def monitor_sets(corpus: SyntheticCorpus, targets: np.ndarray, n_sets: int = 512, seed: int = 0):
    """A fixed sample of training sets, one per size in [2, 16], used to track L_t per epoch."""
    rng = np.random.default_rng([seed, 2])
    groups = []
    for n_set in range(2, 17):
        sids = rng.integers(0, corpus.n_ids, n_sets // 15)
        idx = np.stack([rng.choice(pool, size=n_set, replace=n_set > len(pool))
                        for pool in (corpus.subject_indices(int(s)) for s in sids)])
        groups.append((idx, targets[sids]))
    return groups


def monitor_loss(model: CAFace, records, groups) -> float:
    total = count = 0.0
    with ad.no_grad():
        for idx, targets in groups:
            fused, *_ = model.forward(records.features[idx], records.style[idx])
            total += float(template_loss(fused, targets).data) * len(idx)
            count += len(idx)
    return total / count


def train(cfg: TrainConfig, corpus: SyntheticCorpus | None = None, model: CAFace | None = None) -> TrainResult:
    corpus = corpus or training_corpus(cfg)
    model = model or init_model(cfg, corpus)
    targets_all = corpus.averaged_targets() if cfg.averaged_targets else corpus.centers
    params = model.named_parameters()
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    B = cfg.subjects_per_step
    steps_per_epoch = math.ceil(corpus.n_ids / B)
    trace: list[tuple[int, float, float, float]] = []
    epoch_losses: list[dict] = []
    monitor = monitor_sets(corpus, targets_all, seed=cfg.seed)
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(corpus.n_ids)
        sums = np.zeros(3)
        for s in range(steps_per_epoch):
            subjects = order[s * B:(s + 1) * B]
            n_set = int(rng.integers(cfg.min_set, cfg.max_set + 1))
            feats, style, sids = sample_step(rng, corpus, subjects, n_set, cfg.style_noise)
            bounds = random_split(rng, n_set, cfg.max_splits) if cfg.lambda_p > 0 else None
            with ad.Tape() as tape:
                l_t, l_p = set_losses(model, feats, style, targets_all[sids], bounds)
                loss = total_loss(l_t, l_p, cfg.lambda_p, cfg.lambda_t) if l_p is not None else l_t * cfg.lambda_t
            lt, lp, tot = float(l_t.data), float(l_p.data) if l_p is not None else 0.0, float(loss.data)
            if not np.isfinite(tot):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: L_t={lt} L_p={lp}")
            tape.backward(loss)
            opt.step()
            trace.append((step, lt, lp, tot))
            sums += (lt, lp, tot)
            step += 1
        mean = sums / steps_per_epoch
        fixed = monitor_loss(model, corpus.records, monitor)
        epoch_losses.append({"epoch": epoch, "lr": opt.lr, "L_t": mean[0], "L_p": mean[1], "total": mean[2],
                             "monitor_L_t": fixed})
        log.info("epoch %d lr %.1e L_t %.4f L_p %.4f monitor %.4f", epoch, opt.lr, mean[0], mean[1], fixed)
    return TrainResult(model, epoch_losses, trace)


def naive_template_loss(corpus: SyntheticCorpus, n_sets: int = 2000, n_set: int = 8, seed: int = 0) -> float:
    """L_t of plain feature averaging over randomly drawn sets of the corpus."""
    rng = np.random.default_rng(seed)
    sids = rng.integers(0, corpus.n_ids, n_sets)
    total = 0.0
    for sid in sids:
        idx = rng.choice(corpus.subject_indices(int(sid)), size=n_set, replace=False)
        f = corpus.records.features[idx].astype(np.float64).mean(axis=0)
        c = corpus.centers[sid]
        total += 1 - f @ c / (np.linalg.norm(f) * np.linalg.norm(c))
    return total / n_sets


def model_template_loss(model: CAFace, corpus: SyntheticCorpus, n_sets: int = 2000, n_set: int = 8, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    sids = rng.integers(0, corpus.n_ids, n_sets)
    idx = np.stack([rng.choice(corpus.subject_indices(int(s)), size=n_set, replace=False) for s in sids])
    rs = corpus.records
    with ad.no_grad():
        fused, *_ = model.forward(rs.features[idx], rs.style[idx])
    f = fused.data.astype(np.float64)
    c = corpus.centers[sids]
    cos = (f * c).sum(1) / (np.linalg.norm(f, axis=1) * np.linalg.norm(c, axis=1))
    return float(np.mean(1 - cos))
