"""Trend experiments: trained fusion vs naive averaging across probe sizes and center counts."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .evaluation import run_protocol, synthetic_protocol, truncate_probes
from .train import make_world, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrendConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    probe_sizes: tuple[int, ...] = (4, 8, 16, 32, 64)
    eval_ids: int = 1000           # gallery size; one probe per identity
    batch_size: int = 16           # streaming batch N' used when fusing probes
    sweep_centers: tuple[int, ...] = (1, 2, 4)
    sweep_seed: int = 0


@dataclass
class TrendResult:
    naive: dict[int, list[float]]      # probe size -> rank-1 per seed
    model: dict[int, list[float]]
    sweep: dict[int, float]            # M -> rank-1 averaged over probe sizes
    seconds: float
    models: dict = field(default_factory=dict, repr=False)   # (M, seed) -> trained model
    histories: dict = field(default_factory=dict, repr=False)  # (M, seed) -> per-epoch loss dicts

    def gains(self) -> dict[int, float]:
        return {n: float(np.mean(self.model[n]) - np.mean(self.naive[n])) for n in self.naive}

    def mean_gain(self) -> float:
        return float(np.mean(list(self.gains().values())))

    def summary(self) -> dict:
        return {
            "naive_rank1": {n: float(np.mean(v)) for n, v in self.naive.items()},
            "model_rank1": {n: float(np.mean(v)) for n, v in self.model.items()},
            "gain": self.gains(),
            "mean_gain": self.mean_gain(),
            "sweep_rank1": self.sweep,
            "seconds": self.seconds,
        }


def _rank1_by_size(cfg: TrendConfig, world, seed: int, model) -> dict[int, float]:
    # smaller probes are prefixes of the largest, so sizes differ only by the added items
    full = synthetic_protocol(world, seed=10_000 + seed, n_ids=cfg.eval_ids, probes_per_id=1,
                              probe_size=max(cfg.probe_sizes), batch_size=cfg.batch_size)
    return {n: run_protocol(truncate_probes(full, n), model, ks=(1,), fars=())["rank1"]
            for n in cfg.probe_sizes}


def run_trend(cfg: TrendConfig = TrendConfig()) -> TrendResult:
    t0 = time.perf_counter()
    world = make_world(cfg.train)
    naive = {n: [] for n in cfg.probe_sizes}
    model_acc = {n: [] for n in cfg.probe_sizes}
    models, histories = {}, {}
    base_m = cfg.train.model.n_centers
    for seed in cfg.seeds:
        result = train(dataclasses.replace(cfg.train, seed=seed))
        model = models[(base_m, seed)] = result.model
        histories[(base_m, seed)] = result.epoch_losses
        r_naive = _rank1_by_size(cfg, world, seed, None)
        r_model = _rank1_by_size(cfg, world, seed, model)
        for n in cfg.probe_sizes:
            naive[n].append(r_naive[n])
            model_acc[n].append(r_model[n])
        log.info("seed %d naive %s model %s", seed, r_naive, r_model)
    sweep = {}
    for m in cfg.sweep_centers:
        key = (m, cfg.sweep_seed)
        if key not in models:
            tc = dataclasses.replace(cfg.train, seed=cfg.sweep_seed,
                                     model=dataclasses.replace(cfg.train.model, n_centers=m))
            result = train(tc)
            models[key], histories[key] = result.model, result.epoch_losses
        sweep[m] = float(np.mean(list(_rank1_by_size(cfg, world, cfg.sweep_seed, models[key]).values())))
        log.info("M=%d mean rank-1 %.4f", m, sweep[m])
    return TrendResult(naive, model_acc, sweep, time.perf_counter() - t0, models, histories)
