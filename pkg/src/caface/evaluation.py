"""Synthetic recognition protocols and the probe-fusion runner."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .records import RecordSet
from .streaming import absorb, finalize, open_session
from .synthetic import SyntheticWorld, sample_centers, sample_quality

log = logging.getLogger(__name__)

DEFAULT_FARS = (1e-3, 1e-2, 1e-1)
DEFAULT_KS = (1, 5)


@dataclass
class EvalProtocol:
    probes: list[RecordSet]
    probe_labels: np.ndarray
    gallery: np.ndarray            # (G, C_f)
    gallery_labels: np.ndarray     # (G,)
    pairs: np.ndarray              # (P, 2) probe index, gallery index
    batch_size: int = 256

    def pair_labels(self) -> np.ndarray:
        return self.probe_labels[self.pairs[:, 0]] == self.gallery_labels[self.pairs[:, 1]]


def make_pairs(rng: np.random.Generator, probe_labels: np.ndarray, gallery_labels: np.ndarray,
               impostor_ratio: int = 10) -> np.ndarray:
    """One genuine pair per probe plus ``impostor_ratio`` impostor pairs."""
    by_label = {int(l): i for i, l in enumerate(gallery_labels)}
    pairs = []
    g = len(gallery_labels)
    for p, lab in enumerate(probe_labels):
        own = by_label[int(lab)]
        pairs.append((p, own))
        others = rng.choice(g - 1, size=min(impostor_ratio, g - 1), replace=False)
        pairs.extend((p, int(o + (o >= own))) for o in others)
    return np.asarray(pairs, dtype=np.int64)


def synthetic_protocol(world: SyntheticWorld, seed: int = 1000, n_ids: int = 200, probes_per_id: int = 5,
                       probe_size: int = 32, low_quality_frac: float = 0.7, batch_size: int = 256,
                       impostor_ratio: int = 10) -> EvalProtocol:
    """Probes of mostly low-quality items against a clean single-image gallery."""
    rng = np.random.default_rng([seed, 31337])
    centers = sample_centers(rng, n_ids, world.feat_dim)
    gq = rng.uniform(0.85, 1.0, n_ids)
    gallery, _ = world.sample_items(centers, gq, rng)
    probes, labels = [], []
    for sid in range(n_ids):
        for _ in range(probes_per_id):
            q = sample_quality(rng, probe_size, low_quality_frac)
            f, s = world.sample_items(np.repeat(centers[sid:sid + 1], probe_size, 0), q, rng)
            probes.append(RecordSet(f, s, np.full(probe_size, sid, np.uint32), q.astype(np.float32)))
            labels.append(sid)
    labels = np.asarray(labels)
    glabels = np.arange(n_ids)
    return EvalProtocol(probes, labels, gallery, glabels, make_pairs(rng, labels, glabels, impostor_ratio), batch_size)


def truncate_probes(protocol: EvalProtocol, n: int) -> EvalProtocol:
    """Same identities, gallery, and pairs, keeping the first ``n`` items of every probe."""
    probes = [rs[np.arange(min(n, len(rs)))] for rs in protocol.probes]
    return dataclasses.replace(protocol, probes=probes)


@dataclass
class ProbeFusion:
    fused: np.ndarray
    P: np.ndarray | None = None
    A_batches: list[np.ndarray] = field(default_factory=list)

    def weights(self) -> np.ndarray:
        if self.P is None:
            raise ValueError("no cluster weights for this fusion")
        return metrics.sample_weights(np.concatenate(self.A_batches, axis=1), self.P)


def stream_probe(model, rs: RecordSet, batch_size: int) -> ProbeFusion:
    """Fuse one probe by streaming consecutive batches through a session."""
    session = open_session(model.cfg)
    a_list = []
    for lo in range(0, len(rs), batch_size):
        part = rs[np.arange(lo, min(lo + batch_size, len(rs)))]
        a_list.append(absorb(session, part, model))
    out = finalize(session, model)
    return ProbeFusion(out.fused, out.P, a_list)


def run_protocol(protocol: EvalProtocol, model=None, fars=DEFAULT_FARS, ks=DEFAULT_KS,
                 shuffle_seed: int | None = None, export_weights: bool = False) -> dict:
    """Fuse every probe (model, or naive averaging when ``model`` is None) and score.

    ``shuffle_seed`` permutes the item order within every probe before
    streaming, which changes batch composition but not set content.
    """
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    fused, keep, entropies, weights = [], [], [], []
    skipped = 0
    for i, rs in enumerate(protocol.probes):
        if len(rs) == 0:
            skipped += 1
            continue
        if rng is not None:
            rs = rs[rng.permutation(len(rs))]
        if model is None:
            fused.append(metrics.naive_average(rs.features))
        else:
            pf = stream_probe(model, rs, protocol.batch_size)
            fused.append(pf.fused)
            entropies.extend(metrics.assignment_entropy(A) for A in pf.A_batches)
            if export_weights:
                weights.append((i, pf.weights()))
        keep.append(i)
    if skipped:
        log.warning("skipped %d empty probes", skipped)
    fused = np.asarray(fused)
    keep = np.asarray(keep)
    labels = protocol.probe_labels[keep]
    report: dict = {"method": "naive" if model is None else "caface", "n_probes": len(keep), "skipped": skipped}
    for k in ks:
        report[f"rank{k}"] = metrics.rank_k(fused, protocol.gallery, labels, protocol.gallery_labels, k)
    pos = {p: j for j, p in enumerate(keep)}
    pairs = np.asarray([(pos[p], g) for p, g in protocol.pairs if p in pos], dtype=np.int64).reshape(-1, 2)
    if len(pairs):
        fn = fused[pairs[:, 0]]
        gn = protocol.gallery[pairs[:, 1]].astype(np.float64)
        scores = (fn * gn).sum(1) / (np.linalg.norm(fn, axis=1) * np.linalg.norm(gn, axis=1))
        genuine = labels[pairs[:, 0]] == protocol.gallery_labels[pairs[:, 1]]
        for far in fars:
            r = metrics.tar_at_far(scores[genuine], scores[~genuine], far)
            report[f"tar@far={far:g}"] = r.tar
            if not r.feasible:
                report[f"tar@far={far:g}_infeasible_min_far"] = r.min_far
    if entropies:
        report["mean_entropy"] = float(np.mean(entropies))
    if export_weights:
        report["_weights"] = weights
    return report


def write_weights_csv(path, weights: list[tuple[int, np.ndarray]]) -> None:
    with open(path, "w") as fh:
        fh.write("probe,item,weight\n")
        for probe, w in weights:
            for j, v in enumerate(w):
                fh.write(f"{probe},{j},{v:.9g}\n")
