"""Verification / identification metrics and assignment diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


@dataclass(frozen=True)
class TarAtFar:
    tar: float
    threshold: float
    far: float             # realized false accept rate at the threshold
    feasible: bool         # False when the requested FAR is below 1 / n_impostors
    min_far: float         # smallest nonzero FAR the impostor list can realize

    def __float__(self) -> float:
        return self.tar


def tar_at_far(genuine, impostor, far: float) -> TarAtFar:
    """True accept rate at the loosest threshold whose impostor accept rate is <= ``far``.

    A pair is accepted when its score is >= threshold. Thresholds sit just
    above an impostor score, so tied impostors are rejected together rather
    than split.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))[::-1]
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("need non-empty genuine and impostor scores")
    n = impostor.size
    allowed = int(np.floor(far * n + 1e-9))
    if allowed >= n:
        threshold = -np.inf
    else:
        threshold = np.nextafter(impostor[allowed], np.inf)
    accepted = int(np.sum(impostor >= threshold))
    return TarAtFar(
        tar=float(np.mean(genuine >= threshold)),
        threshold=float(threshold),
        far=accepted / n,
        feasible=far >= 1.0 / n,
        min_far=1.0 / n,
    )


def rank_k(probe: np.ndarray, gallery: np.ndarray, probe_labels, gallery_labels, k: int = 1) -> float:
    """Fraction of probes whose subject is among the top-k gallery matches."""
    sims = cosine_matrix(probe, gallery)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    glab = np.asarray(gallery_labels)[order]
    hits = (glab == np.asarray(probe_labels)[:, None]).any(axis=1)
    return float(hits.mean())


def assignment_entropy(A: np.ndarray, reduce: str = "mean") -> float:
    """Entropy of each center's distribution over items, averaged (or summed) over centers."""
    A = np.asarray(A, dtype=np.float64)
    p = A / A.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    if reduce == "mean":
        return float(h.mean())
    if reduce == "sum":
        return float(h.sum())
    raise ValueError(f"unknown reduce {reduce!r}")


def sample_weights(A: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Per-item contribution: assignment mass times the mean channel weight of each cluster."""
    A = np.asarray(A, dtype=np.float64)
    w = A.T @ np.asarray(P, dtype=np.float64).mean(axis=1)
    return w / w.sum()


def naive_average(features) -> np.ndarray:
    return np.asarray(features, dtype=np.float64).mean(axis=0)
