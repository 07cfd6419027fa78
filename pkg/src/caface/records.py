"""Per-item inputs: identity feature plus style statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class FeatureRecord:
    feature: np.ndarray          # (C_f,), carries its own norm
    style: np.ndarray            # (n_taps, 2, C_M): [:, 0] spatial mean, [:, 1] spatial std
    subject_id: int = 0
    quality: float | None = None  # synthetic ground truth only

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.feature))


@dataclass
class RecordSet:
    """Column-stacked records; the form every model entry point consumes."""

    features: np.ndarray     # (N, C_f) float32
    style: np.ndarray        # (N, n_taps, 2, C_M) float32
    subject_ids: np.ndarray  # (N,) uint32
    quality: np.ndarray | None = None

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, idx) -> "RecordSet":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return RecordSet(
            self.features[idx],
            self.style[idx],
            self.subject_ids[idx],
            None if self.quality is None else self.quality[idx],
        )

    def records(self) -> list[FeatureRecord]:
        q = self.quality
        return [
            FeatureRecord(self.features[i], self.style[i], int(self.subject_ids[i]),
                          None if q is None else float(q[i]))
            for i in range(len(self))
        ]

    @classmethod
    def from_records(cls, records: Sequence[FeatureRecord]) -> "RecordSet":
        if not records:
            raise ValueError("empty record list")
        q = [r.quality for r in records]
        return cls(
            np.stack([np.asarray(r.feature, np.float32) for r in records]),
            np.stack([np.asarray(r.style, np.float32) for r in records]),
            np.array([r.subject_id for r in records], dtype=np.uint32),
            None if any(v is None for v in q) else np.array(q, dtype=np.float32),
        )

    @classmethod
    def concat(cls, parts: Sequence["RecordSet"]) -> "RecordSet":
        q = [p.quality for p in parts]
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.style for p in parts]),
            np.concatenate([p.subject_ids for p in parts]),
            None if any(v is None for v in q) else np.concatenate(q),
        )

    def finite_mask(self) -> np.ndarray:
        ok = np.isfinite(self.features).all(axis=1)
        ok &= np.isfinite(self.style.reshape(len(self), -1)).all(axis=1)
        ok &= np.linalg.norm(np.nan_to_num(self.features), axis=1) > 0
        ok &= (np.nan_to_num(self.style[:, :, 1], nan=0.0) >= 0).reshape(len(self), -1).all(axis=1)
        return ok


def as_record_set(batch) -> RecordSet:
    if isinstance(batch, RecordSet):
        return batch
    return RecordSet.from_records(list(batch))
