"""Constant-memory per-probe fusion state across sequential batches.

A session keeps, per center, the running weighted mean of values and the
total assignment mass it has received. Merging a batch is an incremental
weighted average, so the final state does not depend on batch order.
"""

from __future__ import annotations

import struct
import uuid
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .cluster import UnnormalizedSums
from .config import ModelConfig
from .records import as_record_set

SNAPSHOT_MAGIC = b"CAFS"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQI")  # magic, version, M, C_f, d, items_seen, id length


class SessionError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class FusionSession:
    F_hat: np.ndarray          # (M, C_f) float64
    S_hat: np.ndarray          # (M, d) float64
    a: np.ndarray              # (M,) float64 cumulative row mass
    items_seen: int = 0
    session_id: str = field(default_factory=lambda: uuid.uuid4().hex)

    @property
    def nbytes(self) -> int:
        return self.F_hat.nbytes + self.S_hat.nbytes + self.a.nbytes

    def merge(self, AF: np.ndarray, AS: np.ndarray, row_mass: np.ndarray, n_items: int) -> None:
        """Fold one batch's unnormalized sums into the running means."""
        a_new = self.a + row_mass
        denom = np.where(a_new > 0, a_new, 1.0)[:, None]
        self.F_hat = np.where(a_new[:, None] > 0, (self.a[:, None] * self.F_hat + AF) / denom, 0.0)
        self.S_hat = np.where(a_new[:, None] > 0, (self.a[:, None] * self.S_hat + AS) / denom, 0.0)
        self.a = a_new
        self.items_seen += n_items

    def copy(self) -> "FusionSession":
        return FusionSession(self.F_hat.copy(), self.S_hat.copy(), self.a.copy(), self.items_seen, self.session_id)


@dataclass
class FinalizeResult:
    fused: np.ndarray      # (C_f,)
    P: np.ndarray          # (M, C_f)
    a: np.ndarray          # (M,)

    @property
    def cluster_importance(self) -> np.ndarray:
        return self.P.mean(axis=1)


def open_session(cfg: ModelConfig, session_id: str | None = None) -> FusionSession:
    m = cfg.n_centers
    s = FusionSession(np.zeros((m, cfg.feat_dim)), np.zeros((m, cfg.style_dim)), np.zeros(m))
    if session_id is not None:
        s.session_id = session_id
    return s


def batch_sums(model, batch) -> tuple[UnnormalizedSums, np.ndarray]:
    """Run the style maker and cluster network on one batch alone."""
    rs = as_record_set(batch)
    with ad.no_grad():
        S = model.style_inputs(rs.features, rs.style)
        sums, amap = model.cn.sums(S, model.features(rs.features))
    return sums, amap.A.data


def absorb(session: FusionSession, batch, model) -> np.ndarray:
    """Merge one batch into ``session`` and return the batch's assignment map."""
    rs = as_record_set(batch)
    n = len(rs)
    if n == 0:
        raise SessionError("empty batch")
    if n > model.cfg.max_batch:
        raise SessionError(f"batch of {n} exceeds max batch {model.cfg.max_batch}")
    if not rs.finite_mask().all():
        raise NonFiniteError("batch contains non-finite or invalid records")
    sums, A = batch_sums(model, rs)
    session.merge(
        sums.AF.data.astype(np.float64),
        sums.AS.data.astype(np.float64),
        sums.row_mass.data[:, 0].astype(np.float64),
        n,
    )
    return A


def update(session: FusionSession, batch, model) -> FusionSession:
    absorb(session, batch, model)
    return session


def finalize(session: FusionSession, model) -> FinalizeResult:
    """Aggregate the current state; the session stays usable afterwards."""
    if session.items_seen < 1:
        raise SessionError("cannot finalize an empty session")
    dtype = model.dtype
    with ad.no_grad():
        fused, P = model.aggregate(session.S_hat.astype(dtype), session.F_hat.astype(dtype))
    return FinalizeResult(fused.data.copy(), P.data.copy(), session.a.copy())


def pooled_intermediate(sums_list) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Direct pooled form: sum of per-batch A_t V_t over the sum of row masses."""
    AF = sum(s.AF.data.astype(np.float64) for s in sums_list)
    AS = sum(s.AS.data.astype(np.float64) for s in sums_list)
    mass = sum(s.row_mass.data[:, 0].astype(np.float64) for s in sums_list)
    return AF / mass[:, None], AS / mass[:, None], mass


# ------------------------------------------------------------------ snapshot


def snapshot_bytes(session: FusionSession) -> bytes:
    m, cf = session.F_hat.shape
    d = session.S_hat.shape[1]
    sid = session.session_id.encode("utf-8")
    parts = [
        _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, m, cf, d, session.items_seen, len(sid)),
        sid,
        session.a.astype("<f8").tobytes(),
        session.F_hat.astype("<f8").tobytes(),
        session.S_hat.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def load_snapshot(blob: bytes) -> FusionSession:
    if len(blob) < _HEADER.size:
        raise FormatError("snapshot truncated")
    magic, version, m, cf, d, seen, idlen = _HEADER.unpack_from(blob, 0)
    if magic != SNAPSHOT_MAGIC:
        raise FormatError(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"unsupported snapshot version {version}")
    expected = _HEADER.size + idlen + 8 * (m + m * cf + m * d)
    if len(blob) != expected:
        raise FormatError(f"snapshot length {len(blob)} != {expected}")
    off = _HEADER.size
    sid = blob[off:off + idlen].decode("utf-8")
    off += idlen
    a = np.frombuffer(blob, "<f8", m, off).astype(np.float64)
    off += 8 * m
    F = np.frombuffer(blob, "<f8", m * cf, off).reshape(m, cf).astype(np.float64)
    off += 8 * m * cf
    S = np.frombuffer(blob, "<f8", m * d, off).reshape(m, d).astype(np.float64)
    return FusionSession(F, S, a, int(seen), sid)
