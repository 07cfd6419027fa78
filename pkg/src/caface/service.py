"""Newline-delimited JSON fusion service.

Frames (one JSON object per line, one reply line per frame)::

    {"op": "open"}                                   -> {"session": id}
    {"op": "push", "session": id, "records": [b64]}  -> {"a": [...], "items_seen": n}
    {"op": "finalize", "session": id}                -> {"fused": [...], "weights_summary": {...}, "items_seen": n}
    {"op": "close", "session": id}                   -> {"closed": id}
    {"op": "close"}                                  -> {"bye": true}, then the connection closes

Each ``records`` entry is the base64 of one CAFF record payload (no file
header). Failures produce ``{"error": message}`` and leave state untouched.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import json
import logging
import uuid
from pathlib import Path

import numpy as np

from .formats import parse_record_payload
from .records import RecordSet
from .streaming import (
    FormatError,
    FusionSession,
    SessionError,
    absorb,
    finalize,
    load_snapshot,
    open_session,
    snapshot_bytes,
)

log = logging.getLogger(__name__)


class FrameError(ValueError):
    pass


class FusionService:
    def __init__(self, model, state_dir: str | Path | None = None) -> None:
        self.model = model
        self.sessions: dict[str, FusionSession] = {}
        self.state_dir = Path(state_dir) if state_dir else None
        self.bound_port: int | None = None
        if self.state_dir and self.state_dir.is_dir():
            for path in sorted(self.state_dir.glob("*.cafs")):
                s = load_snapshot(path.read_bytes())
                self.sessions[s.session_id] = s
            log.info("restored %d sessions", len(self.sessions))

    def _session(self, frame: dict) -> FusionSession:
        sid = frame.get("session")
        if not isinstance(sid, str) or sid not in self.sessions:
            raise FrameError(f"unknown session {sid!r}")
        return self.sessions[sid]

    def _decode(self, records) -> RecordSet:
        if not isinstance(records, list) or not records:
            raise FrameError("records must be a non-empty list")
        parts = []
        for r in records:
            if not isinstance(r, str):
                raise FrameError("records must be base64 strings")
            try:
                blob = base64.b64decode(r, validate=True)
            except (binascii.Error, ValueError):
                raise FrameError("invalid base64 record") from None
            parts.append(parse_record_payload(blob, self.model.cfg))
        return RecordSet.concat(parts)

    def handle(self, frame) -> dict:
        if not isinstance(frame, dict):
            raise FrameError("frame must be a JSON object")
        op = frame.get("op")
        if op == "open":
            sid = uuid.uuid4().hex
            self.sessions[sid] = open_session(self.model.cfg, sid)
            return {"session": sid}
        if op == "push":
            session = self._session(frame)
            rs = self._decode(frame.get("records"))
            bad = int((~rs.finite_mask()).sum())
            if bad:
                raise FrameError(f"rejected push: {bad} non-finite or invalid records")
            absorb(session, rs, self.model)
            return {"a": session.a.tolist(), "items_seen": session.items_seen}
        if op == "finalize":
            session = self._session(frame)
            out = finalize(session, self.model)
            return {
                "fused": out.fused.astype(np.float32).tolist(),
                "weights_summary": {"cluster_importance": out.cluster_importance.tolist(), "a": out.a.tolist()},
                "items_seen": session.items_seen,
            }
        if op == "close":
            if "session" not in frame:
                return {"bye": True}
            session = self._session(frame)
            del self.sessions[session.session_id]
            return {"closed": session.session_id}
        raise FrameError(f"unknown op {op!r}")

    def handle_line(self, line: str | bytes) -> dict:
        try:
            frame = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            return {"error": f"malformed JSON: {exc}"}
        try:
            return self.handle(frame)
        except (FrameError, FormatError, SessionError) as exc:
            return {"error": str(exc)}

    def persist(self) -> None:
        if not self.state_dir:
            return
        self.state_dir.mkdir(parents=True, exist_ok=True)
        for old in self.state_dir.glob("*.cafs"):
            old.unlink()
        for sid, session in self.sessions.items():
            (self.state_dir / f"{sid}.cafs").write_bytes(snapshot_bytes(session))
        log.info("persisted %d sessions to %s", len(self.sessions), self.state_dir)

    async def serve_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while line := await reader.readline():
                if not line.strip():
                    continue
                reply = self.handle_line(line)
                writer.write(json.dumps(reply, separators=(",", ":")).encode() + b"\n")
                await writer.drain()
                if reply.get("bye"):
                    break
        finally:
            writer.close()


async def serve(service: FusionService, host: str, port: int, ready: asyncio.Event | None = None,
                stop: asyncio.Event | None = None) -> None:
    server = await asyncio.start_server(service.serve_connection, host, port, limit=2 ** 26)
    service.bound_port = server.sockets[0].getsockname()[1]
    log.info("listening on %s", ", ".join(str(s.getsockname()) for s in server.sockets))
    if ready is not None:
        ready.set()
    stop = stop or asyncio.Event()
    try:
        async with server:
            await stop.wait()
    finally:
        service.persist()
