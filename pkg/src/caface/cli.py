"""Command-line entry point: ``caface {fuse,train,eval,serve}``."""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import json
import logging
import signal
import sys
from pathlib import Path

import numpy as np

from . import formats
from .autodiff import NonFiniteError
from .config import ConfigError, TrainConfig, load_train_config
from .evaluation import EvalProtocol, make_pairs, run_protocol, stream_probe, synthetic_protocol, write_weights_csv
from .records import RecordSet
from .streaming import FormatError, SessionError
from .synthetic import SyntheticWorld

log = logging.getLogger("caface")

DEFAULT_BATCH = 256


class CliError(Exception):
    pass


def _load_model(path):
    try:
        return formats.load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None


def _load_features(path) -> RecordSet:
    try:
        return formats.read_features(path)
    except OSError as exc:
        raise CliError(f"cannot read feature file {path}: {exc.strerror or exc}") from None


def fuse_records(model, rs: RecordSet, batch_size: int, with_weights: bool = False):
    """Fuse every probe (records grouped by subject id, file order kept within a probe).

    Returns (probe ids, fused matrix, weight rows, rejected count). Weight rows
    are (probe id, record index in ``rs``, weight).
    """
    ok = rs.finite_mask()
    rejected = int((~ok).sum())
    ids = np.unique(rs.subject_ids[ok])
    fused, rows = [], []
    for pid in ids:
        idx = np.flatnonzero(ok & (rs.subject_ids == pid))
        pf = stream_probe(model, rs[idx], batch_size)
        fused.append(pf.fused)
        if with_weights:
            rows.extend((int(pid), int(i), float(w)) for i, w in zip(idx, pf.weights()))
    dim = model.cfg.feat_dim
    return ids, np.asarray(fused, dtype=np.float64).reshape(-1, dim), rows, rejected


def cmd_fuse(args) -> int:
    model = _load_model(args.model)
    rs = _load_features(args.input)
    if len(rs) == 0:
        raise CliError(f"{args.input} holds no records")
    if rs.features.shape[1] != model.cfg.feat_dim or rs.style.shape[1:] != (model.cfg.n_taps, 2, model.cfg.style_channels):
        raise CliError("feature file dimensions do not match the checkpoint")
    ids, fused, rows, rejected = fuse_records(model, rs, args.batch_size, args.emit_weights is not None)
    if len(ids) == 0:
        raise CliError(f"all {rejected} records were rejected as non-finite or invalid")
    out = RecordSet(fused.astype(np.float32), np.zeros((len(ids), 0, 2, model.cfg.style_channels), np.float32),
                    ids.astype(np.uint32))
    formats.write_features(args.output, out)
    if args.emit_weights is not None:
        with open(args.emit_weights, "w") as fh:
            fh.write("probe,record,weight\n")
            fh.writelines(f"{p},{i},{w:.9g}\n" for p, i, w in rows)
    summary = {"probes": len(ids), "records": len(rs), "rejected": rejected, "output": str(args.output)}
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    from .train import TrainingDiverged, train

    cfg = load_train_config(args.config) if args.config else TrainConfig()
    overrides = {"seed": args.seed}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    cfg = dataclasses.replace(cfg, **overrides)
    try:
        result = train(cfg)
    except TrainingDiverged as exc:
        raise CliError(str(exc)) from None
    formats.save_checkpoint(args.out_checkpoint, result.model)
    trace = Path(args.trace) if args.trace else Path(args.out_checkpoint).with_suffix(".trace.csv")
    result.write_trace(trace)
    for row in result.epoch_losses:
        print(json.dumps({k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()}))
    return 0


def _parse_protocol(spec: str) -> dict:
    """``synthetic`` or a key = value file of synthetic-protocol settings."""
    if spec == "synthetic":
        return {}
    path = Path(spec)
    if not path.is_file():
        raise CliError(f"protocol {spec!r} is neither 'synthetic' nor a readable file")
    opts = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{spec}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        opts[key] = value
    return opts


_PROTOCOL_KEYS = {"seed": int, "n_ids": int, "probes_per_id": int, "probe_size": int, "batch_size": int,
                  "low_quality_frac": float, "impostor_ratio": int, "world_seed": int}


def build_protocol(args, cfg) -> EvalProtocol:
    if args.probes:
        if not args.gallery:
            raise CliError("--probes needs --gallery")
        probes_rs, gal = _load_features(args.probes), _load_features(args.gallery)
        ids = np.unique(probes_rs.subject_ids)
        probes = [probes_rs[np.flatnonzero(probes_rs.subject_ids == i)] for i in ids]
        rng = np.random.default_rng(args.seed)
        return EvalProtocol(probes, ids.astype(np.int64), gal.features, gal.subject_ids.astype(np.int64),
                            make_pairs(rng, ids, gal.subject_ids), args.batch_size)
    opts = _parse_protocol(args.protocol)
    unknown = set(opts) - set(_PROTOCOL_KEYS)
    if unknown:
        raise CliError(f"unknown protocol keys: {sorted(unknown)}")
    try:
        kw = {k: _PROTOCOL_KEYS[k](v) for k, v in opts.items()}
    except ValueError as exc:
        raise CliError(f"bad protocol value: {exc}") from None
    world = SyntheticWorld.create(cfg.feat_dim, cfg.style_channels, cfg.n_taps, seed=kw.pop("world_seed", 0))
    kw.setdefault("batch_size", args.batch_size)
    kw.setdefault("seed", args.seed)
    return synthetic_protocol(world, **kw)


def cmd_eval(args) -> int:
    if not args.model and not args.baseline:
        raise CliError("nothing to evaluate: pass --model and/or --baseline")
    model = _load_model(args.model) if args.model else None
    cfg = model.cfg if model else TrainConfig().model
    protocol = build_protocol(args, cfg)
    reports = []
    if args.baseline:
        reports.append(run_protocol(protocol))
    if model is not None:
        rep = run_protocol(protocol, model, export_weights=args.weights is not None)
        if args.weights is not None:
            write_weights_csv(args.weights, rep.pop("_weights"))
        reports.append(rep)
    text = json.dumps(reports if len(reports) > 1 else reports[0], indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    return 0


def _split_listen(listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    if not port.isdigit():
        raise CliError(f"--listen expects host:port, got {listen!r}")
    return host or "127.0.0.1", int(port)


def cmd_serve(args) -> int:
    from .service import FusionService, serve

    model = _load_model(args.model)
    host, port = _split_listen(args.listen)
    service = FusionService(model, args.state_dir)

    async def main() -> None:
        stop, ready = asyncio.Event(), asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        task = asyncio.create_task(serve(service, host, port, ready=ready, stop=stop))
        await ready.wait()
        print(f"listening on {host}:{service.bound_port}", file=sys.stderr, flush=True)
        await task

    asyncio.run(main())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caface", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuse", help="fuse the probes of a CAFF feature file")
    f.add_argument("--model", required=True)
    f.add_argument("--input", required=True)
    f.add_argument("--batch-size", type=int, default=DEFAULT_BATCH)
    f.add_argument("--output", required=True)
    f.add_argument("--emit-weights", metavar="CSV")
    f.set_defaults(func=cmd_fuse)

    t = sub.add_parser("train", help="train on a synthetic corpus")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--trace", help="loss trace CSV (default: <checkpoint>.trace.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score fusion on a recognition protocol")
    e.add_argument("--model")
    e.add_argument("--protocol", default="synthetic")
    e.add_argument("--baseline", action="store_true", help="also score naive averaging")
    e.add_argument("--probes", help="CAFF probe file (records grouped by subject id)")
    e.add_argument("--gallery", help="CAFF gallery file")
    e.add_argument("--seed", type=int, default=1000)
    e.add_argument("--batch-size", type=int, default=DEFAULT_BATCH)
    e.add_argument("--weights", metavar="CSV", help="export per-item weights")
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", help="run the JSON-lines fusion service")
    s.add_argument("--listen", default="127.0.0.1:7878")
    s.add_argument("--model", required=True)
    s.add_argument("--state-dir")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "batch_size", 1) < 1:
        print("caface: error: --batch-size must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError, ConfigError, FormatError, SessionError, NonFiniteError) as exc:
        print(f"caface: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
