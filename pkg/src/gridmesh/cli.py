"""Command-line entry points: ``gridmesh`` and ``pmu-emu``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import harness
from .clock import VirtualClock, WallClock
from .grid import (
    TruthSeries,
    load_bundled,
    load_grid_model,
    load_scenario,
    run_scenario,
)
from .kv import KvFormatError


def _resolve_model(spec: str):
    if os.path.exists(spec):
        return load_grid_model(spec)
    return load_bundled(Path(spec).stem)


def _resolve_scenario(spec: str):
    if os.path.exists(spec):
        return load_scenario(spec)
    return load_bundled(Path(spec).stem)


def _parse_delay_ms(text: str) -> float:
    text = text.strip().lower()
    if text.endswith("ms"):
        return float(text[:-2])
    if text.endswith("s"):
        return float(text[:-1]) * 1000.0
    return float(text)


def _cmd_run(args) -> int:
    if args.config:
        cfg = harness.load_experiment(args.config, out_dir=args.out)
    else:
        cfg = harness.ExperimentConfig(
            model=_resolve_model(args.model),
            scenario=_resolve_scenario(args.scenario),
            out_dir=Path(args.out),
            mode=args.mode,
            clock=args.clock,
            wan_delay_ms=_parse_delay_ms(args.wan_delay),
            seed=args.seed,
            noise=args.noise,
            byte_accounting=args.accounting,
            pseudo_mode=args.pseudo,
            reorder_window=args.reorder_window,
            artifacts=args.artifacts,
        )
    cfg.check = args.check
    result = harness.run_experiment(cfg)
    print((result.out_dir / "summary.txt").read_text(), end="")
    if args.check:
        failed = [c for c in result.checks if not c.passed]
        for check in result.checks:
            print(f"[{'PASS' if check.passed else 'FAIL'}] {check.name}: "
                  f"{check.detail}")
        return 1 if failed else 0
    return 0


def _cmd_truth(args) -> int:
    model = _resolve_model(args.model)
    scenario = _resolve_scenario(args.scenario)
    truth = run_scenario(model, scenario)
    truth.to_csv(args.out)
    print(f"wrote {len(truth)} ticks x {len(truth.node_ids)} nodes to {args.out}")
    return 0


def _cmd_figures(args) -> int:
    from .figures import export_figures

    runs = {}
    for spec in args.run:
        label, _, path = spec.partition("=")
        if not path:
            raise SystemExit(f"--run needs label=dir, got {spec!r}")
        runs[label] = Path(path)
    paths = export_figures(runs, Path(args.out), node=args.node)
    for p in paths:
        print(p)
    return 0


def _cmd_vo(args) -> int:
    from .vo import load_vo_config
    from .voserver import VoServer

    config = load_vo_config(args.config)
    server = VoServer(config)
    server.start()
    print(f"VO {config.vo_id}: frames on {server.ingest_address}, "
          f"GET /latest on {config.http}, POSTs to {config.endpoint}")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()
    return 0


def _cmd_dsse(args) -> int:
    from .broker import Broker, BrokerServer
    from .recordlog import RecordLog
    from .service import DsseApp, DsseHttpServer, load_dsse_config

    config = load_dsse_config(args.config)
    model = _resolve_model(config.model_path or "ieee13-balanced")
    broker = None
    broker_server = None
    if config.broker_listen:
        broker_server = BrokerServer(config.broker_listen)
        broker = broker_server.broker
        broker_server.serve_in_background()
    log = RecordLog(config.records_path)
    app = DsseApp(
        model, config.registry, log,
        staleness_horizon_s=config.staleness_horizon_s,
        pmu_sigma=config.pmu_sigma,
        pseudo_sigma_fraction=config.pseudo_sigma_fraction,
        pseudo_sigma_floor=config.pseudo_sigma_floor,
        broker=broker,
        rules=config.rules,
        worker=True,
    )
    server = DsseHttpServer(config.listen, app)
    server.serve_in_background()
    print(f"DSSE on http://{config.listen[0]}:{config.listen[1]} "
          f"(POST /report, GET /results, GET /health)"
          + (f", broker on {config.broker_listen}" if config.broker_listen else ""))
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.shutdown()
        app.close()
        log.close()
        if broker_server:
            broker_server.shutdown()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gridmesh",
        description="Desk-scale IoT-cloud DSSE pipeline and benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full experiment")
    p_run.add_argument("--model", default="ieee13-balanced",
                       help="model .kv path or bundled name")
    p_run.add_argument("--scenario", default="der-insertion",
                       help="scenario .kv path or bundled name")
    p_run.add_argument("--mode", default="adaptive", choices=harness.MODES)
    p_run.add_argument("--clock", default="virtual", choices=("virtual", "wall"))
    p_run.add_argument("--wan-delay", default="40ms",
                       help="injected one-way WAN delay (e.g. 40ms)")
    p_run.add_argument("--out", required=True, help="artifacts directory")
    p_run.add_argument("--seed", type=int, default=1)
    p_run.add_argument("--noise", default="default", choices=("default", "zero"))
    p_run.add_argument("--accounting", default="paper",
                       choices=("paper", "measured"))
    p_run.add_argument("--pseudo", default="profile", choices=("profile", "truth"))
    p_run.add_argument("--reorder-window", type=int, default=0)
    p_run.add_argument("--artifacts", default="full", choices=("full", "light"))
    p_run.add_argument("--config", help="experiment .kv (overrides other flags)")
    p_run.add_argument("--check", action="store_true",
                       help="exit nonzero unless mode checks pass")
    p_run.set_defaults(func=_cmd_run)

    p_truth = sub.add_parser("truth", help="export a ground-truth CSV")
    p_truth.add_argument("--model", default="ieee13-balanced")
    p_truth.add_argument("--scenario", default="der-insertion")
    p_truth.add_argument("--out", required=True)
    p_truth.set_defaults(func=_cmd_truth)

    p_fig = sub.add_parser("figures", help="export figure CSVs and PNGs")
    p_fig.add_argument("--run", action="append", required=True,
                       metavar="LABEL=DIR", help="run directory, repeatable")
    p_fig.add_argument("--out", required=True)
    p_fig.add_argument("--node", type=int, default=33,
                       help="non-instrumented node to plot")
    p_fig.set_defaults(func=_cmd_figures)

    p_vo = sub.add_parser("vo", help="run a standalone VO")
    p_vo.add_argument("--config", required=True)
    p_vo.set_defaults(func=_cmd_vo)

    p_dsse = sub.add_parser("dsse", help="run the standalone DSSE service")
    p_dsse.add_argument("--config", required=True)
    p_dsse.set_defaults(func=_cmd_dsse)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KvFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def pmu_emu_main(argv=None) -> int:
    from .emulator import connect_and_stream, load_pmu_config

    parser = argparse.ArgumentParser(
        prog="pmu-emu",
        description="Replay a ground-truth series as a synchrophasor stream",
    )
    parser.add_argument("--config", required=True, help="gridmesh/pmu .kv file")
    parser.add_argument("--truth", required=True, help="truth CSV to replay")
    parser.add_argument("--speed", default="1.0",
                        help="realtime factor, or 'max' for no pacing")
    args = parser.parse_args(argv)

    try:
        config = load_pmu_config(args.config)
        truth = TruthSeries.from_csv(args.truth)
        clock = VirtualClock() if args.speed == "max" else WallClock(float(args.speed))
        stats = connect_and_stream(config, truth, clock)
    except (KvFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({
        "frames_sent": stats.frames_sent,
        "frames_dropped": stats.frames_dropped,
        "bytes_sent": stats.bytes_sent,
    }))
    return 0


if __name__ == "__main__":
    sys.exit(main())
