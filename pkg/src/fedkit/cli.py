"""Command-line front end.

Exit codes: 0 success, 1 runtime failure (network, auth, interrupted run),
2 invalid configuration or arguments.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench
from .config import build_scenario, dump_resolved, load_config
from .errors import ConfigError, FedkitError
from .metrics import export_metrics
from .runner import run_client, run_local, run_server
from .sim import run_simulation
from .transport import TOKEN_ENV_VAR


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="server configuration YAML")
    p.add_argument(
        "--client-config",
        action="append",
        default=[],
        metavar="PATH",
        help="per-client YAML (repeatable); merged over the shared client section",
    )


def _add_run_dir_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run-dir", help="directory for metrics, model, and config snapshot")
    p.add_argument("--metrics-format", choices=("csv", "jsonl"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedkit",
        description="Federated learning orchestration: simulate, run, and benchmark.",
        epilog=f"Auth tokens come from the config or the {TOKEN_ENV_VAR} environment variable.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="distributed run over TCP")
    _add_config_args(p)
    p.add_argument("--role", choices=("server", "client", "local"), required=True)
    p.add_argument("--client-id", help="which client to run (role=client)")
    p.add_argument("--host", help="server host override (role=client)")
    p.add_argument("--port", type=int, help="port override")
    p.add_argument("--timeout", type=float, default=None, help="seconds before giving up")
    _add_run_dir_args(p)

    p = sub.add_parser("simulate", help="virtual-clock simulation of the config")
    _add_config_args(p)
    _add_run_dir_args(p)

    p = sub.add_parser("bench-comm", help="round-trip timing for inline vs out-of-band payloads")
    p.add_argument(
        "--sizes",
        default="1024,65536,1048576",
        help="comma-separated payload sizes in bytes",
    )
    p.add_argument("--transports", default="inline,dataref")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("bench-compress", help="codec ratio and timing table")
    p.add_argument(
        "--params",
        default=None,
        help="comma-separated name=param_count pairs (default: built-in ladder)",
    )
    p.add_argument(
        "--codecs",
        default=None,
        help=f"comma-separated codec names from: {','.join(bench.DEFAULT_BENCH_CODECS)}",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("report-utilization", help="utilization and Gantt CSVs for a run")
    p.add_argument("--run-dir", help="run directory holding config.yaml")
    p.add_argument("--config", help="config file (alternative to --run-dir)")
    p.add_argument("--out-dir", help="where to write the CSVs (default: next to the source)")

    p = sub.add_parser("validate-config", help="parse and validate without running")
    _add_config_args(p)
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config, args.client_config)
    if args.role == "server":
        out = run_server(
            cfg,
            run_dir=args.run_dir,
            port=args.port,
            timeout=args.timeout,
            metrics_format=args.metrics_format,
        )
        print(f"run complete: epoch={out.epoch} updates={out.updates_processed}")
        if out.run_dir:
            print(f"outputs in {out.run_dir}")
        return 0
    if args.role == "client":
        if not args.client_id:
            print("--client-id is required with --role client", file=sys.stderr)
            return 2
        rounds = run_client(cfg, args.client_id, host=args.host, port=args.port)
        print(f"client {args.client_id} finished after {rounds} rounds")
        return 0
    out = run_local(
        cfg,
        run_dir=args.run_dir,
        timeout=args.timeout if args.timeout is not None else 300.0,
        metrics_format=args.metrics_format,
    )
    print(f"run complete: epoch={out.epoch} updates={out.updates_processed}")
    if out.run_dir:
        print(f"outputs in {out.run_dir}")
    return 0


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.client_config)
    result = run_simulation(build_scenario(cfg))
    report = result.utilization
    print(
        f"simulated: epoch={result.epoch} updates={result.updates_processed} "
        f"virtual_time={result.virtual_time:.3f}s "
        f"mean_utilization={report.mean_utilization:.3f}"
    )
    for cid in sorted(report.per_client):
        print(f"  {cid}: utilization={report.per_client[cid].utilization:.3f}")
    tail = [m for m in result.metrics if m.kind.startswith("val_")][-2:]
    for m in tail:
        print(f"  final {m.kind}={m.value:.4f}")
    if args.run_dir:
        run_dir = Path(args.run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        dump_resolved(cfg, run_dir / "config.yaml")
        suffix = "jsonl" if args.metrics_format == "jsonl" else "csv"
        export_metrics(result.metrics, args.metrics_format, run_dir / f"metrics.{suffix}")
        bench._write_csv(
            run_dir / "utilization.csv",
            bench.UTILIZATION_COLUMNS,
            [
                [cid, u.compute_seconds, u.total_seconds, u.utilization]
                for cid, u in sorted(report.per_client.items())
            ],
        )
        bench._write_csv(
            run_dir / "gantt.csv",
            bench.GANTT_COLUMNS,
            [[g.client_id, g.start, g.end, g.kind] for g in report.gantt],
        )
        print(f"outputs in {run_dir}")
    return 0


def _parse_sizes(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad size list {text!r}; expected comma-separated integers") from None


def _cmd_bench_comm(args) -> int:
    rows = bench.bench_comm(
        sizes=_parse_sizes(args.sizes),
        transports=tuple(t.strip() for t in args.transports.split(",") if t.strip()),
        trials=args.trials,
        out_path=args.out,
    )
    for r in rows:
        print(
            f"{r['payload_bytes']:>12} B  {r['transport']:<8} "
            f"mean={r['mean_seconds'] * 1e3:.3f} ms  std={r['std_seconds'] * 1e3:.3f} ms"
        )
    print(f"wrote {args.out}")
    return 0


def _parse_param_counts(text):
    if text is None:
        return None
    out = {}
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        if "=" in piece:
            name, _, count = piece.partition("=")
        else:
            name, count = piece, piece
        try:
            out[name] = int(count)
        except ValueError:
            raise ConfigError(f"bad param count {piece!r}; use name=count") from None
    return out or None


def _parse_codecs(text):
    if text is None:
        return None
    out = {}
    for name in (s.strip() for s in text.split(",")):
        if not name:
            continue
        if name not in bench.DEFAULT_BENCH_CODECS:
            raise ConfigError(
                f"unknown codec {name!r}; known: {sorted(bench.DEFAULT_BENCH_CODECS)}"
            )
        out[name] = bench.DEFAULT_BENCH_CODECS[name]
    return out or None


def _cmd_bench_compress(args) -> int:
    rows = bench.bench_compress(
        param_counts=_parse_param_counts(args.params),
        codecs=_parse_codecs(args.codecs),
        out_path=args.out,
        seed=args.seed,
    )
    for r in rows:
        print(
            f"{r['model']:<10} {r['codec']:<12} {r['original_bytes']:>12} -> "
            f"{r['compressed_bytes']:>12} B  ratio={r['ratio']:.2f}"
        )
    print(f"wrote {args.out}")
    return 0


def _cmd_report_utilization(args) -> int:
    if bool(args.run_dir) == bool(args.config):
        print("give exactly one of --run-dir or --config", file=sys.stderr)
        return 2
    source = args.run_dir or args.config
    report = bench.report_utilization(source, out_dir=args.out_dir)
    for cid in sorted(report.per_client):
        u = report.per_client[cid]
        print(f"{cid}: compute={u.compute_seconds:.3f}s total={u.total_seconds:.3f}s "
              f"utilization={u.utilization:.3f}")
    return 0


def _cmd_validate_config(args) -> int:
    cfg = load_config(args.config, args.client_config)
    print(
        f"config OK: aggregator={cfg.aggregator} scheduler={cfg.scheduler} "
        f"epochs={cfg.num_global_epochs} clients={len(cfg.clients)}"
    )
    for plan in cfg.clients:
        bits = [f"dataset={plan.dataset_name}", f"steps={plan.train.local_steps}"]
        if plan.privacy and plan.privacy.enabled:
            bits.append(f"epsilon={plan.privacy.epsilon}")
        if plan.codec is not None:
            bits.append(f"codec={plan.codec.lossy}+{plan.codec.lossless}")
        print(f"  {plan.client_id}: " + " ".join(bits))
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "simulate": _cmd_simulate,
    "bench-comm": _cmd_bench_comm,
    "bench-compress": _cmd_bench_compress,
    "report-utilization": _cmd_report_utilization,
    "validate-config": _cmd_validate_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FedkitError, ConnectionError, TimeoutError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
