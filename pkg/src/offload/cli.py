"""Command line entry point: ``offload daemon|bench|proxy``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

from . import bench
from .client import ServerConfig, connect, servers_from_env
from .daemon import Daemon
from .proxy import FaultProxy, UpstreamUnreachable

log = logging.getLogger("offload")


def _setup_logging(level: str) -> None:
    level = os.environ.get("OFFLOAD_LOG", level)
    logging.basicConfig(level=level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _cmd_daemon(args: argparse.Namespace) -> int:
    d = Daemon(args.listen, args.peer_listen, executors=args.executors, sndbuf=args.sndbuf)
    d.start()
    print(f"listening on {d.address} (peers on {d.peer_address})", flush=True)
    try:
        d.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        d.shutdown()
    return 0


def _parse_servers(text: str) -> list[ServerConfig]:
    parts = [p for p in text.replace(",", ";").split(";") if p.strip()]
    return [ServerConfig.parse(p.strip()) for p in parts]


def _cmd_bench(args: argparse.Namespace) -> int:
    with contextlib.ExitStack() as stack:
        daemons = None
        if args.local:
            daemons = [stack.enter_context(Daemon().start()) for _ in range(args.local)]
            servers = [d.address for d in daemons]
        elif args.servers:
            servers = _parse_servers(args.servers)
        else:
            servers = servers_from_env()
        if not servers:
            print("no servers: pass --servers, --local or set OFFLOAD_SERVERS", file=sys.stderr)
            return 2
        ctx = stack.enter_context(connect(servers))
        iters = args.iters
        try:
            if args.bench == "nop":
                report = bench.bench_nop(ctx, iters or bench.DEFAULT_ITERS, daemons=daemons)
            elif args.bench == "migrate":
                report = bench.bench_migration(ctx, iters or bench.DEFAULT_ITERS, daemons=daemons)
            elif args.bench == "matmul":
                report = bench.bench_matmul(ctx, args.n or 64, iters=iters or 5, daemons=daemons)
            else:
                report = bench.bench_stencil(ctx, args.n or 1024, args.steps, daemons=daemons)
        except bench.BenchError as e:
            print(f"{args.bench}: {e}", file=sys.stderr)
            return 1
        print(report.to_json(), flush=True)
        if args.json:
            report.write(args.json)
    return 0


def _cmd_proxy(args: argparse.Namespace) -> int:
    cuts = [int(x) for x in args.cut_after.split(",") if x.strip()] if args.cut_after else []
    proxy = FaultProxy(args.upstream, args.listen, cut_after=cuts, cut_every=args.cut_every,
                       cut_at=[float(x) for x in args.cut_at.split(",")] if args.cut_at else ())
    try:
        proxy.start()
    except UpstreamUnreachable as e:
        print(str(e), file=sys.stderr)
        return 1
    print(f"proxy {proxy.address} -> {args.upstream}", flush=True)
    try:
        proxy.run()
    except KeyboardInterrupt:
        pass
    finally:
        proxy.stop()
        log.info("cuts at %s", proxy.cut_log)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="offload")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("daemon", help="run a compute daemon")
    p.add_argument("--listen", default="127.0.0.1:7700")
    p.add_argument("--peer-listen", default=None)
    p.add_argument("--executors", type=int, default=1)
    p.add_argument("--sndbuf", type=int, default=None, help="SO_SNDBUF for peer links, bytes")
    p.add_argument("--log-level", dest="sub_log_level", default=None)
    p.set_defaults(func=_cmd_daemon)

    p = sub.add_parser("bench", help="run a benchmark")
    p.add_argument("bench", choices=["nop", "migrate", "matmul", "stencil"])
    p.add_argument("--servers", help="host:port list separated by ';' or ','")
    p.add_argument("--local", type=int, default=0, help="spawn N in-process daemons instead")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--n", type=int, default=None, help="matrix size (matmul) or field length (stencil)")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--json", help="append the report to this JSON-lines file")
    p.add_argument("--log-level", dest="sub_log_level", default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("proxy", help="fault-injecting TCP proxy")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--upstream", required=True)
    p.add_argument("--cut-after", default="", help="cumulative byte offsets, comma separated")
    p.add_argument("--cut-every", type=int, default=None)
    p.add_argument("--cut-at", default="", help="seconds after start, comma separated")
    p.add_argument("--log-level", dest="sub_log_level", default=None)
    p.set_defaults(func=_cmd_proxy)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.sub_log_level or args.log_level)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
