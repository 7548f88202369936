"""Command-line entry point.

Subcommands:
    worker      run the synthetic training harness (or microbenchmark) as one rank
    emulator    impersonate every emulated rank for the real rank
    microbench  per-call collective timing, baseline vs. emulated
    e2e         end-to-end iteration time comparison, baseline vs. emulated
    whatif      emulated iteration time over a sweep of injected delays
    dag         dump a collective DAG or its boundary projection
"""
import argparse
import asyncio
import json
import logging
import re
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import bench
from collective_dag import build_dag, project_boundary, render_dag, validate_acyclic
from config import Endpoint, get_settings, load_job_config
from emulator import EmulatorServer
from error_handlers import DagError, EmulationError, ProtocolError, UsageError, exit_code_for
from models import OpKind, PlanEntry
from results import (FIDELITY_COLUMNS, MICROBENCH_COLUMNS, SWEEP_COLUMNS, mean_stddev, write_csv,
                     write_trace_csv)
from status_api import status_server
from worker import (WorkerSession, load_model_spec, microbench_plan, run_microbench_loop, run_training_loop,
                    run_verify_loop, training_plan, verify_plan)

logger = logging.getLogger(__name__)

_SIZE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([KMG]?)B?\s*$", re.IGNORECASE)
_UNITS = {"": 1, "K": 1024, "M": 1024 ** 2, "G": 1024 ** 3}
WORKER_COLUMNS = ["op_kind", "size_bytes", "mean_us", "stddev_us", "repetitions"]
VERIFY_COLUMNS = ["trial", "op_kind", "count", "ok"]


def parse_size(text: str) -> int:
    """'4KB' -> 4096, '2MB' -> 2097152, '512' -> 512 (binary units)."""
    match = _SIZE.match(text)
    if not match:
        raise UsageError(f"cannot parse size {text!r}")
    return int(float(match.group(1)) * _UNITS[match.group(2).upper()])


def parse_sizes(text: str) -> List[int]:
    return [parse_size(part) for part in text.split(",") if part.strip()]


def parse_delays(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"cannot parse delay list {text!r}")


def _endpoint(text: Optional[str]) -> Optional[Endpoint]:
    if text is None:
        return None
    try:
        return Endpoint.parse(text)
    except ValueError as e:
        raise UsageError(str(e))


@contextmanager
def cpu_meter(path: Optional[str]) -> Iterator[None]:
    """Record process CPU time over wall time as JSON when `path` is given."""
    cpu0, wall0 = time.process_time(), time.perf_counter()
    try:
        yield
    finally:
        if path:
            cpu, wall = time.process_time() - cpu0, time.perf_counter() - wall0
            Path(path).write_text(json.dumps({"cpu_seconds": cpu, "wall_seconds": wall,
                                              "cpu_share": cpu / wall if wall > 0 else 0.0}), encoding="utf-8")


def cmd_worker(args: argparse.Namespace) -> None:
    cfg = load_job_config(args.config)
    rank = min(cfg.real_ranks) if args.rank is None else args.rank
    if not 0 <= rank < cfg.world_size:
        raise UsageError(f"rank {rank} outside 0..{cfg.world_size - 1}")
    listen_at, connect_to = _endpoint(args.listen), _endpoint(args.connect)
    settings = get_settings()

    with cpu_meter(args.cpu_out):
        if args.mode == "train":
            model = load_model_spec(args.model)
            with WorkerSession(cfg, rank, training_plan(cfg, model), settings, listen_at, connect_to) as session:
                traces = run_training_loop(cfg, model, session, args.iters, args.warmup)
            mean, sd = mean_stddev([t.iteration_time_us for t in traces])
            logger.info(f"Rank {rank} {model.name}: {mean:.0f} ± {sd:.1f} us per iteration over {len(traces)}")
            if args.out:
                write_trace_csv(args.out, traces, args.deterministic)
        elif args.mode == "verify":
            with WorkerSession(cfg, rank, verify_plan(cfg), settings, listen_at, connect_to) as session:
                rows = run_verify_loop(session, args.trials, args.seed)
            if args.out:
                write_csv(args.out, rows, VERIFY_COLUMNS, args.deterministic)
        else:
            sizes = parse_sizes(args.sizes)
            if not sizes:
                raise UsageError("no message sizes given")
            plan = microbench_plan(cfg, sizes)
            with WorkerSession(cfg, rank, plan, settings, listen_at, connect_to) as session:
                rows = run_microbench_loop(session, sizes, args.reps, 5 if args.warmup is None else args.warmup)
            if args.out:
                write_csv(args.out, rows, WORKER_COLUMNS, args.deterministic)


async def _serve_emulator(server: EmulatorServer, status_host: str, status_port: Optional[int]) -> None:
    await server.start()
    status = status_task = None
    if status_port is not None:
        status = status_server(server, status_host, status_port)
        status_task = asyncio.get_running_loop().create_task(status.serve())
    try:
        await server.wait_finished()
    finally:
        if status is not None:
            status.should_exit = True
            await status_task
        await server.stop()


def cmd_emulator(args: argparse.Namespace) -> None:
    cfg = load_job_config(args.config)
    server = EmulatorServer(cfg, get_settings(), _endpoint(args.listen), args.sessions, args.trace)
    with cpu_meter(args.cpu_out):
        asyncio.run(_serve_emulator(server, args.status_host, args.status_port))
    logger.info(f"Emulator served {server.sessions_served} session(s), "
                f"{server.controller.completed} operations completed")
    if server.session_errors:
        raise ProtocolError(f"{len(server.session_errors)} session(s) failed: {server.session_errors[0]}")


def _out(args: argparse.Namespace, default: str) -> Path:
    return Path(args.out or default)


def cmd_microbench(args: argparse.Namespace) -> None:
    cfg = load_job_config(args.config)
    sizes = parse_sizes(args.sizes) if args.sizes else bench.DEFAULT_SIZES
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes or any(m not in ("baseline", "emulated") for m in modes):
        raise UsageError(f"modes must be baseline and/or emulated, got {args.modes!r}")
    results = bench.run_microbench(cfg, sizes, args.reps, args.warmup, modes, _endpoint(args.connect),
                                   workdir=args.workdir, trace=args.trace)
    write_csv(_out(args, "microbench.csv"), [r.model_dump() for r in results], MICROBENCH_COLUMNS,
              args.deterministic)
    if args.check:
        bench.enforce(bench.check_microbench(results))


def cmd_e2e(args: argparse.Namespace) -> None:
    cfg = load_job_config(args.config)
    reports = []
    for source in args.model or ["bert-like"]:
        reports.append(bench.run_e2e_compare(cfg, load_model_spec(source), args.iters, args.warmup,
                                             workdir=args.workdir, trace=args.trace))
    write_csv(_out(args, "e2e.csv"), [r.model_dump() for r in reports], FIDELITY_COLUMNS, args.deterministic)
    if args.check:
        bench.enforce([failure for r in reports for failure in bench.check_fidelity(r)])


def cmd_whatif(args: argparse.Namespace) -> None:
    cfg = load_job_config(args.config)
    model = load_model_spec(args.model)
    result = bench.run_whatif_sweep(cfg, model, parse_delays(args.delays), args.knee_us, args.iters, args.warmup,
                                    _endpoint(args.connect), workdir=args.workdir, trace=args.trace)
    write_csv(_out(args, "whatif.csv"), [p.model_dump() for p in result.points], SWEEP_COLUMNS, args.deterministic)
    slope = "undefined" if result.slope is None else f"{result.slope:.3f}"
    logger.info(f"Fitted tail slope over d > {result.knee_us:g} us: {slope}")
    if args.check:
        bench.enforce(bench.check_sweep(result, bench.bucket_count(cfg, model)))


def cmd_dag(args: argparse.Namespace) -> None:
    if args.config:
        cfg = load_job_config(args.config)
        n, real = cfg.world_size, cfg.real_ranks
    else:
        n, real = args.world_size, frozenset({0})
    if n is None:
        raise UsageError("give --config or --world-size")
    entry = PlanEntry(kind=OpKind(args.kind), nbytes=parse_size(args.nbytes), itemsize=args.itemsize)
    dag = build_dag(entry, n)
    view = project_boundary(dag, real, args.side) if args.project else dag
    report = validate_acyclic(view)
    if not report.ok:
        raise DagError(f"cycle through {report.cycle}")
    text = render_dag(view)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        logger.info(f"Wrote {args.out}")
    else:
        sys.stdout.write(text)


def _common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="job configuration file")
    parser.add_argument("--out", help="output file")
    parser.add_argument("--deterministic", action="store_true", help="omit the timestamp comment from CSV output")


def _bench_common(parser: argparse.ArgumentParser) -> None:
    _common(parser)
    parser.add_argument("--trace", help="emulator event log file")
    parser.add_argument("--check", action="store_true", help="fail with exit code 5 when acceptance checks fail")
    parser.add_argument("--workdir", type=Path, help="keep per-run configs, logs and results here")
    parser.add_argument("--iters", type=int, help="timed iterations (default from the model)")
    parser.add_argument("--warmup", type=int, help="warmup iterations (default from the model)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cemu", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", help="override CEMU_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    worker = sub.add_parser("worker", help="run one rank of the training harness")
    _common(worker)
    worker.add_argument("--rank", type=int, help="rank to run (default: the real rank)")
    worker.add_argument("--mode", choices=["train", "microbench", "verify"], default="train",
                        help="verify checks random collectives against direct computation; all peers must be real")
    worker.add_argument("--model", default="bert-like", help="ModelSpec JSON file or profile name")
    worker.add_argument("--iters", type=int, help="timed iterations (default from the model)")
    worker.add_argument("--warmup", type=int, help="warmup iterations or calls")
    worker.add_argument("--sizes", default=",".join(str(s) for s in bench.DEFAULT_SIZES))
    worker.add_argument("--reps", type=int, default=bench.MIN_REPETITIONS)
    worker.add_argument("--trials", type=int, default=100, help="random trials in verify mode")
    worker.add_argument("--seed", type=int, default=0, help="seed shared by every rank in verify mode")
    worker.add_argument("--listen", help="host:port to accept the predecessor on")
    worker.add_argument("--connect", help="host:port of the successor")
    worker.add_argument("--cpu-out", help="write CPU usage JSON here")
    worker.set_defaults(func=cmd_worker)

    emulator = sub.add_parser("emulator", help="serve every emulated rank")
    _common(emulator)
    emulator.add_argument("--listen", help="host:port (default: endpoint of the real rank's successor)")
    emulator.add_argument("--sessions", type=int, help="exit after this many sessions")
    emulator.add_argument("--trace", help="event log file (default CEMU_TRACE)")
    emulator.add_argument("--status-port", type=int, help="serve the status API on this port")
    emulator.add_argument("--status-host", default="127.0.0.1")
    emulator.add_argument("--cpu-out", help="write CPU usage JSON here")
    emulator.set_defaults(func=cmd_emulator)

    microbench = sub.add_parser("microbench", help="per-call collective timing")
    _bench_common(microbench)
    microbench.add_argument("--sizes", help="comma list, e.g. 1KB,4KB,2MB")
    microbench.add_argument("--reps", type=int, default=bench.MIN_REPETITIONS)
    microbench.set_defaults(warmup=5)
    microbench.add_argument("--modes", default="baseline,emulated")
    microbench.add_argument("--connect", help="target a remote peer instead of spawning one")
    microbench.set_defaults(func=cmd_microbench)

    e2e = sub.add_parser("e2e", help="baseline vs. emulated iteration times")
    _bench_common(e2e)
    e2e.add_argument("--model", action="append", help="ModelSpec file or profile (repeatable)")
    e2e.set_defaults(func=cmd_e2e)

    whatif = sub.add_parser("whatif", help="sweep injected per-call delays")
    _bench_common(whatif)
    whatif.add_argument("--model", default="bert-like")
    whatif.add_argument("--delays", default="0,500,1000,2000,4000,6000,8000,10000", help="µs, comma list")
    whatif.add_argument("--knee-us", type=float, help="overlap knee (default: max per-bucket backward time)")
    whatif.add_argument("--connect", help="target a remote emulator instead of spawning one")
    whatif.set_defaults(func=cmd_whatif)

    dag = sub.add_parser("dag", help="dump a collective DAG")
    _common(dag, config_required=False)
    dag.add_argument("--world-size", type=int)
    dag.add_argument("--kind", choices=[k.value for k in OpKind], default=OpKind.ALLREDUCE.value)
    dag.add_argument("--nbytes", default="1KB")
    dag.add_argument("--itemsize", type=int, default=1)
    dag.add_argument("--project", action="store_true", help="boundary projection instead of the full DAG")
    dag.add_argument("--side", choices=["emulated", "real"], default="emulated")
    dag.set_defaults(func=cmd_dag)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = (args.log_level or get_settings().log_level).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )
    try:
        args.func(args)
    except (EmulationError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
