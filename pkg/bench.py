"""Experiment orchestration: microbenchmark, end-to-end fidelity and what-if delay sweep.

Each run writes the job configuration to a scratch directory and spawns the
worker (and either baseline peers or the emulator) as child processes of this
interpreter. Children report through result files that are read back once all
of them have exited.
"""
import json
import logging
import subprocess
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from config import Endpoint, JobConfig, Settings, get_settings, render_job_config
from error_handlers import AcceptanceError, SessionError, UsageError
from models import FidelityReport, MicrobenchResult, OpKind, SweepPoint, SweepResult
from results import (fit_tail_slope, iteration_times, marginal_slope, mean_stddev, read_csv, relative_error)
from worker import ModelSpec, bucketize, effective_bucket_bytes

logger = logging.getLogger(__name__)

MAIN = Path(__file__).resolve().parent / "main.py"
KB = 1024
MB = 1024 * 1024
# 1 GB needs CEMU_MAX_PAYLOAD_BYTES raised above the chunk size
DEFAULT_SIZES = [1 * KB, 4 * KB, 32 * KB, 256 * KB, 2 * MB, 16 * MB, 128 * MB]
MIN_REPETITIONS = 100

FIDELITY_TOLERANCE = 0.05
MICROBENCH_TOLERANCE = 1.05
MICROBENCH_CHECK_FROM = 2 * MB
SLOPE_TOLERANCE = 0.10


class Child:
    """One spawned process with its log file."""

    def __init__(self, name: str, args: Sequence[str], workdir: Path):
        self.name = name
        self.log_path = workdir / f"{name}.log"
        cmd = [sys.executable, str(MAIN), *args]
        logger.debug(f"Spawning {name}: {' '.join(cmd)}")
        self._log = open(self.log_path, "w", encoding="utf-8")
        self.proc = subprocess.Popen(cmd, stdout=self._log, stderr=subprocess.STDOUT, cwd=str(MAIN.parent))

    def wait(self, timeout: float) -> int:
        try:
            return self.proc.wait(timeout=timeout)
        finally:
            self._log.close()

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()
        self._log.close()

    def tail(self, lines: int = 20) -> str:
        try:
            return "\n".join(self.log_path.read_text(encoding="utf-8").splitlines()[-lines:])
        except OSError:
            return ""


class RunDir:
    """Scratch directory of one run: the rendered configuration plus every child's outputs."""

    def __init__(self, root: Path, cfg: JobConfig, label: str):
        self.path = root / label
        self.path.mkdir(parents=True, exist_ok=True)
        self.config = self.path / "job.conf"
        self.config.write_text(render_job_config(cfg), encoding="utf-8")

    def file(self, name: str) -> Path:
        return self.path / name


def _wait_all(children: List[Child], settings: Settings) -> None:
    """Wait for every child, newest first (rank 0); the first failure kills the rest."""
    failed: Optional[Tuple[Child, object]] = None
    for child in reversed(children):
        if failed is not None:
            child.kill()
            continue
        try:
            code = child.wait(settings.child_timeout_s)
        except subprocess.TimeoutExpired:
            child.kill()
            failed = (child, f"timed out after {settings.child_timeout_s}s")
            continue
        if code != 0:
            failed = (child, f"exit code {code}")
    if failed is not None:
        child, why = failed
        raise SessionError(f"{child.name} failed ({why}); last output:\n{child.tail()}")


def _run(children_args: Dict[str, List[str]], run: RunDir, settings: Settings) -> None:
    children: List[Child] = []
    try:
        for name, args in children_args.items():
            children.append(Child(name, args, run.path))
    except OSError:
        for child in children:
            child.kill()
        raise
    _wait_all(children, settings)


def _peer_args(run: RunDir, mode: str, cpu_out: Optional[Path], extra: List[str],
               world_size: int, trace: Optional[str]) -> Dict[str, List[str]]:
    """Arguments of the processes standing in for ranks 1..n-1."""
    common = ["--config", str(run.config)]
    if mode == "emulated":
        args = ["emulator", *common, "--sessions", "1"]
        if cpu_out is not None:
            args += ["--cpu-out", str(cpu_out)]
        if trace:
            args += ["--trace", trace]
        return {"emulator": args}
    peers: Dict[str, List[str]] = {}
    for rank in range(1, world_size):
        args = ["worker", *common, "--rank", str(rank), *extra, "--out", str(run.file(f"peer{rank}.csv"))]
        if rank == 1 and cpu_out is not None:
            args += ["--cpu-out", str(cpu_out)]
        peers[f"peer{rank}"] = args
    return peers


def _check_real_rank(cfg: JobConfig) -> None:
    if sorted(cfg.real_ranks) != [0]:
        raise UsageError("bench runs drive rank 0 as the real node; set real_ranks=0")


def _read_cpu_share(path: Path) -> Optional[float]:
    try:
        return float(json.loads(path.read_text(encoding="utf-8"))["cpu_share"])
    except (OSError, KeyError, ValueError):
        logger.warning(f"No CPU usage recorded at {path}")
        return None


@contextmanager
def _workspace(workdir: Optional[Path]) -> Iterator[Path]:
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
        yield workdir
    else:
        with tempfile.TemporaryDirectory(prefix="cemu-") as tmp:
            yield Path(tmp)


def _connect_args(connect: Optional[Endpoint]) -> List[str]:
    return ["--connect", str(connect)] if connect is not None else []


def run_microbench(cfg: JobConfig, sizes: Sequence[int] = DEFAULT_SIZES, reps: int = MIN_REPETITIONS,
                   warmup: int = 5, modes: Sequence[str] = ("baseline", "emulated"),
                   connect: Optional[Endpoint] = None, settings: Optional[Settings] = None,
                   workdir: Optional[Path] = None, trace: Optional[str] = None) -> List[MicrobenchResult]:
    """
    Time all-reduce and all-gather calls per size against real peers and against the emulator.

    Raises:
        UsageError: If fewer than 100 repetitions or no sizes are requested
        SessionError: If any child process fails
    """
    if reps < MIN_REPETITIONS:
        raise UsageError(f"at least {MIN_REPETITIONS} repetitions are required, got {reps}")
    if not sizes:
        raise UsageError("no message sizes given")
    _check_real_rank(cfg)
    settings = settings or get_settings()
    extra = ["--mode", "microbench", "--sizes", ",".join(str(s) for s in sizes),
             "--reps", str(reps), "--warmup", str(warmup)]

    results: List[MicrobenchResult] = []
    with _workspace(workdir) as root:
        for mode in modes:
            run = RunDir(root, cfg, f"microbench-{mode}")
            out = run.file("rank0.csv")
            children = {} if connect is not None else _peer_args(run, mode, None, extra, cfg.world_size, trace)
            children["rank0"] = ["worker", "--config", str(run.config), "--rank", "0", *extra,
                                 *_connect_args(connect), "--out", str(out)]
            logger.info(f"Microbenchmark ({mode}): {len(sizes)} sizes x {reps} reps")
            _run(children, run, settings)
            for row in read_csv(out):
                results.append(MicrobenchResult(op_kind=OpKind(row["op_kind"]), size_bytes=int(row["size_bytes"]),
                                                mean_us=float(row["mean_us"]), stddev_us=float(row["stddev_us"]),
                                                mode=mode, repetitions=int(row["repetitions"])))
    return results


def _training_run(cfg: JobConfig, model_path: Path, mode: str, root: Path, label: str, settings: Settings,
                  iterations: Optional[int], warmup: Optional[int], connect: Optional[Endpoint],
                  trace: Optional[str] = None) -> Tuple[List[float], Optional[float]]:
    run = RunDir(root, cfg, label)
    extra = ["--mode", "train", "--model", str(model_path)]
    if iterations is not None:
        extra += ["--iters", str(iterations)]
    if warmup is not None:
        extra += ["--warmup", str(warmup)]
    out = run.file("rank0.csv")
    cpu = run.file("cpu.json")
    children = {} if connect is not None else _peer_args(run, mode, cpu, extra, cfg.world_size, trace)
    children["rank0"] = ["worker", "--config", str(run.config), "--rank", "0", *extra,
                         *_connect_args(connect), "--out", str(out)]
    _run(children, run, settings)
    times = iteration_times(read_csv(out))
    if not times:
        raise SessionError(f"{label}: the worker recorded no iterations")
    return times, (None if connect is not None else _read_cpu_share(cpu))


def _write_model(root: Path, model: ModelSpec) -> Path:
    path = root / f"{model.name}.json"
    path.write_text(model.model_dump_json(indent=2), encoding="utf-8")
    return path


def run_e2e_compare(cfg: JobConfig, model: ModelSpec, iterations: Optional[int] = None,
                    warmup: Optional[int] = None, settings: Optional[Settings] = None,
                    workdir: Optional[Path] = None, trace: Optional[str] = None) -> FidelityReport:
    """Run the same training harness against real peers and against the emulator and compare."""
    _check_real_rank(cfg)
    settings = settings or get_settings()
    with _workspace(workdir) as root:
        model_path = _write_model(root, model)
        logger.info(f"End-to-end comparison of {model.name}: baseline run")
        base, base_cpu = _training_run(cfg, model_path, "baseline", root, "e2e-baseline", settings,
                                       iterations, warmup, None)
        logger.info(f"End-to-end comparison of {model.name}: emulated run")
        emu, emu_cpu = _training_run(cfg, model_path, "emulated", root, "e2e-emulated", settings,
                                     iterations, warmup, None, trace)
    base_mean, base_sd = mean_stddev(base)
    emu_mean, emu_sd = mean_stddev(emu)
    report = FidelityReport(model=model.name, iterations=min(len(base), len(emu)),
                            baseline_mean_us=base_mean, baseline_stddev_us=base_sd,
                            emulated_mean_us=emu_mean, emulated_stddev_us=emu_sd,
                            relative_error=relative_error(emu_mean, base_mean),
                            baseline_cpu_share=base_cpu, emulated_cpu_share=emu_cpu)
    logger.info(f"{model.name}: baseline {base_mean:.0f} ± {base_sd:.1f} us, emulated {emu_mean:.0f} ± "
                f"{emu_sd:.1f} us, error {report.relative_error:.2%}")
    return report


def overlap_knee_us(cfg: JobConfig, model: ModelSpec) -> float:
    """Largest backward compute time of any bucket."""
    buckets = bucketize(model, effective_bucket_bytes(cfg, model))
    return max(sum(model.layers[i].backward_us for i in bucket.layers) for bucket in buckets)


def bucket_count(cfg: JobConfig, model: ModelSpec) -> int:
    return sum(1 for b in bucketize(model, effective_bucket_bytes(cfg, model)) if b.nbytes)


def run_whatif_sweep(cfg: JobConfig, model: ModelSpec, delays: Sequence[float], knee_us: Optional[float] = None,
                     iterations: Optional[int] = None, warmup: Optional[int] = None,
                     connect: Optional[Endpoint] = None, settings: Optional[Settings] = None,
                     workdir: Optional[Path] = None, trace: Optional[str] = None) -> SweepResult:
    """
    One emulated training run per injected delay, then a least-squares slope over the tail.

    Raises:
        UsageError: If no delays are given
    """
    if not delays:
        raise UsageError("the delay list is empty")
    if any(d < 0 for d in delays):
        raise UsageError("injected delays must be ≥ 0")
    _check_real_rank(cfg)
    settings = settings or get_settings()
    knee = overlap_knee_us(cfg, model) if knee_us is None else knee_us

    points: List[SweepPoint] = []
    with _workspace(workdir) as root:
        model_path = _write_model(root, model)
        for d in delays:
            run_cfg = cfg.model_copy(update={"delay_inject_us": float(d)})
            logger.info(f"What-if run with {d:g} us injected per call")
            times, _ = _training_run(run_cfg, model_path, "emulated", root, f"whatif-{d:g}", settings,
                                     iterations, warmup, connect, trace)
            mean, sd = mean_stddev(times)
            points.append(SweepPoint(inject_us=float(d), mean_us=mean, stddev_us=sd))
    slope = fit_tail_slope([(p.inject_us, p.mean_us) for p in points], knee)
    logger.info(f"Tail slope past {knee:g} us: {slope if slope is not None else 'undefined'}")
    return SweepResult(points=points, knee_us=knee, slope=slope)


def check_microbench(results: Sequence[MicrobenchResult]) -> List[str]:
    """Emulated calls may cost at most 5% more than baseline calls from 2 MB up."""
    baseline = {(r.op_kind, r.size_bytes): r for r in results if r.mode == "baseline"}
    failures = []
    for r in results:
        if r.mode != "emulated" or r.size_bytes < MICROBENCH_CHECK_FROM:
            continue
        base = baseline.get((r.op_kind, r.size_bytes))
        if base is not None and r.mean_us > MICROBENCH_TOLERANCE * base.mean_us:
            failures.append(f"{r.op_kind.value} {r.size_bytes} B: emulated {r.mean_us:.1f} us exceeds "
                            f"{MICROBENCH_TOLERANCE:g} x baseline {base.mean_us:.1f} us")
    return failures


def check_fidelity(report: FidelityReport) -> List[str]:
    if report.relative_error > FIDELITY_TOLERANCE:
        return [f"{report.model}: relative error {report.relative_error:.2%} above {FIDELITY_TOLERANCE:.0%}"]
    return []


def check_sweep(result: SweepResult, buckets: int) -> List[str]:
    """Tail slope within 10% of the bucket count, and no drop between adjacent delays beyond 2 stddev."""
    failures = []
    if result.slope is not None:
        lo, hi = (1 - SLOPE_TOLERANCE) * buckets, (1 + SLOPE_TOLERANCE) * buckets
        if not lo <= result.slope <= hi:
            failures.append(f"tail slope {result.slope:.3f} outside [{lo:g}, {hi:g}]")
    ordered = sorted(result.points, key=lambda p: p.inject_us)
    for a, b in zip(ordered, ordered[1:]):
        if b.mean_us < a.mean_us - 2 * max(a.stddev_us, b.stddev_us):
            failures.append(f"iteration time drops from {a.mean_us:.0f} us at d={a.inject_us:g} "
                            f"to {b.mean_us:.0f} us at d={b.inject_us:g}")
    head = marginal_slope([(p.inject_us, p.mean_us) for p in ordered], result.knee_us / 2)
    if head is not None and head >= buckets:
        failures.append(f"small-delay slope {head:.3f} not below {buckets}")
    return failures


def enforce(failures: List[str]) -> None:
    if failures:
        for failure in failures:
            logger.error(f"Check failed: {failure}")
        raise AcceptanceError("; ".join(failures))
    logger.info("All checks passed")
