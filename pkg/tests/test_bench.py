import pytest

from bench import (DEFAULT_SIZES, bucket_count, check_fidelity, check_microbench, check_sweep, enforce,
                   overlap_knee_us, run_e2e_compare, run_microbench, run_whatif_sweep)
from error_handlers import AcceptanceError, UsageError
from models import FidelityReport, MicrobenchResult, OpKind, SweepPoint, SweepResult
from worker import PROFILES, LayerSpec, ModelSpec

MB = 1024 * 1024


def result(mode, size, mean, kind=OpKind.ALLREDUCE):
    return MicrobenchResult(op_kind=kind, size_bytes=size, mean_us=mean, stddev_us=1.0, mode=mode, repetitions=100)


def report(error):
    return FidelityReport(model="m", iterations=60, baseline_mean_us=100.0, baseline_stddev_us=1.0,
                          emulated_mean_us=100.0 * (1 + error), emulated_stddev_us=1.0, relative_error=error)


def test_default_sizes_span_kilobytes_to_megabytes():
    assert DEFAULT_SIZES[0] == 1024
    assert DEFAULT_SIZES == sorted(DEFAULT_SIZES)


def test_microbench_check_ignores_small_messages():
    results = [result("baseline", 1024, 10.0), result("emulated", 1024, 50.0),
               result("baseline", 2 * MB, 100.0), result("emulated", 2 * MB, 104.0),
               result("baseline", 16 * MB, 100.0, OpKind.ALLGATHER),
               result("emulated", 16 * MB, 106.0, OpKind.ALLGATHER)]
    failures = check_microbench(results)
    assert len(failures) == 1
    assert failures[0].startswith("allgather 16777216 B")


def test_fidelity_check():
    assert check_fidelity(report(0.049)) == []
    assert "above 5%" in check_fidelity(report(0.08))[0]


def sweep(points, knee, slope):
    return SweepResult(points=[SweepPoint(inject_us=d, mean_us=m, stddev_us=s) for d, m, s in points],
                       knee_us=knee, slope=slope)


def test_sweep_check_accepts_a_clean_curve():
    points = [(0, 10000, 50), (500, 10050, 50), (1000, 10100, 50), (4000, 14000, 50), (8000, 30000, 50)]
    assert check_sweep(sweep(points, 2000, 4.1), buckets=4) == []


def test_sweep_check_flags_slope_drops_and_steep_start():
    assert "tail slope" in check_sweep(sweep([(0, 1, 0), (10, 2, 0)], 5, 3.0), buckets=4)[0]

    dropping = [(0, 10000, 10), (1000, 9000, 10), (5000, 20000, 10)]
    assert any("drops" in f for f in check_sweep(sweep(dropping, 2000, None), buckets=4))

    steep = [(0, 10000, 10), (500, 12500, 10), (1000, 15000, 10)]
    assert any("small-delay slope" in f for f in check_sweep(sweep(steep, 2000, None), buckets=4))


def test_enforce_raises_on_failures():
    enforce([])
    with pytest.raises(AcceptanceError, match="one; two"):
        enforce(["one", "two"])


def test_knee_and_bucket_count(make_config):
    cfg = make_config(4)
    model = PROFILES["bert-like"]
    assert overlap_knee_us(cfg, model) == 2000.0
    assert bucket_count(cfg, model) == 4
    assert bucket_count(cfg, PROFILES["small"]) == 1


def test_bench_usage_errors(make_config, tmp_path):
    cfg = make_config(2)
    with pytest.raises(UsageError, match="100 repetitions"):
        run_microbench(cfg, [1024], reps=10, workdir=tmp_path)
    with pytest.raises(UsageError, match="no message sizes"):
        run_microbench(cfg, [], workdir=tmp_path)
    with pytest.raises(UsageError, match="real_ranks=0"):
        run_microbench(make_config(2, "1"), [1024], workdir=tmp_path)
    with pytest.raises(UsageError, match="empty"):
        run_whatif_sweep(cfg, PROFILES["small"], [], workdir=tmp_path)
    with pytest.raises(UsageError):
        run_whatif_sweep(cfg, PROFILES["small"], [100, -1], workdir=tmp_path)


def tiny_model():
    return ModelSpec(name="tiny", layers=[LayerSpec(forward_us=200, backward_us=400, grad_bytes=4096)] * 2,
                     bucket_bytes=4096)


@pytest.mark.slow
def test_microbench_runs_both_modes(make_config, test_settings, tmp_path):
    results = run_microbench(make_config(2), [1024, 4096], reps=100, warmup=1, settings=test_settings,
                             workdir=tmp_path)
    assert {(r.mode, r.op_kind, r.size_bytes) for r in results} == {
        (mode, kind, size) for mode in ("baseline", "emulated")
        for kind in (OpKind.ALLREDUCE, OpKind.ALLGATHER) for size in (1024, 4096)}
    assert all(r.mean_us > 0 for r in results)


@pytest.mark.slow
def test_e2e_compare_reports_both_runs(make_config, test_settings, tmp_path):
    rep = run_e2e_compare(make_config(2), tiny_model(), iterations=20, warmup=2, settings=test_settings,
                          workdir=tmp_path)
    assert rep.iterations == 20
    compute = tiny_model().compute_us - 20
    assert rep.baseline_mean_us >= compute and rep.emulated_mean_us >= compute
    assert rep.emulated_cpu_share is not None


@pytest.mark.slow
def test_whatif_sweep_grows_with_injected_delay(make_config, test_settings, tmp_path):
    res = run_whatif_sweep(make_config(2), tiny_model(), [0, 20000], iterations=10, warmup=2,
                           settings=test_settings, workdir=tmp_path)
    assert [p.inject_us for p in res.points] == [0.0, 20000.0]
    assert res.points[1].mean_us > res.points[0].mean_us + 20000


@pytest.mark.slow
def test_emulated_calls_cost_no_more_than_baseline_from_2mb(make_config, test_settings, tmp_path):
    results = run_microbench(make_config(2), [2 * MB, 16 * MB], reps=100, warmup=5, settings=test_settings,
                             workdir=tmp_path)
    assert {r.mode for r in results} == {"baseline", "emulated"}
    assert check_microbench(results) == []


@pytest.mark.slow
@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_emulated_training_time_matches_baseline(make_config, test_settings, tmp_path, profile):
    rep = run_e2e_compare(make_config(2), PROFILES[profile], iterations=50, warmup=10, settings=test_settings,
                          workdir=tmp_path)
    assert rep.iterations == 50
    assert check_fidelity(rep) == []


@pytest.mark.slow
def test_whatif_tail_slope_tracks_the_bucket_count(make_config, test_settings, tmp_path):
    cfg = make_config(2)
    model = PROFILES["bert-like"]
    res = run_whatif_sweep(cfg, model, [0, 500, 1000, 4000, 6000, 8000, 10000], iterations=50, warmup=10,
                           settings=test_settings, workdir=tmp_path)
    assert res.knee_us == 2000.0
    assert res.slope is not None
    assert check_sweep(res, bucket_count(cfg, model)) == []
