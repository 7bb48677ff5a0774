import math

import pytest

from kmslab.keystore import Design
from kmslab.kmlink import KmConfig
from kmslab.simcore import (
    AppConfig,
    ConfigError,
    ExperimentConfig,
    QkdLinkConfig,
    RunTrace,
    SimOptions,
    run,
)
from kmslab.experiments import (
    Aggregate,
    CollisionStats,
    DEFAULT_BIN_EDGES,
    GroupStats,
    RunStats,
    aggregate_runs,
    apply_overrides,
    bench_plan,
    bin_collisions,
    build_preset,
    execute_plan,
    mean_us_at,
    spearman_rho,
    stats_from_trace,
    write_collision_bins_csv,
    write_timing_csv,
    _base_params,
)


def synthetic_trace(design="single"):
    trace = RunTrace("synthetic", 100, 1, design)
    return trace


def make_stats(timing=None, identity="cfg", run_number=1, **kw):
    defaults = dict(
        label="x",
        run=run_number,
        identity=identity,
        bins=CollisionStats.empty(),
        window_collisions=0,
        window_successes=0,
        timing=timing or {},
        app_count=4,
        deque_count=0,
        deque_reuse=0,
        collision_count=0,
        mirror_ok=True,
        trace_hash=f"h{run_number}",
        issued_hash="i",
    )
    defaults.update(kw)
    return RunStats(**defaults)


def group(durations_us):
    g = GroupStats()
    for d in durations_us:
        g.add(d * 1000.0)
    return g


class TestBinCollisions:
    def test_zero_collisions_zero_percentages(self):
        trace = synthetic_trace()
        for t in range(4):
            trace.attempt(t, "A", "app", 1, 512, 5000, "success")
        stats = bin_collisions(trace)
        assert all(b.percentage == 0.0 for b in stats.bins)

    def test_quarter_percentage(self):
        trace = synthetic_trace()
        for t in range(3):
            trace.attempt(t, "A", "app", 1, 512, 50, "success")
        trace.collision(3, 0xB6, 50)
        stats = bin_collisions(trace)
        target = stats.bin_for(50)
        assert target.percentage == 25.0

    def test_non_single_design_is_empty(self):
        trace = synthetic_trace(design="hash")
        trace.attempt(0, "A", "app", 1, 512, 50, "success")
        trace.collision(1, 1, 50)
        stats = bin_collisions(trace)
        assert all(b.collisions == 0 and b.successes == 0 for b in stats.bins)

    def test_bins_partition_residual_axis(self):
        stats = CollisionStats.empty()
        for residual in (0, 9, 10, 99, 100, 999, 1000, 10**9):
            assert stats.bin_for(residual) is not None
        edges = [b.low for b in stats.bins] + [stats.bins[-1].high]
        assert edges == list(DEFAULT_BIN_EDGES)


class TestAggregateRuns:
    def test_mean_of_two_runs(self):
        stats = [
            make_stats({("hash", 512, 1, 512): group([10.0])}, run_number=1),
            make_stats({("hash", 512, 1, 512): group([20.0])}, run_number=2),
        ]
        agg = aggregate_runs(stats)
        assert agg.timing[("hash", 512, 1, 512)].mean_us == pytest.approx(15.0)

    def test_identical_runs_have_zero_stddev(self):
        stats = [
            make_stats({("hash", 512, 1, 512): group([10.0])}, run_number=k)
            for k in range(50)
        ]
        agg = aggregate_runs(stats)
        assert agg.timing[("hash", 512, 1, 512)].stddev_us == pytest.approx(0.0)

    def test_mixed_configs_rejected(self):
        with pytest.raises(ConfigError):
            aggregate_runs([make_stats(identity="a"), make_stats(identity="b")])

    def test_deque_registry_size_bounds(self):
        # deque count <= distinct requested sizes <= app count
        apps = [
            AppConfig("a0", "master", 64, 4000, start_s=0.2, stop_s=3),
            AppConfig("a1", "slave", 64, 4000, start_s=0.2, stop_s=3),
            AppConfig("a2", "master", 128, 4000, start_s=0.2, stop_s=3),
            AppConfig("a3", "slave", 256, 4000, start_s=0.2, stop_s=3),
        ]
        config = ExperimentConfig(
            label="deque-run",
            quantum=QkdLinkConfig(200_000, 2048, 0, 4),
            km=KmConfig(design=Design.APP_SHARED_DEQUE),
            service=apps,
            sim=SimOptions(park_on_starvation=True),
        )
        trace = run(config)
        stats = stats_from_trace(trace, config)
        distinct_sizes = len({a.packet_size_bytes for a in apps})
        assert stats.deque_count <= 2 * distinct_sizes  # one registry per direction
        assert distinct_sizes <= stats.app_count
        agg = aggregate_runs([stats])
        assert agg.avg_deque_count <= agg.avg_app_count


class TestCsvEmission:
    def test_empty_summary_header_only(self, tmp_path):
        path = write_timing_csv(tmp_path / "t.csv", {})
        assert path.read_bytes() == (
            b"design,requested_size_bits,keys_per_query,default_key_size_bits,"
            b"mean_us,stddev_us,n\r\n"
        )

    def test_two_groups_three_lines(self, tmp_path):
        timing = {
            ("hash", 512, 1, 512): group([10.0, 12.0]),
            ("hash", 1024, 1, 512): group([20.0]),
        }
        path = write_timing_csv(tmp_path / "t.csv", timing)
        assert len(path.read_text().strip().splitlines()) == 3

    def test_reemission_is_byte_identical(self, tmp_path):
        timing = {("queue", 512, 2, 256): group([33.0, 44.0, 55.0])}
        first = write_timing_csv(tmp_path / "a.csv", timing).read_bytes()
        second = write_timing_csv(tmp_path / "b.csv", timing).read_bytes()
        assert first == second

    def test_rows_sorted_by_group_key(self, tmp_path):
        timing = {
            ("queue", 1024, 1, 512): group([1.0]),
            ("hash", 512, 2, 256): group([1.0]),
            ("hash", 512, 1, 256): group([1.0]),
        }
        lines = write_timing_csv(tmp_path / "t.csv", timing).read_text().strip().splitlines()
        assert [l.split(",")[0] for l in lines[1:]] == ["hash", "hash", "queue"]

    def test_collision_csv_layout(self, tmp_path):
        stats = CollisionStats.empty()
        stats.bins[0].collisions = 1
        stats.bins[0].successes = 3
        lines = (
            write_collision_bins_csv(tmp_path / "c.csv", stats).read_text().strip().splitlines()
        )
        assert lines[0] == "bin_low,bin_high,collisions,successes,percentage"
        assert lines[1] == "0,10,1,3,25.0000"
        assert lines[-1].startswith("1000,inf,")

    def test_unwritable_path_raises_with_path(self, tmp_path):
        target = tmp_path / "no" / "csv"
        target.parent.write_text("a file, not a directory")
        with pytest.raises(OSError):
            write_timing_csv(target / "x.csv", {})


class TestSpearman:
    def test_perfect_orderings(self):
        assert spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
        assert spearman_rho([1, 2, 3, 4], [40, 30, 20, 10]) == pytest.approx(-1.0)

    def test_ties_are_rank_averaged(self):
        rho = spearman_rho([1, 2, 2, 3], [1, 2, 3, 4])
        assert 0.8 < rho < 1.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            spearman_rho([1], [1])


class TestSupplyTiming:
    def timing_config(self, link_delay_us=1000):
        km = KmConfig(design=Design.ENC_DEC_HASH, link_delay_us=link_delay_us)
        return ExperimentConfig(
            label="timing",
            quantum=QkdLinkConfig(200_000, 2048, 0, 4),
            km=km,
            service=[
                AppConfig("a", "master", 64, 4000, start_s=0.2, stop_s=3.5),
                AppConfig("b", "slave", 128, 4000, start_s=0.2, stop_s=3.5),
            ],
            sim=SimOptions(park_on_starvation=True),
        )

    def test_durations_positive_and_tagged(self):
        trace = run(self.timing_config())
        assert trace.timings
        for (design, size, number, default, ns) in trace.timings:
            assert design == "hash"
            assert size in (512, 1024)
            assert number == 1
            assert default == 512
            assert ns > 0

    def test_repeat_measurements_same_magnitude(self):
        trace = run(self.timing_config())
        same = [ns for (_d, size, _n, _df, ns) in trace.timings if size == 512]
        assert len(same) > 10
        assert max(same) / min(same) < 500  # no structural drift, host noise only

    def test_duration_excludes_link_round_trip(self):
        # the measured span must not include the sync round trip: with a
        # 50 ms one-way delay an inclusive measurement would exceed 100 ms
        for delay_us in (1000, 50_000):
            trace = run(self.timing_config(link_delay_us=delay_us))
            mean_ns = sum(t[-1] for t in trace.timings) / len(trace.timings)
            assert mean_ns < 10_000_000, f"delay {delay_us}"


class TestPresets:
    def test_all_presets_materialize(self):
        for name in ("table1", "table2", "table3-hash", "table3-queue", "table3-deque"):
            plan = build_preset(name)
            assert plan.points
            config = plan.points[0].build(1)
            assert config.seed == 100
            assert config.run == 1

    def test_table1_draws_come_from_table_sets(self):
        plan = build_preset("table1")
        for run_number in (1, 2, 3, 4, 5):
            config = plan.points[0].build(run_number)
            assert config.quantum.key_rate_bps in (10_000, 50_000, 100_000, 500_000)
            assert config.quantum.key_size_bytes in (1024, 2048, 4096, 8192, 16384, 32768)
            assert len(config.service) in (2, 4, 6, 8, 10, 12)
            shared = {(a.data_rate_bps, a.start_s, a.stop_s) for a in config.service}
            assert len(shared) == 1  # one draw shared by every app in a run

    def test_table2_provisioning_follows_rate_rule(self):
        plan = build_preset("table2")
        point = plan.points[-1]
        config = point.build(3)
        n = len(config.service)
        rate = config.service[0].data_rate_bps
        assert config.quantum.key_rate_bps == round(n * rate * 1.05)

    def test_materialization_is_deterministic(self):
        plan_a = build_preset("table3-hash")
        plan_b = build_preset("table3-hash")
        assert plan_a.points[1].build(7).identity() == plan_b.points[1].build(7).identity()

    def test_axis_override_pins_value(self):
        plan = build_preset("table3-deque", overrides=["km.default_key_size_bytes=128"])
        assert len(plan.points) == 1
        config = plan.points[0].build(1)
        assert config.km.default_key_size_bytes == 128

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError):
            build_preset("table1", overrides=["km.bogus_field=1"])

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError):
            build_preset("table9")

    def test_full_scale_restores_repetition(self):
        assert build_preset("table1", full_scale=True).points[0].repeat_count == 50
        desk = build_preset("table2")
        full = build_preset("table2", full_scale=True)
        assert sum(p.repeat_count for p in desk.points) == 100
        assert sum(p.repeat_count for p in full.points) == 1000

    def test_bench_uses_one_workload_for_all_designs(self):
        plan = bench_plan(["hash", "queue", "deque"], runs_override=1)
        configs = [p.build(1) for p in plan.points]
        apps = [
            [(a.packet_size_bytes, a.data_rate_bps, a.keys_per_query, a.encryption)
             for a in c.service]
            for c in configs
        ]
        assert apps[0] == apps[1] == apps[2]
        assert {c.km.design for c in configs} == {
            Design.ENC_DEC_HASH,
            Design.BYTE_QUEUE,
            Design.APP_SHARED_DEQUE,
        }

    def test_bench_rejects_unknown_design(self):
        with pytest.raises(ConfigError):
            bench_plan(["ring"], runs_override=1)


class TestExecutePlan:
    def test_tiny_plan_round_trip(self):
        plan = build_preset("table1", runs_override=2)
        results = execute_plan(plan)
        agg = results[plan.points[0].label]
        assert agg.runs == 2
        assert len(agg.trace_hashes) == 2

    def test_mean_us_at_pools_groups(self):
        timing = {
            ("hash", 512, 1, 512): group([10.0]),
            ("hash", 512, 2, 512): group([30.0]),
        }
        assert mean_us_at(timing, design="hash", size_bits=512) == pytest.approx(20.0)
        assert mean_us_at(timing, design="queue", size_bits=512) is None
