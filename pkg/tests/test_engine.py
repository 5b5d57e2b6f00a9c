import pytest

from ditsim import (
    ArrivalRecord,
    ClusterTopology,
    GreedyPolicy,
    OverheadModel,
    Simulation,
    SimulationError,
    StaticDopPolicy,
    WorkloadSpec,
    default_profile,
    derive_dop_table,
    generate,
    load_profiles,
)
from helpers import assert_no_gpu_overlap, gpu_ownership_intervals, sweep_occupancy


def mono_profile(step=2.0, vae=1.0, candidates=(1,)):
    entries = [
        {"resolution": "r", "dop": 1, "dit_step_seconds": step, "vae_seconds": vae}
    ]
    for dop in candidates[1:]:
        entries.append({"resolution": "r", "dop": dop, "dit_step_seconds": step})
    return load_profiles(
        {"schema": "dit-profile/1", "dop_candidates": list(candidates), "entries": entries}
    )


def run_sim(profile, workload, policy, topo=ClusterTopology(1, 1), overheads=OverheadModel()):
    table = derive_dop_table(profile)
    return Simulation(topo, profile, table, workload, policy, overheads).run()


def greedy_for(profile):
    return GreedyPolicy(derive_dop_table(profile))


class TestSingleRequest:
    def test_one_step_arithmetic(self):
        profile = mono_profile(step=2.0, vae=1.0)
        result = run_sim(profile, [ArrivalRecord(0, 0.0, "r", 1)], greedy_for(profile))
        record = result.requests[0]
        assert record.finish == pytest.approx(3.0, abs=1e-12)
        assert result.cumulative_occupancy == pytest.approx(3.0, abs=1e-12)

    def test_two_burst_requests_run_serially(self):
        profile = mono_profile(step=1.0, vae=1.0)
        workload = [ArrivalRecord(0, 0.0, "r", 1), ArrivalRecord(1, 0.0, "r", 1)]
        result = run_sim(profile, workload, greedy_for(profile))
        assert [r.finish for r in result.requests] == [2.0, 4.0]

    def test_ledger_spans_start_to_finish(self):
        profile = mono_profile()
        result = run_sim(profile, [ArrivalRecord(0, 0.0, "r", 3)], greedy_for(profile))
        record = result.requests[0]
        begin = record.dop_history[0][0]
        assert begin == record.start
        spans = [(b, e) for b, e, _ in _ledger_of(result, 0)]
        assert spans[0][0] == record.start and spans[-1][1] == record.finish
        for (b1, e1), (b2, e2) in zip(spans, spans[1:]):
            assert e1 == b2  # contiguous

    def test_unprofiled_resolution_is_config_error(self):
        profile = mono_profile()
        with pytest.raises(SimulationError, match="unprofiled"):
            run_sim(profile, [ArrivalRecord(0, 0.0, "other", 1)], greedy_for(profile))

    def test_empty_workload_rejected(self):
        profile = mono_profile()
        with pytest.raises(SimulationError):
            run_sim(profile, [], greedy_for(profile))


def _ledger_of(result, request_id):
    # Ledger content equals the reconstructed intervals from the trace.
    return [
        (begin, end, len(gpus))
        for begin, end, gpus in gpu_ownership_intervals(result)[request_id]
    ]


def promotion_profile():
    # dop 2 step 1.0s, dop 4 step 0.6s, shaped so the optimal DoP is 4.
    return load_profiles(
        {
            "schema": "dit-profile/1",
            "dop_candidates": [1, 2, 4],
            "entries": [
                {"resolution": "hi", "dop": 1, "dit_step_seconds": 1.5, "vae_seconds": 0.5},
                {"resolution": "hi", "dop": 2, "dit_step_seconds": 1.0},
                {"resolution": "hi", "dop": 4, "dit_step_seconds": 0.6},
                {"resolution": "blk", "dop": 1, "dit_step_seconds": 0.7, "vae_seconds": 0.05},
                {"resolution": "blk", "dop": 2, "dit_step_seconds": 0.35},
                {"resolution": "blk", "dop": 4, "dit_step_seconds": 0.34},
            ],
        }
    )


class TestPromotion:
    def topo(self):
        return ClusterTopology(1, 4)

    def test_promotion_applies_at_step_boundary_with_overheads(self):
        profile = promotion_profile()
        table = derive_dop_table(profile)
        assert table.dit_dop("hi") == 4 and table.dit_dop("blk") == 2
        workload = [
            ArrivalRecord(0, 0.0, "blk", 1),  # takes {0,1}, finishes quickly
            ArrivalRecord(1, 0.0, "hi", 3),   # takes {2,3}, hungry for 4
        ]
        sim = Simulation(
            self.topo(), profile, table, workload, GreedyPolicy(table), OverheadModel()
        )
        result = sim.run()
        trace = [t for t in result.trace if t.request_id == 1]
        promo = [t for t in trace if t.kind == "promotion"]
        assert len(promo) == 1
        # blk releases {1} at 0.7 (scale-down) and {0} at 0.75; the buddy
        # completion of {2,3} frees up at 0.75, the boundary lands at 1.0.
        assert promo[0].time == pytest.approx(1.0, abs=1e-12)
        assert promo[0].gpu_ids == (0, 1, 2, 3)
        steps = [t.time for t in trace if t.kind == "step_complete"]
        # Steps: 1.0 (dop 2), then promoted steps at 0.002 + 0.6 cadence.
        assert steps[0] == pytest.approx(1.0, abs=1e-12)
        assert steps[1] == pytest.approx(1.602, abs=1e-12)
        assert steps[2] == pytest.approx(2.202, abs=1e-12)

    def test_width_changes_only_at_boundaries(self):
        profile = promotion_profile()
        table = derive_dop_table(profile)
        workload = [
            ArrivalRecord(0, 0.0, "blk", 1),
            ArrivalRecord(1, 0.0, "hi", 3),
        ]
        result = Simulation(
            self.topo(), profile, table, workload, GreedyPolicy(table)
        ).run()
        boundary_times = {
            (t.request_id, t.time)
            for t in result.trace
            if t.kind in ("start", "step_complete", "dit_complete", "vae_complete")
        }
        for record in result.requests:
            for begin, _ in record.dop_history:
                assert (record.request_id, begin) in boundary_times

    def test_dit_complete_emitted_at_final_step_time(self):
        profile = mono_profile(step=1.0, vae=0.5)
        result = run_sim(profile, [ArrivalRecord(0, 0.0, "r", 3)], greedy_for(profile))
        last_step = max(t.time for t in result.trace if t.kind == "step_complete")
        dit = [t for t in result.trace if t.kind == "dit_complete"]
        assert dit[0].time == last_step

    def test_pending_promotion_rescinded_at_dit_complete(self):
        # The hungry request is inside its final step when GPUs free up; the
        # granted promotion can never apply and must flow back to the pool.
        profile = promotion_profile()
        table = derive_dop_table(profile)
        workload = [
            ArrivalRecord(0, 0.0, "blk", 2),  # busy until 1.4 + 0.05
            ArrivalRecord(1, 0.0, "hi", 1),   # single step ends at 1.0 < 1.45
        ]
        sim = Simulation(self.topo(), profile, table, workload, GreedyPolicy(table))
        result = sim.run()
        assert sim.pool.free_gpu_count == 4
        hi = [t for t in result.trace if t.request_id == 1]
        assert all(t.kind != "promotion" for t in hi)
        # Width never exceeded the 2 GPUs the request actually ran on.
        assert max(w for _, w in result.requests[1].dop_history) == 2


class TestDecoupling:
    def test_master_retention_lowest_ids(self):
        profile = load_profiles(
            {
                "schema": "dit-profile/1",
                "dop_candidates": [1, 2, 4],
                "entries": [
                    {"resolution": "r", "dop": 1, "dit_step_seconds": 1.0, "vae_seconds": 2.0},
                    {"resolution": "r", "dop": 2, "dit_step_seconds": 0.5},
                    {"resolution": "r", "dop": 4, "dit_step_seconds": 0.25},
                ],
            }
        )
        policy = StaticDopPolicy(4, decouple_vae=True)
        result = run_sim(
            profile, [ArrivalRecord(0, 0.0, "r", 2)], policy, ClusterTopology(1, 4)
        )
        dit = [t for t in result.trace if t.kind == "dit_complete"][0]
        assert dit.gpu_ids == (0,)
        vae = [t for t in result.trace if t.kind == "vae_complete"][0]
        assert vae.time == pytest.approx(dit.time + 2.0, abs=1e-12)

    def test_decoupled_saves_exactly_width_times_vae(self):
        profile = default_profile()
        workload = [ArrivalRecord(0, 0.0, "360p", 30)]
        mono = run_sim(
            profile, workload, StaticDopPolicy(4), ClusterTopology(1, 8)
        )
        dec = run_sim(
            profile, workload, StaticDopPolicy(4, decouple_vae=True), ClusterTopology(1, 8)
        )
        saving = mono.cumulative_occupancy - dec.cumulative_occupancy
        assert saving == 3 * profile.vae("360p")  # exact: dyadic times


class TestConservation:
    def scenario(self):
        profile = default_profile()
        table = derive_dop_table(profile)
        spec = WorkloadSpec(
            proportions={"144p": 1 / 3, "240p": 1 / 3, "360p": 1 / 3},
            total_requests=24,
            burst=True,
            seed=5,
        )
        return Simulation(
            ClusterTopology(1, 8), profile, table, generate(spec), GreedyPolicy(table)
        )

    def test_occupancy_matches_per_gpu_sweep(self):
        result = self.scenario().run()
        assert result.cumulative_occupancy == pytest.approx(
            sweep_occupancy(result), abs=1e-9
        )

    def test_no_gpu_serves_two_requests(self):
        assert_no_gpu_overlap(self.scenario().run())

    def test_determinism_identical_traces(self):
        a = self.scenario().run()
        b = self.scenario().run()
        assert a.trace == b.trace
        assert a.requests == b.requests

    def test_determinism_multi_node_poisson(self):
        profile = default_profile()
        table = derive_dop_table(profile)
        spec = WorkloadSpec(
            proportions={"144p": 0.2, "240p": 0.3, "360p": 0.5},
            total_requests=40,
            arrival_rate=1.5,
            seed=11,
        )
        records = generate(spec)

        def one_run():
            return Simulation(
                ClusterTopology(2, 8), profile, table, records, GreedyPolicy(table)
            ).run()

        a, b = one_run(), one_run()
        assert a.trace == b.trace
        assert_no_gpu_overlap(a)
        assert a.cumulative_occupancy == pytest.approx(sweep_occupancy(a), abs=1e-9)

    def test_latency_decomposition(self):
        # Reconstruct every step delay from the trace: each step completion
        # sits exactly one step time (plus overheads after a promotion)
        # after the previous boundary.
        profile = default_profile()
        overheads = OverheadModel()
        result = self.scenario().run()
        by_request: dict[int, list] = {}
        for t in result.trace:
            by_request.setdefault(t.request_id, []).append(t)
        for rid, events in by_request.items():
            res = next(r.resolution for r in result.requests if r.request_id == rid)
            prev_time = None
            dop = None
            pending_overhead = 0.0
            for event in events:
                if event.kind == "start":
                    prev_time, dop = event.time, event.dop
                elif event.kind == "promotion":
                    dop = event.dop
                    pending_overhead = (
                        overheads.broadcast_seconds + overheads.scale_up_seconds
                    )
                elif event.kind == "step_complete":
                    expected = prev_time + pending_overhead + profile.dit_step(res, dop)
                    assert event.time == pytest.approx(expected, abs=1e-9)
                    prev_time, pending_overhead = event.time, 0.0
                elif event.kind == "dit_complete":
                    assert event.time == prev_time
                    prev_time = event.time
                elif event.kind == "vae_complete":
                    assert event.time == pytest.approx(
                        prev_time + profile.vae(res), abs=1e-9
                    )


class TestConservationAcrossPolicies:
    def test_every_policy_conserves_and_never_batches(self):
        from ditsim import ClusterPolicy, build_dpci_plan, build_spci_plan

        profile = default_profile()
        table = derive_dop_table(profile)
        topo = ClusterTopology(1, 8)
        mix = {"144p": 1 / 3, "240p": 1 / 3, "360p": 1 / 3}
        spec = WorkloadSpec(
            proportions=mix, total_requests=18, arrival_rate=0.75, seed=6
        )
        records = generate(spec)
        policies = [
            GreedyPolicy(table),
            GreedyPolicy(table, promotion=False),
            StaticDopPolicy(1),
            StaticDopPolicy(2, decouple_vae=True),
            ClusterPolicy(build_spci_plan(topo, mix, 2), False, "spci2"),
            ClusterPolicy(build_dpci_plan(topo, list(mix), table), False, "dpci"),
            ClusterPolicy(build_dpci_plan(topo, list(mix), table), True, "dp"),
        ]
        for policy in policies:
            result = Simulation(topo, profile, table, records, policy).run()
            assert result.cumulative_occupancy == pytest.approx(
                sweep_occupancy(result), abs=1e-9
            ), policy.name
            assert_no_gpu_overlap(result)


class TestRandomizedStress:
    @pytest.mark.parametrize("seed", range(8))
    def test_greedy_invariants_across_random_scenarios(self, seed):
        import numpy as np

        rng = np.random.default_rng(seed)
        profile = default_profile()
        table = derive_dop_table(profile)
        nodes = int(rng.choice([1, 2]))
        per_node = int(rng.choice([4, 8]))
        topo = ClusterTopology(nodes, per_node)
        raw = rng.dirichlet(np.ones(3))
        mix = {
            "144p": float(raw[0]),
            "240p": float(raw[1]),
            "360p": 1.0 - float(raw[0]) - float(raw[1]),
        }
        burst = bool(rng.random() < 0.4)
        spec = WorkloadSpec(
            proportions=mix,
            total_requests=int(rng.integers(5, 36)),
            arrival_rate=None if burst else float(rng.uniform(0.2, 2.0)),
            burst=burst,
            seed=seed,
            denoise_steps=int(rng.integers(1, 31)),
        )
        records = generate(spec)
        sim = Simulation(topo, profile, table, records, GreedyPolicy(table))
        result = sim.run()
        # Pool drained back to fully free.
        assert sim.pool.free_gpu_count == topo.total_gpus
        # Ledger occupancy equals the independent per-GPU sweep.
        assert result.cumulative_occupancy == pytest.approx(
            sweep_occupancy(result), abs=1e-9
        )
        assert_no_gpu_overlap(result)
        # Starts follow arrival order (any free GPU serves any waiter).
        starts = [r.start for r in result.requests]
        assert starts == sorted(starts)
        # Every request's width history stays within its optimal DoP.
        for record in result.requests:
            assert max(w for _, w in record.dop_history) <= table.dit_dop(
                record.resolution
            )


def test_trace_file_format(tmp_path):
    import json

    profile = mono_profile()
    result = run_sim(profile, [ArrivalRecord(0, 0.0, "r", 1)], greedy_for(profile))
    path = tmp_path / "trace.jsonl"
    result.write_trace(path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(result.trace)
    first = json.loads(lines[0])
    assert set(first) == {"time", "kind", "request_id", "gpu_ids", "dop"}
    assert first["kind"] == "arrival"
