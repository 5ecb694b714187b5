import logging
from pathlib import Path

import pytest

from collectives import CollectiveAlgorithm, Topology, comm_cost
from compression import CompressorConfig, CompressorKind
from errors import ConfigError, ParsimError, PlacementError
from simulator import (
    CostParams,
    comm_share_breakdown,
    memory_utilization,
    simulate_iteration,
    simulate_run,
    tune_micro_batches,
)
from strategies import Mode, StrategyConfig

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

SINGLE_NODE_THROUGHPUT = {"data_parallel": 3400, "model_parallel": 2800, "hybrid_parallel": 3800}
SINGLE_NODE_COMM_SHARE = {"data_parallel": 0.35, "model_parallel": 0.42, "hybrid_parallel": 0.28}
FOUR_NODE_THROUGHPUT = {"data": 12800, "model": 10500, "hybrid": 14600}


def test_single_device_has_no_communication(topology, plain_costs):
    profile = simulate_iteration(StrategyConfig(), topology, plain_costs, 64)
    assert profile.comm_time == 0.0
    assert profile.wall_time == pytest.approx(64e-3, rel=1e-12)
    assert profile.utilization == pytest.approx(1.0)


def test_two_replicas_without_overlap(topology, plain_costs):
    x = comm_cost(CollectiveAlgorithm.RING, 7e8, 2, topology, stride=1, first_device=0)
    profile = simulate_iteration(StrategyConfig(data_degree=2), topology, plain_costs, 200)
    assert profile.wall_time == pytest.approx(0.1 + x, rel=1e-12)
    assert profile.comm_blocked_time == pytest.approx(x, rel=1e-9)


def test_full_overlap_hides_communication(topology, plain_costs):
    strategy = StrategyConfig(data_degree=2, overlap_fraction=1.0)
    profile = simulate_iteration(strategy, topology, plain_costs, 200)
    assert profile.wall_time == pytest.approx(0.1, rel=1e-12)
    assert profile.comm_share == pytest.approx(0.0, abs=1e-12)
    assert profile.overlapped_time > 0


def test_time_decomposition_adds_up(topology, fitted_costs):
    strategy = StrategyConfig(data_degree=2, tensor_degree=2, pipeline_stages=2, micro_batches=8, overlap_fraction=0.9)
    profile = simulate_iteration(strategy, topology, fitted_costs, 2048)
    assert len(profile.devices) == 8
    for d in profile.devices:
        assert d.total == pytest.approx(profile.wall_time, rel=1e-9)
        assert d.overlapped <= d.busy + 1e-15
    total = profile.compute_time + profile.comm_blocked_time + profile.idle_time
    assert total == pytest.approx(profile.wall_time, rel=1e-9)


def test_more_gradient_bytes_never_helps(topology):
    strategy = StrategyConfig(data_degree=8)
    runs = [
        simulate_run(strategy, topology, CostParams(compute_time_per_sample_per_device=1e-3, gradient_bytes=g), 512)
        for g in (0.0, 1e6, 1e8, 7e8, 2e9)
    ]
    overheads = [r.comm_overhead_ms for r in runs]
    throughputs = [r.throughput for r in runs]
    assert overheads == sorted(overheads)
    assert throughputs == sorted(throughputs, reverse=True)


def test_more_overlap_never_hurts(topology, fitted_costs):
    throughputs = [
        simulate_run(StrategyConfig(data_degree=8, overlap_fraction=f), topology, fitted_costs, 512).throughput
        for f in (0.0, 0.25, 0.5, 0.75, 1.0)
    ]
    assert throughputs == sorted(throughputs)


def test_linear_speedup_without_communication(topology):
    costs = CostParams(compute_time_per_sample_per_device=1e-3)
    report = simulate_run(StrategyConfig(data_degree=4), topology, costs, 64, trace_iterations=1)
    assert report.speedup == pytest.approx(4.0, rel=1e-12)
    assert report.comm_share == 0.0
    assert "grad_allreduce" not in {r.event_kind for r in report.trace}


def test_communication_costs_speedup(topology, plain_costs):
    report = simulate_run(StrategyConfig(data_degree=4), topology, plain_costs, 512)
    assert 1.0 < report.speedup < 4.0
    assert 0.0 < report.comm_share < 1.0


def test_onebit_shrinks_gradient_traffic(topology, plain_costs):
    dense = simulate_run(StrategyConfig(data_degree=8), topology, plain_costs, 512)
    onebit = simulate_run(
        StrategyConfig(data_degree=8, compressor=CompressorConfig(CompressorKind.ONEBIT)), topology, plain_costs, 512
    )
    assert onebit.comm_overhead_ms < dense.comm_overhead_ms / 30
    assert onebit.throughput > dense.throughput


def test_report_metrics_are_in_range(topology, fitted_costs):
    report = simulate_run(StrategyConfig(tensor_degree=4, pipeline_stages=2, micro_batches=4), topology, fitted_costs, 512)
    assert report.throughput > 0
    assert 0.0 <= report.device_utilization <= 1.0
    assert 0.0 <= report.comm_share <= 1.0
    assert 0.0 < report.memory_utilization <= 1.0
    assert 0.0 < report.profile.bubble_fraction < 1.0


def test_async_mode_averages_replica_walls(topology, fitted_costs):
    sync = simulate_iteration(StrategyConfig(data_degree=8), topology, fitted_costs, 512)
    unsync = simulate_iteration(StrategyConfig(data_degree=8, mode=Mode.ASYNC), topology, fitted_costs, 512)
    assert unsync.effective_time < unsync.wall_time
    assert unsync.effective_time < sync.effective_time


def test_too_many_devices_is_a_placement_error(topology, plain_costs):
    with pytest.raises(PlacementError, match=r"data_degree\*tensor_degree\*pipeline_stages = 16"):
        simulate_iteration(StrategyConfig(data_degree=16), topology, plain_costs, 512)


def test_memory_overflow_is_a_placement_error(topology):
    costs = CostParams(compute_time_per_sample_per_device=1e-3, model_state_bytes=5e10)
    assert memory_utilization(StrategyConfig(), costs) > 1.0
    with pytest.raises(PlacementError, match="device memory"):
        simulate_iteration(StrategyConfig(), topology, costs, 64)
    simulate_iteration(StrategyConfig(tensor_degree=2), topology, costs, 64)


def test_stashed_activations_count_towards_memory():
    costs = CostParams(compute_time_per_sample_per_device=1e-3, activation_bytes_per_microbatch=1e12)
    assert memory_utilization(StrategyConfig(micro_batches=8), costs) == pytest.approx(200.0)
    with_tp = costs.with_values(tensor_allreduces_per_microbatch=48)
    assert memory_utilization(StrategyConfig(micro_batches=8), with_tp) == pytest.approx(200.0)
    staged = costs.with_values(pipeline_stage_cost_split=(0.75, 0.25))
    assert memory_utilization(StrategyConfig(pipeline_stages=2, micro_batches=8), staged) == pytest.approx(150.0)


def test_zero_stage_fraction_is_rejected():
    with pytest.raises(ConfigError, match="pipeline_stage_cost_split"):
        CostParams(compute_time_per_sample_per_device=1e-3, pipeline_stage_cost_split=(1.0, 0.0))


def test_bad_preconditions_raise_parsim_errors(topology, fitted_costs):
    with pytest.raises(ParsimError):
        comm_cost(CollectiveAlgorithm.RING, -1.0, 2, topology)
    with pytest.raises(ParsimError):
        tune_micro_batches(StrategyConfig(), topology, fitted_costs, 64, [])
    with pytest.raises(ParsimError):
        comm_share_breakdown({})


def test_uneven_batch_is_padded_with_a_warning(topology, plain_costs, caplog):
    with caplog.at_level(logging.WARNING, logger="simulator"):
        profile = simulate_iteration(StrategyConfig(data_degree=4), topology, plain_costs, 10)
    assert "padded to 12" in caplog.text
    assert profile.compute_time == pytest.approx(3e-3, rel=1e-12)


def test_trace_covers_requested_iterations(topology, fitted_costs):
    strategy = StrategyConfig(pipeline_stages=2, micro_batches=2)
    report = simulate_run(strategy, topology, fitted_costs, 64, iterations=3, trace_iterations=1)
    assert report.trace
    assert {r.iteration for r in report.trace} == {0}
    assert {r.device for r in report.trace} == {0, 1}
    assert all(r.end_s > r.start_s for r in report.trace)
    assert {"forward", "backward", "p2p"} <= {r.event_kind for r in report.trace}


def test_simulation_is_deterministic(topology, fitted_costs):
    strategy = StrategyConfig(data_degree=2, tensor_degree=2, pipeline_stages=2, micro_batches=8, overlap_fraction=0.9)
    first = simulate_run(strategy, topology, fitted_costs, 2048, iterations=2, trace_iterations=1)
    second = simulate_run(strategy, topology, fitted_costs, 2048, iterations=2, trace_iterations=1)
    assert first == second


def test_tune_micro_batches_picks_the_fastest(topology, fitted_costs):
    strategy = StrategyConfig(tensor_degree=4, pipeline_stages=2)
    best, results = tune_micro_batches(strategy, topology, fitted_costs, 512, [8, 1, 2, 4, 4])
    assert sorted(results) == [1, 2, 4, 8]
    assert results[best] == max(results.values())
    with pytest.raises(ValueError):
        tune_micro_batches(strategy, topology, fitted_costs, 512, [])


def test_comm_share_breakdown(topology, fitted_costs):
    profiles = {
        "data": [simulate_iteration(StrategyConfig(data_degree=8), topology, fitted_costs, 512)],
        "solo": [simulate_iteration(StrategyConfig(), topology, fitted_costs, 64)],
    }
    shares = comm_share_breakdown(profiles)
    assert shares["solo"] == 0.0
    assert shares["data"] == pytest.approx(profiles["data"][0].comm_share)
    with pytest.raises(ValueError):
        comm_share_breakdown({})


def _single_node_reports(cfg):
    costs = cfg.resolve_costs(base_dir=CONFIG_DIR)
    return {
        row.name: simulate_run(row.strategy, row.topology, costs, row.global_batch, iterations=3)
        for row in cfg.simulation_rows()
    }


def test_single_node_throughputs(single_node_config):
    reports = _single_node_reports(single_node_config)
    for name, expected in SINGLE_NODE_THROUGHPUT.items():
        assert reports[name].throughput == pytest.approx(expected, rel=0.15), name
    assert (
        reports["hybrid_parallel"].throughput
        > reports["data_parallel"].throughput
        > reports["model_parallel"].throughput
    )
    assert reports["baseline"].speedup == pytest.approx(1.0)


def test_single_node_comm_shares(single_node_config):
    reports = _single_node_reports(single_node_config)
    shares = {name: reports[name].comm_share for name in SINGLE_NODE_COMM_SHARE}
    assert shares["model_parallel"] > shares["data_parallel"] > shares["hybrid_parallel"]
    assert shares["hybrid_parallel"] < 0.33
    for name, expected in SINGLE_NODE_COMM_SHARE.items():
        assert shares[name] == pytest.approx(expected, abs=0.10), name


def test_node_scaling_scaling(scaling_config):
    costs = scaling_config.resolve_costs(base_dir=CONFIG_DIR)
    by_nodes: dict[int, dict[str, float]] = {}
    for row in scaling_config.simulation_rows():
        if row.nodes is None:
            continue
        report = simulate_run(row.strategy, row.topology, costs, row.global_batch)
        by_nodes.setdefault(row.nodes, {})[row.scheme] = report.throughput
    assert sorted(by_nodes) == [1, 2, 3, 4]
    for nodes, tp in by_nodes.items():
        assert tp["hybrid"] > tp["data"] > tp["model"], nodes
    for scheme, expected in FOUR_NODE_THROUGHPUT.items():
        assert by_nodes[4][scheme] == pytest.approx(expected, rel=0.20), scheme


def test_topology_shapes_the_result(fitted_costs):
    strategy = StrategyConfig(data_degree=16)
    one_node = Topology(devices_per_node=16)
    two_nodes = Topology(nodes_per_rack=2)
    fast = simulate_run(strategy, one_node, fitted_costs, 1024)
    slow = simulate_run(strategy, two_nodes, fitted_costs, 1024)
    assert fast.throughput > slow.throughput
