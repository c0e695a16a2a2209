# pyright: reportUndefinedVariable=false
"""End to end acceptance checks.

These tests are marked `slow`; deselect them with `-m "not slow"`.

1. Annealing against exhaustive search on small random instances.

2. Exact model identities over many random instances.

3. Model cost versus simulated time on a 64 host, 2 rack topology.

4. Cost spread of random orders & the solved order's simulated time.

5. Repeated loopback probing.

6. Determinism of every seeded entry point.

Author: Andrew Ridyard.

License: GNU General Public License v3 or later.

Copyright (C): 2025."""

import numpy as np
import pytest

pytestmark = pytest.mark.slow

TRIALS = 100


@pytest.mark.parametrize(
    "algorithm, n",
    [("ring", 4), ("ring", 6), ("ring", 8), ("hd", 4), ("hd", 8)],
)
def test_anneal_matches_brute_force(
    make_matrix, algorithm: str, n: int
) -> None:
    """Test annealing is within 5% of the optimum on 95% of instances."""
    from rankweave.cost import CollectiveSpec
    from rankweave.solver import SolverConfig, anneal, brute_force

    spec = CollectiveSpec(algorithm, n, 1e6)
    hits = 0
    for trial in range(TRIALS):
        matrix = make_matrix(n, seed=100 + trial)
        exact = brute_force(matrix, spec).cost
        approx = anneal(matrix, spec, SolverConfig(seed=trial)).cost
        assert approx >= exact
        hits += approx <= 1.05 * exact
    assert hits >= 0.95 * TRIALS


def test_model_identities(make_matrix) -> None:
    """Test BCube(B=2) = halving doubling, ring rotations & schedules."""
    from rankweave.core import RankOrder
    from rankweave.cost import CollectiveSpec, evaluate, schedule_cost

    rng = np.random.default_rng(2024)
    for trial in range(1000):
        n = int(2 ** rng.integers(1, 6))
        matrix = make_matrix(n, seed=trial)
        order = RankOrder(tuple(int(p) for p in rng.permutation(n)))
        size = float(rng.uniform(1.0, 1e6))
        hd = CollectiveSpec("hd", n, size)
        bcube = CollectiveSpec("bcube", n, size, bcube_b=2)
        assert evaluate(matrix, order, bcube) == evaluate(matrix, order, hd)

    for trial in range(100):
        n = int(rng.integers(2, 17))
        matrix = make_matrix(n, seed=trial)
        order = RankOrder(tuple(int(p) for p in rng.permutation(n)))
        ring = CollectiveSpec("ring", n, float(rng.uniform(1.0, 1e6)))
        costs = {evaluate(matrix, order.rotated(k), ring) for k in range(n)}
        assert len(costs) == 1

    for n in (2, 4, 8, 16):
        for trial in range(100):
            matrix = make_matrix(n, seed=trial)
            order = RankOrder(tuple(int(p) for p in rng.permutation(n)))
            for algorithm in ("ring", "hd", "dbt", "bcube"):
                spec = CollectiveSpec(algorithm, n, 1024.0)
                assert schedule_cost(matrix, order, spec) == evaluate(
                    matrix, order, spec
                )


def test_ring_ordering_preserved(two_rack_topology) -> None:
    """Test model cost ranks random ring orders like simulated time."""
    from rankweave.cost import CollectiveSpec
    from rankweave.topology import validate_topology

    spec = CollectiveSpec("ring", two_rack_topology.n, 1e6)
    report = validate_topology(two_rack_topology, spec, 50, seed=1)
    assert report.correlation is not None
    assert report.correlation >= 0.7


def test_halving_doubling_ordering_preserved(two_rack_topology) -> None:
    """Test model cost ranks random halving doubling orders like time.

    A small message keeps every round latency bound; with megabyte
    messages uplink sharing dominates the simulated time instead.
    """
    from rankweave.cost import CollectiveSpec
    from rankweave.topology import validate_topology

    spec = CollectiveSpec("hd", two_rack_topology.n, 100.0)
    report = validate_topology(two_rack_topology, spec, 50, seed=1)
    assert report.correlation is not None
    assert report.correlation >= 0.5


def test_spread_and_solved_order(two_rack_topology) -> None:
    """Test random orders vary widely & the solved order beats most."""
    from rankweave.cost import CollectiveSpec
    from rankweave.solver import SolverConfig, anneal
    from rankweave.topology import (
        generate_matrix,
        sample_cost_distribution,
        validate_topology,
    )

    matrix = generate_matrix(two_rack_topology)
    spec = CollectiveSpec("ring", matrix.n, 1e6)
    stats = sample_cost_distribution(matrix, spec, 500, seed=3)
    assert stats.spread >= 2.0

    solved = anneal(matrix, spec, SolverConfig(budget=30.0, seed=3))
    assert solved.cost < stats.min

    report = validate_topology(
        two_rack_topology, spec, 500, seed=3, solved=solved.order
    )
    assert report.solved_percentile <= 10.0


@pytest.mark.asyncio
async def test_repeated_loopback_probing(echo_agents) -> None:
    """Test repeated 1000 probe runs agree within 50%."""
    from rankweave.prober import ProbeConfig, build_cost_matrix

    config = ProbeConfig(probes_per_pair=1000)
    first = await build_cost_matrix(echo_agents, config)
    second = await build_cost_matrix(echo_agents, config)

    assert first.is_symmetric() and second.is_symmetric()
    a, b = first.rtt[0, 1], second.rtt[0, 1]
    assert abs(a - b) <= 0.5 * max(a, b)


def test_seeded_entry_points_are_deterministic(two_rack_topology) -> None:
    """Test two runs with the same seed give bit-identical outputs."""
    from rankweave.cost import CollectiveSpec
    from rankweave.solver import SolverConfig, anneal
    from rankweave.topology import (
        generate_matrix,
        sample_cost_distribution,
        stratified_orders,
        validate_topology,
    )

    first = generate_matrix(two_rack_topology)
    second = generate_matrix(two_rack_topology)
    np.testing.assert_array_equal(first.rtt, second.rtt)

    spec = CollectiveSpec("ring", first.n, 1e4)
    config = SolverConfig(seed=11, restarts=2, max_evaluations=5_000)
    assert anneal(first, spec, config) == anneal(second, spec, config)

    assert sample_cost_distribution(
        first, spec, 100, seed=4
    ) == sample_cost_distribution(second, spec, 100, seed=4)
    np.testing.assert_array_equal(
        stratified_orders(first, spec, 100, seed=4),
        stratified_orders(second, spec, 100, seed=4),
    )

    reports = [
        validate_topology(two_rack_topology, spec, 20, seed=4).to_json()
        for _ in range(2)
    ]
    assert reports[0] == reports[1]
