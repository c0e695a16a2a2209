"""Synthetic datacenter topologies, a flow simulator & validation statistics.

A `TopologySpec` describes a tree of switches from the leaf (rack) level
upward. From it `generate_matrix` derives an RTT matrix with hierarchical
locality, and `simulate_collective` runs an expanded collective schedule
over a shared-link flow model which is independent of the cost model.
Comparing the two (`spearman`, `validate_topology`) shows how well the cost
model preserves the ordering of real completion times.

Bandwidth model: every transfer of a round uses the links on its path up to
the lowest common ancestor switch and back down. A link's bandwidth is
divided by the oversubscription ratio of its level and shared equally
between the transfers of the round using it; a transfer runs at the rate of
its slowest link. There is no water-filling.

Author: Andrew Ridyard.

License: GNU General Public License v3 or later.

Copyright (C): 2025.
"""

import logging
import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from scipy import stats

from .core import (
    DEFAULT_SEED,
    ConfigurationError,
    CostMatrix,
    MatrixError,
    RankOrder,
    TopologyError,
    UndefinedCorrelationError,
    _read_json,
    _write_json,
    default_hosts,
)
from .cost import (
    CollectiveSpec,
    Schedule,
    evaluate,
    evaluate_many,
    expand_schedule,
)

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Level:
    """One switch level, counted from the leaf (rack) level upward.

    Attributes:
        fanout: Children per switch at this level.

        latency_us: One-way latency of a hop onto this level (µs).

        bandwidth_Bpus: Link bandwidth of this level (bytes/µs).

        oversub: Oversubscription ratio (>= 1) applied to the bandwidth.
    """

    fanout: int
    latency_us: float
    bandwidth_Bpus: float
    oversub: float = 1.0

    def __post_init__(self) -> None:
        """Validate the level.

        Raises:
            TopologyError: On a nonpositive fanout, latency or bandwidth, or
                an oversubscription ratio below 1.
        """
        if self.fanout < 1:
            raise TopologyError(f"Fanout must be >= 1, got {self.fanout}")
        if not self.latency_us > 0:
            raise TopologyError("Hop latency must be > 0")
        if not self.bandwidth_Bpus > 0:
            raise TopologyError("Link bandwidth must be > 0")
        if not self.oversub >= 1:
            raise TopologyError("Oversubscription ratio must be >= 1")

    @property
    def effective_bandwidth(self) -> float:
        """Bandwidth after oversubscription."""
        return self.bandwidth_Bpus / self.oversub


@dataclass(frozen=True)
class TopologySpec:
    """A hierarchical topology; `N` is the product of all fanouts."""

    levels: tuple[Level, ...]
    jitter: float = 0.0
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        """Validate levels & jitter.

        Raises:
            TopologyError: If there are no levels or jitter is not in
                `[0, 1)`.
        """
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise TopologyError("Topology needs at least one level")
        if not 0 <= self.jitter < 1:
            raise TopologyError(f"Jitter must be in [0, 1), got {self.jitter}")

    @property
    def n(self) -> int:
        """Number of hosts."""
        return math.prod(level.fanout for level in self.levels)

    def to_json(self) -> dict[str, Any]:
        """Topology JSON document."""
        return {
            "levels": [
                {
                    "fanout": level.fanout,
                    "latency_us": level.latency_us,
                    "bandwidth_Bpus": level.bandwidth_Bpus,
                    "oversub": level.oversub,
                }
                for level in self.levels
            ],
            "jitter": self.jitter,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, document: Any) -> "TopologySpec":
        """Parse a topology JSON document.

        Raises:
            TopologyError: If the document does not follow the format.
        """
        try:
            levels = tuple(
                Level(
                    fanout=int(level["fanout"]),
                    latency_us=float(level["latency_us"]),
                    bandwidth_Bpus=float(level["bandwidth_Bpus"]),
                    oversub=float(level.get("oversub", 1.0)),
                )
                for level in document["levels"]
            )
            return cls(
                levels,
                jitter=float(document.get("jitter", 0.0)),
                seed=int(document.get("seed", DEFAULT_SEED)),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise TopologyError(f"Invalid topology document ({e})") from e


def load_topology(path: Union[str, Path]) -> TopologySpec:
    """Read a topology JSON file.

    Raises:
        TopologyError: If the file is not valid topology JSON.
    """
    try:
        document = _read_json(path)
    except MatrixError as e:
        raise TopologyError(str(e)) from e
    return TopologySpec.from_json(document)


def save_topology(path: Union[str, Path], topology: TopologySpec) -> None:
    """Write a topology JSON file."""
    _write_json(path, topology.to_json())


def _subtree_sizes(topology: TopologySpec) -> np.ndarray:
    # hosts under one switch of each level
    return np.cumprod([level.fanout for level in topology.levels])


def _lca_levels(topology: TopologySpec) -> np.ndarray:
    n = topology.n
    hosts = np.arange(n)
    sizes = _subtree_sizes(topology)
    lca = np.full((n, n), len(sizes) - 1, dtype=np.intp)
    for k in reversed(range(len(sizes))):
        group = hosts // sizes[k]
        lca[group[:, None] == group[None, :]] = k
    return lca


def generate_matrix(
    topology: TopologySpec, n: Optional[int] = None
) -> CostMatrix:
    """RTT matrix of a synthetic topology.

    `rtt[i][j]` is twice the sum of the hop latencies from a host up to the
    lowest common ancestor level of `i` & `j`, each hop scaled by
    `1 + U[0, jitter)`. Jitter is drawn once per pair & hop from the
    topology seed and the matrix is symmetric.

    Args:
        topology: Topology description.

        n: Expected host count.

    Raises:
        TopologyError: If `n` is given and differs from the fanout product.
    """
    if n is not None and n != topology.n:
        raise TopologyError(
            f"Fanout product {topology.n} does not match N={n}"
        )
    size = topology.n
    depth = len(topology.levels)
    latency = np.array([level.latency_us for level in topology.levels])
    rng = np.random.default_rng(topology.seed)
    noise = np.ones((size, size, depth))
    if topology.jitter > 0:
        noise += rng.uniform(0.0, topology.jitter, size=(size, size, depth))

    lca = _lca_levels(topology)
    hops = np.arange(depth)[None, None, :] <= lca[:, :, None]
    rtt = 2.0 * np.where(hops, latency * noise, 0.0).sum(axis=2)
    rtt = np.triu(rtt, 1)
    rtt = rtt + rtt.T
    _logger.debug(f"Generated {size}x{size} matrix from {depth} levels")
    return CostMatrix(default_hosts(size), rtt)


# ------ Flow simulation ------ #


class Fabric:
    """A topology instantiated for simulation.

    Holds the generated RTT matrix & the path of every host pair so that
    many orders can be simulated against the same fabric.
    """

    def __init__(self, topology: TopologySpec) -> None:
        """Initialises `Fabric`.

        Args:
            topology: Topology description.
        """
        self.topology = topology
        self.matrix = generate_matrix(topology)
        self._lca = _lca_levels(topology)
        self._units = np.concatenate(([1], _subtree_sizes(topology)[:-1]))
        self._rates = [level.effective_bandwidth for level in topology.levels]

    @property
    def n(self) -> int:
        """Number of hosts."""
        return self.topology.n

    def links(self, src: int, dst: int) -> list[tuple[int, int, str]]:
        """Links used between two hosts as `(level, unit, direction)`.

        Level `k` links connect a level `k - 1` subtree (a host for `k = 0`)
        to its level `k` switch.
        """
        if src == dst:
            return []
        top = int(self._lca[src, dst])
        path = []
        for k in range(top + 1):
            unit = int(self._units[k])
            path.append((k, src // unit, "up"))
            path.append((k, dst // unit, "down"))
        return path

    def round_durations(
        self, transfers: Sequence[tuple[int, int, float]]
    ) -> list[float]:
        """Durations of one round of `(src_host, dst_host, nbytes)` transfers.

        Each duration is `rtt / 2` plus the bytes over the transfer's share
        of its slowest link; self transfers take no time.
        """
        paths = [self.links(src, dst) for src, dst, _ in transfers]
        load = Counter(link for path in paths for link in path)
        durations = []
        for (src, dst, nbytes), path in zip(transfers, paths):
            if not path:
                durations.append(0.0)
                continue
            rate = min(self._rates[link[0]] / load[link] for link in path)
            latency = float(self.matrix.rtt[src, dst]) / 2
            durations.append(latency + nbytes / rate)
        return durations

    def simulate(
        self,
        order: RankOrder,
        spec: CollectiveSpec,
        schedule: Optional[Schedule] = None,
    ) -> float:
        """Simulated completion time (µs) of a collective under `order`.

        Raises:
            MatrixError: On a host count mismatch.
        """
        if not order.n == spec.n == self.n:
            raise MatrixError(
                f"Dimension mismatch: topology {self.n}, order {order.n}, "
                f"spec {spec.n}"
            )
        schedule = schedule or expand_schedule(spec)
        perm = order.perm
        durations = [
            self.round_durations(
                [(perm[t.src], perm[t.dst], t.nbytes) for t in transfers]
            )
            for transfers in schedule.rounds
        ]
        return schedule.completion(durations)


def simulate_collective(
    topology: TopologySpec, order: RankOrder, spec: CollectiveSpec
) -> float:
    """Simulated completion time (µs) of a collective on a topology.

    Rounds of synchronised schedules (a ring is N single-transfer rounds)
    are summed; tree schedules finish with their slowest chain.

    Raises:
        CollectiveSpecError: If the collective cannot be expanded.

        MatrixError: On a host count mismatch.
    """
    return Fabric(topology).simulate(order, spec)


# ------ Statistics ------ #


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation, averaging the ranks of ties.

    Raises:
        ValueError: If the series differ in length.

        UndefinedCorrelationError: If fewer than 2 samples are given or a
            series is constant.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"Series lengths differ ({x.size} != {y.size})")
    if x.size < 2:
        raise UndefinedCorrelationError("Need at least 2 samples")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("Correlation of a constant series")
    rho = float(stats.spearmanr(x, y).statistic)
    return min(1.0, max(-1.0, rho))


@dataclass(frozen=True)
class DistributionStats:
    """Summary of a cost or time distribution."""

    min: float
    max: float
    mean: float
    std: float
    count: int

    @classmethod
    def from_samples(cls, samples: Sequence[float]) -> "DistributionStats":
        """Summarise samples (population standard deviation).

        Raises:
            ValueError: If there are no samples.
        """
        values = np.asarray(samples, dtype=np.float64)
        if values.size == 0:
            raise ValueError("Need at least one sample")
        low, high = float(values.min()), float(values.max())
        mean = min(high, max(low, float(values.mean())))
        return cls(low, high, mean, float(values.std()), int(values.size))

    @property
    def spread(self) -> float:
        """`max / min` (inf for a zero minimum with a positive maximum)."""
        if self.min == 0:
            return 1.0 if self.max == 0 else math.inf
        return self.max / self.min

    def to_json(self) -> dict[str, Any]:
        """Stats JSON document."""
        return {
            "min": self.min,
            "max": self.max,
            "mean": self.mean,
            "std": self.std,
            "count": self.count,
        }


def random_orders(n: int, count: int, seed: int = DEFAULT_SEED) -> np.ndarray:
    """`(count, n)` array of independent uniformly random permutations."""
    rng = np.random.default_rng(seed)
    return np.array([rng.permutation(n) for _ in range(count)], dtype=np.intp)


def sample_cost_distribution(
    matrix: CostMatrix,
    spec: CollectiveSpec,
    n_samples: int,
    seed: int = DEFAULT_SEED,
) -> DistributionStats:
    """Cost model statistics over random rank orders.

    Raises:
        ConfigurationError: If `n_samples` < 1.
    """
    if n_samples < 1:
        raise ConfigurationError("`n_samples` must be >= 1")
    costs = evaluate_many(matrix, random_orders(spec.n, n_samples, seed), spec)
    return DistributionStats.from_samples(costs)


def stratified_orders(
    matrix: CostMatrix,
    spec: CollectiveSpec,
    samples: int,
    strata: int = 10,
    seed: int = DEFAULT_SEED,
) -> np.ndarray:
    """Orders spread evenly across the random-order cost distribution.

    From `samples` random orders, picks for each `i` in `[0, strata]` the
    order whose cost is closest to the `100 * i / strata` percentile.

    Returns:
        np.ndarray: `(strata + 1, N)` array, cheapest stratum first.
    """
    if samples < 1 or strata < 1:
        raise ConfigurationError("`samples` & `strata` must be >= 1")
    orders = random_orders(spec.n, samples, seed)
    costs = evaluate_many(matrix, orders, spec)
    targets = np.percentile(costs, np.linspace(0, 100, strata + 1))
    picks = [int(np.argmin(np.abs(costs - target))) for target in targets]
    return orders[picks]


@dataclass(frozen=True)
class ValidationReport:
    """Model cost versus simulated time over a set of orders."""

    algorithm: str
    n: int
    size: float
    samples: int
    correlation: Optional[float]
    model: DistributionStats
    simulated: DistributionStats
    solved_cost: Optional[float] = None
    solved_time: Optional[float] = None
    solved_percentile: Optional[float] = None

    def to_json(self) -> dict[str, Any]:
        """Report JSON; an undefined correlation is `"undefined"`."""
        document: dict[str, Any] = {
            "algorithm": self.algorithm,
            "n": self.n,
            "size": self.size,
            "samples": self.samples,
            "spearman": (
                "undefined" if self.correlation is None else self.correlation
            ),
            "model_cost": self.model.to_json(),
            "simulated_us": self.simulated.to_json(),
        }
        if self.solved_cost is not None:
            document["solved"] = {
                "cost": self.solved_cost,
                "simulated_us": self.solved_time,
                "percentile": self.solved_percentile,
            }
        return document


def validate_topology(
    topology: TopologySpec,
    spec: CollectiveSpec,
    samples: int,
    seed: int = DEFAULT_SEED,
    *,
    stratified: bool = False,
    solved: Optional[RankOrder] = None,
) -> ValidationReport:
    """Compare model costs & simulated times over sampled orders.

    Args:
        topology: Topology to generate & simulate.

        spec: Collective parameters; `spec.n` must equal the topology N.

        samples: Random orders to draw (>= 2).

        seed: Sampling seed.

        stratified: Use `stratified_orders` (10 strata over `samples`
            random orders) instead of the random orders themselves.

        solved: An optimised order to place within the simulated times.

    Raises:
        UndefinedCorrelationError: If fewer than 2 samples are requested.

        TopologyError: If `spec.n` differs from the topology N.
    """
    if samples < 2:
        raise UndefinedCorrelationError("Validation needs >= 2 samples")
    fabric = Fabric(topology)
    if spec.n != fabric.n:
        raise TopologyError(
            f"Fanout product {fabric.n} does not match N={spec.n}"
        )
    matrix = fabric.matrix
    if stratified:
        orders = stratified_orders(matrix, spec, samples, seed=seed)
    else:
        orders = random_orders(spec.n, samples, seed)

    schedule = expand_schedule(spec)
    costs = evaluate_many(matrix, orders, spec)
    times = np.array(
        [
            fabric.simulate(RankOrder(tuple(row)), spec, schedule)
            for row in orders
        ]
    )
    try:
        correlation: Optional[float] = spearman(costs, times)
    except UndefinedCorrelationError as e:
        _logger.warning(f"Correlation undefined - {e}")
        correlation = None

    extra: dict[str, Any] = {}
    if solved is not None:
        solved_time = fabric.simulate(solved, spec, schedule)
        extra = {
            "solved_cost": evaluate(matrix, solved, spec),
            "solved_time": solved_time,
            "solved_percentile": 100.0 * float(np.mean(times < solved_time)),
        }

    return ValidationReport(
        algorithm=spec.algorithm.value,
        n=spec.n,
        size=spec.size,
        samples=len(orders),
        correlation=correlation,
        model=DistributionStats.from_samples(costs),
        simulated=DistributionStats.from_samples(times),
        **extra,
    )
