"""Collective-communication cost models.

Each supported collective algorithm (ring, halving doubling, double binary
tree & BCube) has a cost model over a `CostMatrix` and a `RankOrder`. A
model sees the cost `c(i, j)` of a transfer between ranks `i` & `j` as the
cost between the hosts that hold those ranks, so permuting the order moves
transfers onto different physical pairs.

Every model is available in three forms which agree bit for bit:

1. A straight closed-form evaluation (`ring_cost`, `halving_doubling_cost`,
   `double_binary_tree_cost`, `bcube_cost`, dispatched by `evaluate`).

2. An explicit `Schedule` of rounds & transfers (`expand_schedule`), whose
   `Schedule.completion` reduction reproduces the model (`schedule_cost`).

3. A vectorised batch evaluation over many orders (`evaluate_many`) used by
   the search & sampling code.

Ranks outside `[0, N-1]` alias to `(r + N) mod N` and self transfers cost 0.
Per-round and per-hop costs are added sequentially in ascending order, so
all three forms produce identical floats and a total does not depend on
which round or hop comes first (ring rotations cost exactly the same).

Author: Andrew Ridyard.

License: GNU General Public License v3 or later.

Copyright (C): 2025.
"""

import logging
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Optional, Union

import numpy as np

from .core import CollectiveSpecError, CostMatrix, MatrixError, RankOrder

_logger = logging.getLogger(__name__)


class Algorithm(str, Enum):
    """Collective algorithms with a cost model."""

    RING = "ring"
    HALVING_DOUBLING = "hd"
    DOUBLE_BINARY_TREE = "dbt"
    BCUBE = "bcube"


class CostMode(str, Enum):
    """How an RTT entry becomes the cost of a transfer of `S` bytes.

    `LATENCY_TIMES_SIZE` follows the TCP model where achievable bandwidth
    scales with 1/RTT, so transfer time scales with S * RTT.
    """

    LATENCY_ONLY = "latency"
    LATENCY_TIMES_SIZE = "latency-size"


class HDPairing(str, Enum):
    """Peer selection for halving doubling rounds.

    `OFFSET` pairs `j` with `j + 2^i` for `j` in `[0, N/2 - 1]`;
    `XOR` pairs `j` with `j ^ 2^i` for every `j`, the textbook recursive
    halving exchange.
    """

    OFFSET = "formula"
    XOR = "xor"


def power_exponent(n: int, base: int) -> Optional[int]:
    """Return `k` with `base ** k == n`, or None if `n` is not a power."""
    if n < 1 or base < 2:
        return None
    k = 0
    while n % base == 0:
        n //= base
        k += 1
    return k if n == 1 else None


@dataclass(frozen=True)
class CollectiveSpec:
    """Algorithm selection & parameters for a cost evaluation.

    Attributes:
        algorithm: Collective algorithm.

        n: Number of participating hosts `N`.

        size: Data size `S` in bytes.

        bcube_b: BCube group size `B` (ignored by other algorithms).

        cost_mode: RTT to transfer cost mapping.

        hd_pairing: Halving doubling peer selection.
    """

    algorithm: Algorithm
    n: int
    size: float
    bcube_b: int = 2
    cost_mode: CostMode = CostMode.LATENCY_TIMES_SIZE
    hd_pairing: HDPairing = HDPairing.OFFSET

    def __post_init__(self) -> None:
        """Validate the node count against the algorithm structure.

        Raises:
            CollectiveSpecError: If `n`, `size` or `bcube_b` is invalid for
                the selected algorithm.
        """
        try:
            object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
            object.__setattr__(self, "cost_mode", CostMode(self.cost_mode))
            object.__setattr__(self, "hd_pairing", HDPairing(self.hd_pairing))
        except ValueError as e:
            raise CollectiveSpecError(str(e)) from e

        if self.n < 1:
            raise CollectiveSpecError(f"Need at least one host, got {self.n}")
        if not self.size > 0:
            raise CollectiveSpecError(f"Data size must be > 0, got {self.size}")
        if self.bcube_b < 2:
            raise CollectiveSpecError(
                f"BCube group size must be >= 2, got {self.bcube_b}"
            )

        tree_like = (Algorithm.HALVING_DOUBLING, Algorithm.DOUBLE_BINARY_TREE)
        if self.algorithm in tree_like and power_exponent(self.n, 2) is None:
            raise CollectiveSpecError(
                f"{self.algorithm.value} needs N a power of 2, got {self.n}"
            )
        if (
            self.algorithm == Algorithm.BCUBE
            and power_exponent(self.n, self.bcube_b) is None
        ):
            raise CollectiveSpecError(
                f"bcube needs N a power of B={self.bcube_b}, got {self.n}"
            )


# ------ Point to point cost ------ #


def transfer_cost(
    matrix: CostMatrix,
    i: int,
    j: int,
    nbytes: float,
    mode: CostMode = CostMode.LATENCY_TIMES_SIZE,
) -> float:
    """Cost of transferring `nbytes` from host `i` to host `j`.

    Args:
        matrix: Cost matrix.

        i: Source index, aliased modulo N.

        j: Destination index, aliased modulo N.

        nbytes: Bytes carried by the transfer.

        mode: RTT to cost mapping.

    Returns:
        float: `rtt[i][j]` (latency only) or `rtt[i][j] * nbytes`; 0 for a
            self transfer.
    """
    n = matrix.n
    i %= n
    j %= n
    if i == j:
        return 0.0
    rtt = float(matrix.rtt[i, j])
    if mode == CostMode.LATENCY_ONLY:
        return rtt
    return rtt * float(nbytes)


def _ranked_cost(
    matrix: CostMatrix,
    perm: Sequence[int],
    a: int,
    b: int,
    nbytes: float,
    mode: CostMode,
) -> float:
    # ranks alias first, then map onto hosts through the order
    n = len(perm)
    return transfer_cost(matrix, perm[a % n], perm[b % n], nbytes, mode)


def _check_dimensions(
    matrix: CostMatrix, order: RankOrder, spec: CollectiveSpec
) -> None:
    if not matrix.n == order.n == spec.n:
        raise MatrixError(
            f"Dimension mismatch: matrix {matrix.n}, order {order.n}, "
            f"spec {spec.n}"
        )


def _require_power(n: int, base: int, name: str) -> int:
    exponent = power_exponent(n, base)
    if exponent is None:
        raise CollectiveSpecError(f"{name} needs N a power of {base}, got {n}")
    return exponent


def _accumulate(values: Iterable[float]) -> float:
    # ascending sequential addition; any permutation of `values` gives the
    # same float
    total = 0.0
    for value in sorted(values):
        total += value
    return total


# ------ Closed-form models ------ #


def ring_cost(
    matrix: CostMatrix, order: RankOrder, spec: CollectiveSpec
) -> float:
    """Sum of the hop costs `c(i, i-1)` around the ring, each carrying S."""
    _check_dimensions(matrix, order, spec)
    perm = order.perm
    return _accumulate(
        _ranked_cost(matrix, perm, i, i - 1, spec.size, spec.cost_mode)
        for i in range(spec.n if spec.n > 1 else 0)
    )


def halving_doubling_cost(
    matrix: CostMatrix, order: RankOrder, spec: CollectiveSpec
) -> float:
    """Sum over rounds of the most expensive exchange in the round.

    Round `i` exchanges `S / 2^(i+1)` bytes between ranks `2^i` apart.

    Raises:
        CollectiveSpecError: If N is not a power of 2.
    """
    _check_dimensions(matrix, order, spec)
    rounds = _require_power(spec.n, 2, "halving doubling")
    perm = order.perm
    round_maxima = []
    for i in range(rounds):
        nbytes = spec.size / 2 ** (i + 1)
        round_max = 0.0
        for src, dst in _hd_pairs(spec.n, i, spec.hd_pairing):
            cost = _ranked_cost(matrix, perm, src, dst, nbytes, spec.cost_mode)
            round_max = max(round_max, cost)
        round_maxima.append(round_max)
    return _accumulate(round_maxima)


def double_binary_tree_cost(
    matrix: CostMatrix, order: RankOrder, spec: CollectiveSpec
) -> float:
    """Cost of the slower of the primary & mirrored binary trees.

    A tree over ranks `[i, j]` is rooted at `m = (i + j) // 2`, with edges
    to `(3i + j) // 2 - 1` & `(i + 3j) // 2 + 1` leading into the subtrees
    `[i, m - 1]` & `[m + 1, j]`. Its cost is the heaviest root-to-leaf sum
    of edge costs, every edge carrying `S / 2`. The mirrored tree has each
    rank decremented by one.

    Raises:
        CollectiveSpecError: If N is not a power of 2.
    """
    _check_dimensions(matrix, order, spec)
    _require_power(spec.n, 2, "double binary tree")
    perm = order.perm
    half = spec.size / 2
    mode = spec.cost_mode

    def tree(i: int, j: int, shift: int) -> float:
        if i >= j:
            return 0.0
        m = (i + j) // 2
        left = _ranked_cost(
            matrix, perm, m - shift, (3 * i + j) // 2 - 1 - shift, half, mode
        ) + tree(i, m - 1, shift)
        right = _ranked_cost(
            matrix, perm, m - shift, (i + 3 * j) // 2 + 1 - shift, half, mode
        ) + tree(m + 1, j, shift)
        return max(left, right)

    return max(tree(0, spec.n - 1, 0), tree(0, spec.n - 1, 1))


def bcube_cost(
    matrix: CostMatrix, order: RankOrder, spec: CollectiveSpec
) -> float:
    """Sum over rounds of the most expensive BCube peer exchange.

    In round `i` each rank `j < N/B` exchanges `S / B^(i+1)` bytes with the
    ranks `j + k * B^i` for `k` in `[1, B-1]`. With `B = 2` this is exactly
    the halving doubling formula.

    Raises:
        CollectiveSpecError: If N is not a power of B.
    """
    _check_dimensions(matrix, order, spec)
    base = spec.bcube_b
    rounds = _require_power(spec.n, base, "bcube")
    perm = order.perm
    round_maxima = []
    for i in range(rounds):
        nbytes = spec.size / base ** (i + 1)
        round_max = 0.0
        for src, dst in _bcube_pairs(spec.n, base, i):
            cost = _ranked_cost(matrix, perm, src, dst, nbytes, spec.cost_mode)
            round_max = max(round_max, cost)
        round_maxima.append(round_max)
    return _accumulate(round_maxima)


_MODELS = {
    Algorithm.RING: ring_cost,
    Algorithm.HALVING_DOUBLING: halving_doubling_cost,
    Algorithm.DOUBLE_BINARY_TREE: double_binary_tree_cost,
    Algorithm.BCUBE: bcube_cost,
}


def evaluate(
    matrix: CostMatrix, order: RankOrder, spec: CollectiveSpec
) -> float:
    """Evaluate the model selected by `spec` for `order`.

    Raises:
        MatrixError: On a dimension mismatch.

        CollectiveSpecError: If N does not fit the algorithm structure.
    """
    return _MODELS[spec.algorithm](matrix, order, spec)


# ------ Schedules ------ #


def _hd_pairs(n: int, i: int, pairing: HDPairing) -> Iterator[tuple[int, int]]:
    step = 2**i
    if pairing == HDPairing.XOR:
        for j in range(n):
            yield j, j ^ step
    else:
        for j in range(n // 2):
            yield j, (j + step) % n


def _bcube_pairs(n: int, base: int, i: int) -> Iterator[tuple[int, int]]:
    step = base**i
    for j in range(n // base):
        for k in range(1, base):
            yield j, (j + k * step) % n


@dataclass(frozen=True)
class Transfer:
    """A point to point transfer between ranks.

    `parent` refers to the `(round, position)` of the transfer this one
    follows in a tree schedule; it is None for every synchronised schedule.
    """

    src: int
    dst: int
    nbytes: float
    parent: Optional[tuple[int, int]] = None

    @property
    def is_local(self) -> bool:
        """True for a self transfer (rank aliased onto itself)."""
        return self.src == self.dst


@dataclass(frozen=True)
class Schedule:
    """Rounds of transfers for one collective.

    Synchronised schedules finish a round before the next starts, so their
    completion is the sum of per-round maxima (a ring is N one-transfer
    rounds). Tree schedules are not synchronised: a transfer only waits for
    its parent and completion is the heaviest parent-to-leaf chain.
    """

    algorithm: Algorithm
    n: int
    rounds: tuple[tuple[Transfer, ...], ...]
    synchronized: bool = True

    def transfers(self) -> Iterator[tuple[int, int, Transfer]]:
        """Yield `(round, position, transfer)` in round order."""
        for r, transfers in enumerate(self.rounds):
            for p, transfer in enumerate(transfers):
                yield r, p, transfer

    @property
    def total_bytes(self) -> float:
        """Bytes put on the wire, excluding self transfers."""
        return float(
            sum(t.nbytes for *_, t in self.transfers() if not t.is_local)
        )

    def completion(self, durations: Sequence[Sequence[float]]) -> float:
        """Reduce per-transfer durations to the collective completion time.

        Args:
            durations: One duration per transfer, shaped like `rounds`.

        Returns:
            float: Ascending sum of round maxima (synchronised) or the heaviest
                chain of parent-to-child durations (tree schedules).
        """
        if len(durations) != len(self.rounds):
            raise ValueError("`durations` must have one entry per round")

        if self.synchronized:
            return _accumulate(
                max(round_durations)
                for round_durations in durations
                if len(round_durations)
            )

        # children always sit in a later round than their parent
        child_max: dict[tuple[int, int], float] = {}
        finish = 0.0
        for r in reversed(range(len(self.rounds))):
            for p, transfer in enumerate(self.rounds[r]):
                tail = durations[r][p] + child_max.get((r, p), 0.0)
                parent = transfer.parent
                if parent is None:
                    finish = max(finish, tail)
                else:
                    previous = child_max.get(parent)
                    child_max[parent] = (
                        tail if previous is None else max(previous, tail)
                    )
        return finish


def _ring_rounds(spec: CollectiveSpec) -> list[list[Transfer]]:
    if spec.n == 1:
        return []
    return [[Transfer(i, (i - 1) % spec.n, spec.size)] for i in range(spec.n)]


def _hd_rounds(spec: CollectiveSpec) -> list[list[Transfer]]:
    rounds = power_exponent(spec.n, 2) or 0
    return [
        [
            Transfer(src, dst, spec.size / 2 ** (i + 1))
            for src, dst in _hd_pairs(spec.n, i, spec.hd_pairing)
        ]
        for i in range(rounds)
    ]


def _bcube_rounds(spec: CollectiveSpec) -> list[list[Transfer]]:
    base = spec.bcube_b
    rounds = power_exponent(spec.n, base) or 0
    return [
        [
            Transfer(src, dst, spec.size / base ** (i + 1))
            for src, dst in _bcube_pairs(spec.n, base, i)
        ]
        for i in range(rounds)
    ]


def _dbt_rounds(spec: CollectiveSpec) -> list[list[Transfer]]:
    n = spec.n
    half = spec.size / 2
    rounds: list[list[Transfer]] = []

    def build(
        i: int, j: int, shift: int, depth: int, parent: Optional[tuple]
    ) -> None:
        if i >= j:
            return
        while len(rounds) <= depth:
            rounds.append([])
        m = (i + j) // 2
        edges = (
            ((3 * i + j) // 2 - 1, i, m - 1),
            ((i + 3 * j) // 2 + 1, m + 1, j),
        )
        for child, lo, hi in edges:
            ref = (depth, len(rounds[depth]))
            rounds[depth].append(
                Transfer((m - shift) % n, (child - shift) % n, half, parent)
            )
            build(lo, hi, shift, depth + 1, ref)

    # primary tree then the mirrored tree
    for shift in (0, 1):
        build(0, n - 1, shift, 0, None)
    return rounds


@lru_cache(maxsize=64)
def expand_schedule(spec: CollectiveSpec) -> Schedule:
    """Expand a collective into explicit rounds of transfers.

    Raises:
        CollectiveSpecError: If N does not fit the algorithm structure.
    """
    builders = {
        Algorithm.RING: _ring_rounds,
        Algorithm.HALVING_DOUBLING: _hd_rounds,
        Algorithm.DOUBLE_BINARY_TREE: _dbt_rounds,
        Algorithm.BCUBE: _bcube_rounds,
    }
    rounds = builders[spec.algorithm](spec)
    _logger.debug(
        f"Expanded {spec.algorithm.value} (N={spec.n}) into "
        f"{len(rounds)} rounds"
    )
    return Schedule(
        algorithm=spec.algorithm,
        n=spec.n,
        rounds=tuple(tuple(r) for r in rounds),
        synchronized=spec.algorithm != Algorithm.DOUBLE_BINARY_TREE,
    )


def schedule_cost(
    matrix: CostMatrix,
    order: RankOrder,
    spec: CollectiveSpec,
    schedule: Optional[Schedule] = None,
) -> float:
    """Recompute the model cost from an expanded schedule.

    Args:
        matrix: Cost matrix.

        order: Rank order.

        spec: Collective parameters.

        schedule: Schedule to reduce. Defaults to `expand_schedule(spec)`.

    Returns:
        float: The schedule completion under `transfer_cost` durations.
    """
    _check_dimensions(matrix, order, spec)
    schedule = schedule or expand_schedule(spec)
    perm = order.perm
    durations = [
        [
            _ranked_cost(matrix, perm, t.src, t.dst, t.nbytes, spec.cost_mode)
            for t in transfers
        ]
        for transfers in schedule.rounds
    ]
    return schedule.completion(durations)


# ------ Batch evaluation ------ #


@dataclass(frozen=True, eq=False)
class _CompiledSchedule:
    src: np.ndarray
    dst: np.ndarray
    nbytes: np.ndarray
    round_width: int
    round_bounds: tuple[tuple[int, int], ...]
    synchronized: bool
    parents: np.ndarray
    roots: np.ndarray


@lru_cache(maxsize=64)
def _compile(spec: CollectiveSpec) -> _CompiledSchedule:
    schedule = expand_schedule(spec)
    flat = list(schedule.transfers())
    offsets = {}
    for index, (r, p, _) in enumerate(flat):
        offsets[(r, p)] = index

    widths = {len(r) for r in schedule.rounds}
    bounds, start = [], 0
    for transfers in schedule.rounds:
        bounds.append((start, start + len(transfers)))
        start += len(transfers)
    parents = np.array(
        [-1 if t.parent is None else offsets[t.parent] for *_, t in flat],
        dtype=np.intp,
    )
    return _CompiledSchedule(
        src=np.array([t.src for *_, t in flat], dtype=np.intp),
        dst=np.array([t.dst for *_, t in flat], dtype=np.intp),
        nbytes=np.array([t.nbytes for *_, t in flat], dtype=np.float64),
        round_width=widths.pop() if len(widths) == 1 else 0,
        round_bounds=tuple(bounds),
        synchronized=schedule.synchronized,
        parents=parents,
        roots=np.flatnonzero(parents < 0),
    )


def evaluate_many(
    matrix: CostMatrix,
    orders: Union[np.ndarray, Sequence[Sequence[int]]],
    spec: CollectiveSpec,
) -> np.ndarray:
    """Evaluate the model for every row of an `(M, N)` array of orders.

    Rows are assumed to be permutations; row `k` of the result equals
    `evaluate(matrix, RankOrder(orders[k]), spec)` exactly.

    Raises:
        MatrixError: If the order width does not match the matrix.
    """
    perms = np.atleast_2d(np.asarray(orders, dtype=np.intp))
    if perms.shape[1] != matrix.n or matrix.n != spec.n:
        raise MatrixError(
            f"Dimension mismatch: matrix {matrix.n}, orders "
            f"{perms.shape[1]}, spec {spec.n}"
        )
    count = perms.shape[0]
    compiled = _compile(spec)
    if compiled.src.size == 0:
        return np.zeros(count)

    costs = matrix.rtt[perms[:, compiled.src], perms[:, compiled.dst]]
    if spec.cost_mode == CostMode.LATENCY_TIMES_SIZE:
        costs = costs * compiled.nbytes

    if compiled.synchronized:
        if compiled.round_width:
            width = compiled.round_width
            round_max = costs.reshape(count, -1, width).max(axis=2)
        else:
            bounds = compiled.round_bounds
            round_max = np.stack(
                [costs[:, a:b].max(axis=1) for a, b in bounds], axis=1
            )
        return np.cumsum(np.sort(round_max, axis=1), axis=1)[:, -1]

    # tree schedules: bottom-up heaviest chain
    tails = np.empty_like(costs)
    child_max = np.zeros_like(costs)
    for e in range(costs.shape[1] - 1, -1, -1):
        tails[:, e] = costs[:, e] + child_max[:, e]
        p = compiled.parents[e]
        if p >= 0:
            child_max[:, p] = np.maximum(child_max[:, p], tails[:, e])
    return tails[:, compiled.roots].max(axis=1)
