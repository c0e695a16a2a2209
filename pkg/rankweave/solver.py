"""Rank order search.

Three ways of finding a rank order which minimises a cost model:

1. `brute_force` - exact enumeration for small host counts.

2. `anneal` - simulated annealing over permutations with swap, reverse &
   shuffle neighbour moves.

3. `emit_smtlib` - an SMT-LIB2 encoding for an external optimising solver,
   optionally bounded by a known cost so the solver only looks for strictly
   better orders.

`two_stage_solve` chains them: a stochastic (or exact) first stage gives a
cost `C0`, the SMT encoding bounded by `C0` is written for optional offline
refinement, and an external model is accepted only if it verifiably beats
`C0`.

Author: Andrew Ridyard.

License: GNU General Public License v3 or later.

Copyright (C): 2025.
"""

import itertools
import logging
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .core import (
    DEFAULT_SEED,
    BruteForceLimitError,
    ConfigurationError,
    CostMatrix,
    ExternalModelError,
    RankOrder,
    RankOrderError,
    SMTEmissionError,
    _read_json,
    _write_json,
)
from .cost import (
    Algorithm,
    CollectiveSpec,
    CostMode,
    HDPairing,
    evaluate,
    evaluate_many,
)

_logger = logging.getLogger(__name__)

_CHUNK = 20_000


class Method(str, Enum):
    """How a `Solution` was found."""

    BRUTE_FORCE = "brute-force"
    ANNEAL = "anneal"
    EXTERNAL = "external"


@dataclass(frozen=True)
class SolverConfig:
    """Search parameters.

    Attributes:
        budget: Wall-clock seconds for annealing (all restarts).

        seed: Base seed; restart `k` draws from the stream `(seed, k)`.

        initial_temperature: Starting temperature. None uses the standard
            deviation of 100 random-order costs.

        cooling: Geometric cooling factor applied per temperature step.

        steps_per_temperature: Proposals per temperature. None uses `4N`.

        restarts: Independent annealing runs; restart 0 starts from the
            identity order, the others from random orders.

        brute_force_threshold: Largest N solved exactly.

        min_temperature_ratio: A run ends once the temperature drops below
            this fraction of the starting temperature.

        stall_steps: A run ends after this many temperature steps without
            improving its best cost. None disables the check.

        max_evaluations: Optional cap on cost evaluations per restart.

        workers: Threads running restarts concurrently.

        smt_cap: Largest N for DBT/BCube SMT-LIB2 emission.
    """

    budget: float = 10.0
    seed: int = DEFAULT_SEED
    initial_temperature: Optional[float] = None
    cooling: float = 0.995
    steps_per_temperature: Optional[int] = None
    restarts: int = 4
    brute_force_threshold: int = 10
    min_temperature_ratio: float = 1e-3
    stall_steps: Optional[int] = 150
    max_evaluations: Optional[int] = None
    workers: int = 1
    smt_cap: int = 64

    def __post_init__(self) -> None:
        """Validate ranges.

        Raises:
            ConfigurationError: On an out of range parameter.
        """
        if not self.budget > 0:
            raise ConfigurationError("`budget` must be > 0")
        if not 0 < self.cooling < 1:
            raise ConfigurationError("`cooling` must be in (0, 1)")
        if self.brute_force_threshold < 2:
            raise ConfigurationError(
                "`brute_force_threshold` must be >= 2"
            )
        if self.restarts < 1:
            raise ConfigurationError("`restarts` must be >= 1")
        if not 0 < self.min_temperature_ratio < 1:
            raise ConfigurationError(
                "`min_temperature_ratio` must be in (0, 1)"
            )
        if self.workers < 1:
            raise ConfigurationError("`workers` must be >= 1")


@dataclass(frozen=True)
class Solution:
    """A rank order with its verified cost."""

    order: RankOrder
    cost: float
    method: Method
    evaluations: int = field(default=0, compare=False)

    def to_json(self) -> dict[str, Any]:
        """Solution JSON document."""
        return {
            "order": list(self.order.perm),
            "cost": self.cost,
            "method": self.method.value,
        }

    @classmethod
    def from_json(cls, document: Any) -> "Solution":
        """Parse a solution JSON document.

        Raises:
            RankOrderError: If the document has no valid `order`.
        """
        if not isinstance(document, dict) or "order" not in document:
            raise RankOrderError("Solution document needs an `order` list")
        order = document["order"]
        if not isinstance(order, list):
            raise RankOrderError("`order` must be a list")
        return cls(
            order=RankOrder(tuple(order)),
            cost=float(document.get("cost", math.nan)),
            method=Method(document.get("method", Method.EXTERNAL.value)),
        )


def save_solution(path: Union[str, Path], solution: Solution) -> None:
    """Write solution JSON."""
    _write_json(path, solution.to_json())


def load_solution(path: Union[str, Path]) -> Solution:
    """Read solution JSON."""
    return Solution.from_json(_read_json(path))


def _identity_solution(
    matrix: CostMatrix, spec: CollectiveSpec, method: Method
) -> Solution:
    order = RankOrder.identity(spec.n)
    return Solution(order, evaluate(matrix, order, spec), method, 1)


# ------ Exhaustive search ------ #


def brute_force(
    matrix: CostMatrix,
    spec: CollectiveSpec,
    threshold: int = SolverConfig.brute_force_threshold,
) -> Solution:
    """Exact minimum over all rank orders.

    Orders are enumerated lexicographically, so ties resolve to the
    lexicographically smallest order. A ring cost is invariant under
    rotation, so only orders with `perm[0] == 0` are enumerated for rings.

    Raises:
        BruteForceLimitError: If N exceeds `threshold`.
    """
    n = spec.n
    if n > threshold:
        raise BruteForceLimitError(
            f"N={n} is over the exhaustive search limit of {threshold}; "
            "use annealing"
        )
    if n <= 2:
        return _identity_solution(matrix, spec, Method.BRUTE_FORCE)

    if spec.algorithm == Algorithm.RING:
        orders = (
            (0,) + tail for tail in itertools.permutations(range(1, n))
        )
    else:
        orders = itertools.permutations(range(n))

    best_cost = math.inf
    best: Optional[np.ndarray] = None
    evaluations = 0
    while True:
        chunk = list(itertools.islice(orders, _CHUNK))
        if not chunk:
            break
        perms = np.array(chunk, dtype=np.intp)
        costs = evaluate_many(matrix, perms, spec)
        evaluations += len(chunk)
        k = int(np.argmin(costs))
        if costs[k] < best_cost:
            best_cost = float(costs[k])
            best = perms[k].copy()

    order = RankOrder(tuple(int(p) for p in best))
    cost = evaluate(matrix, order, spec)
    _logger.debug(f"Exhaustive search: {evaluations} orders, cost {cost}")
    return Solution(order, cost, Method.BRUTE_FORCE, evaluations)


# ------ Neighbour moves ------ #


def swap_positions(perm: np.ndarray, i: int, j: int) -> np.ndarray:
    """Copy of `perm` with positions `i` & `j` exchanged."""
    out = np.array(perm, copy=True)
    out[i], out[j] = out[j], out[i]
    return out


def reverse_segment(perm: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Copy of `perm` with `perm[start:stop]` reversed."""
    out = np.array(perm, copy=True)
    out[start:stop] = out[start:stop][::-1]
    return out


def shuffle_segment(
    perm: np.ndarray, start: int, stop: int, rng: np.random.Generator
) -> np.ndarray:
    """Copy of `perm` with `perm[start:stop]` randomly permuted."""
    out = np.array(perm, copy=True)
    out[start:stop] = rng.permutation(out[start:stop])
    return out


def neighbor(
    order: Union[RankOrder, np.ndarray], rng: np.random.Generator
) -> Union[RankOrder, np.ndarray]:
    """A random neighbouring order.

    With equal probability: swap two distinct positions, reverse a random
    sub-array, or shuffle a random sub-array of length at most
    `max(3, N // 8)`.

    Args:
        order: Current order (`RankOrder` or integer array).

        rng: Random generator.

    Returns:
        RankOrder | np.ndarray: The neighbour, of the same type as `order`.
    """
    as_order = isinstance(order, RankOrder)
    perm = order.as_array() if as_order else np.asarray(order)
    n = perm.size
    if n < 2:
        return order

    move = int(rng.integers(3))
    if move == 0:
        i, j = rng.choice(n, size=2, replace=False)
        out = swap_positions(perm, int(i), int(j))
    else:
        longest = n if move == 1 else min(n, max(3, n // 8))
        length = int(rng.integers(2, longest + 1))
        start = int(rng.integers(0, n - length + 1))
        if move == 1:
            out = reverse_segment(perm, start, start + length)
        else:
            out = shuffle_segment(perm, start, start + length, rng)

    return RankOrder(tuple(int(p) for p in out)) if as_order else out


# ------ Simulated annealing ------ #


def initial_temperature(
    matrix: CostMatrix,
    spec: CollectiveSpec,
    rng: np.random.Generator,
    samples: int = 100,
) -> float:
    """Standard deviation of the costs of `samples` random orders."""
    perms = np.array([rng.permutation(spec.n) for _ in range(samples)])
    return float(np.std(evaluate_many(matrix, perms, spec)))


def _anneal_restart(
    matrix: CostMatrix,
    spec: CollectiveSpec,
    config: SolverConfig,
    restart: int,
    temperature: float,
    sign: float,
    deadline: float,
) -> tuple[float, tuple[int, ...], int]:
    rng = np.random.default_rng([config.seed, restart])
    n = spec.n
    current = np.arange(n) if restart == 0 else rng.permutation(n)
    current_cost = sign * float(evaluate_many(matrix, current, spec)[0])
    best, best_cost = current.copy(), current_cost
    evaluations = 1

    steps = config.steps_per_temperature or 4 * n
    max_levels = math.ceil(
        math.log(config.min_temperature_ratio) / math.log(config.cooling)
    )
    t = temperature
    stalled = 0
    levels = 0
    while True:
        improved = False
        for _ in range(steps):
            candidate = neighbor(current, rng)
            cost = sign * float(evaluate_many(matrix, candidate, spec)[0])
            evaluations += 1
            delta = cost - current_cost
            if delta <= 0 or (
                t > 0 and rng.random() < math.exp(-delta / t)
            ):
                current, current_cost = candidate, cost
                if cost < best_cost:
                    best, best_cost = candidate.copy(), cost
                    improved = True
            if (
                config.max_evaluations is not None
                and evaluations >= config.max_evaluations
            ):
                break

        levels += 1
        stalled = 0 if improved else stalled + 1
        t *= config.cooling
        if config.max_evaluations is not None and (
            evaluations >= config.max_evaluations
        ):
            break
        if levels >= max_levels:
            break
        if config.stall_steps is not None and stalled >= config.stall_steps:
            break
        if time.monotonic() >= deadline:
            _logger.debug(f"Restart {restart}: time budget exhausted")
            break

    _logger.debug(
        f"Restart {restart}: {levels} temperature steps, {evaluations} "
        f"evaluations, best {sign * best_cost}"
    )
    return best_cost, tuple(int(p) for p in best), evaluations


def anneal(
    matrix: CostMatrix,
    spec: CollectiveSpec,
    config: Optional[SolverConfig] = None,
    *,
    maximize: bool = False,
) -> Solution:
    """Simulated annealing over rank orders.

    Worse neighbours are accepted with probability `exp(-delta / T)` and the
    temperature decays geometrically. Restarts own independent random
    streams and may run concurrently; the merged result is the best cost
    with a lexicographic tie-break, so it does not depend on completion
    order. For a fixed seed the result is deterministic unless the time
    budget cuts a run short.

    Args:
        matrix: Cost matrix.

        spec: Collective parameters.

        config: Search parameters. Defaults to `SolverConfig()`.

        maximize: Search for the most expensive order instead.

    Returns:
        Solution: Best order found; never worse than the identity order.
    """
    config = config or SolverConfig()
    if spec.n <= 2:
        return _identity_solution(matrix, spec, Method.ANNEAL)

    sign = -1.0 if maximize else 1.0
    temperature = config.initial_temperature
    if temperature is None:
        temperature = initial_temperature(
            matrix, spec, np.random.default_rng([config.seed, 0xFFFF])
        )
    _logger.debug(f"Annealing N={spec.n} from temperature {temperature:.6g}")
    deadline = time.monotonic() + config.budget

    def run(restart: int) -> tuple[float, tuple[int, ...], int]:
        return _anneal_restart(
            matrix, spec, config, restart, temperature, sign, deadline
        )

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, range(config.restarts)))
    else:
        results = [run(k) for k in range(config.restarts)]

    best_cost, best_perm, _ = min(results, key=lambda r: (r[0], r[1]))
    order = RankOrder(best_perm)
    cost = evaluate(matrix, order, spec)
    evaluations = sum(r[2] for r in results)
    _logger.debug(f"Annealing done: cost {cost} ({evaluations} evaluations)")
    return Solution(order, cost, Method.ANNEAL, evaluations)


# ------ SMT-LIB2 emission ------ #


def _sexpr(operator: str, *operands: str) -> str:
    return "(" + " ".join((operator, *operands)) + ")"


def _real(value: float) -> str:
    text = format(Decimal(float(value)), "f")
    return text if "." in text else f"{text}.0"


def _sum(terms: list[str]) -> str:
    if not terms:
        return "0.0"
    return terms[0] if len(terms) == 1 else _sexpr("+", *terms)


def _max(terms: list[str]) -> str:
    if not terms:
        return "0.0"
    term = terms[-1]
    for other in reversed(terms[:-1]):
        term = _sexpr("max2", other, term)
    return term


def is_balanced(text: str) -> bool:
    """True if the parentheses of an SMT-LIB2 script balance.

    Comments (`;` to end of line) and string literals are skipped.
    """
    depth = 0
    for line in text.splitlines():
        in_string = False
        for char in line:
            if char == '"':
                in_string = not in_string
            elif in_string:
                continue
            elif char == ";":
                break
            elif char == "(":
                depth += 1
            elif char == ")":
                depth -= 1
                if depth < 0:
                    return False
    return depth == 0


class _CostTerms:
    """Builds SMT terms for `c(r_a, r_b)` read from the flattened array."""

    def __init__(self, spec: CollectiveSpec) -> None:
        self.spec = spec

    def edge(self, a: int, b: int, nbytes: float) -> str:
        n = self.spec.n
        a %= n
        b %= n
        if a == b:
            return "0.0"
        index = _sexpr("+", _sexpr("*", str(n), f"r_{a}"), f"r_{b}")
        term = _sexpr("select", "c", index)
        if self.spec.cost_mode == CostMode.LATENCY_TIMES_SIZE:
            term = _sexpr("*", _real(nbytes), term)
        return term

    def ring(self) -> str:
        spec = self.spec
        return _sum([self.edge(i, i - 1, spec.size) for i in range(spec.n)])

    def rounds(self, base: int, peers: int, pairing: HDPairing) -> str:
        n = self.spec.n
        rounds = []
        step, i = 1, 0
        while step < n:
            nbytes = self.spec.size / base ** (i + 1)
            if base == 2 and pairing == HDPairing.XOR:
                pairs = [(j, j ^ step) for j in range(n)]
            else:
                pairs = [
                    (j, j + k * step)
                    for j in range(n // base)
                    for k in range(1, peers + 1)
                ]
            rounds.append(_max([self.edge(a, b, nbytes) for a, b in pairs]))
            step *= base
            i += 1
        return _sum(rounds)

    def tree(self, i: int, j: int, shift: int) -> str:
        if i >= j:
            return "0.0"
        half = self.spec.size / 2
        m = (i + j) // 2
        left = _sexpr(
            "+",
            self.edge(m - shift, (3 * i + j) // 2 - 1 - shift, half),
            self.tree(i, m - 1, shift),
        )
        right = _sexpr(
            "+",
            self.edge(m - shift, (i + 3 * j) // 2 + 1 - shift, half),
            self.tree(m + 1, j, shift),
        )
        return _sexpr("max2", left, right)

    def objective(self) -> str:
        spec = self.spec
        if spec.n == 1:
            return "0.0"
        if spec.algorithm == Algorithm.RING:
            return self.ring()
        if spec.algorithm == Algorithm.HALVING_DOUBLING:
            return self.rounds(2, 1, spec.hd_pairing)
        if spec.algorithm == Algorithm.BCUBE:
            return self.rounds(
                spec.bcube_b, spec.bcube_b - 1, HDPairing.OFFSET
            )
        return _sexpr(
            "max2",
            self.tree(0, spec.n - 1, 0),
            self.tree(0, spec.n - 1, 1),
        )


def emit_smtlib(
    matrix: CostMatrix,
    spec: CollectiveSpec,
    upper_bound: Optional[float] = None,
    cap: int = SolverConfig.smt_cap,
) -> str:
    """SMT-LIB2 script minimising the cost model over rank variables.

    Rank variables `r_0 .. r_{N-1}` range over `[0, N-1]` and are pairwise
    distinct; `r_i` is the original host placed at rank `i`. The matrix is
    flattened into an `(Array Int Real)` constant `c` with
    `c[i * N + j] = rtt[i][j]`, so each model cost term reads
    `(select c (+ (* N r_a) r_b))`.

    Args:
        matrix: Cost matrix.

        spec: Collective parameters.

        upper_bound: Known achievable cost; adds `(assert (< cost bound))`.

        cap: Largest N emitted for the DBT & BCube models.

    Returns:
        str: A self-contained SMT-LIB2 script.

    Raises:
        SMTEmissionError: If a DBT/BCube encoding exceeds `cap` hosts.
    """
    n = spec.n
    if matrix.n != n:
        raise SMTEmissionError(f"Matrix has {matrix.n} hosts, spec has {n}")
    large_terms = (Algorithm.DOUBLE_BINARY_TREE, Algorithm.BCUBE)
    if spec.algorithm in large_terms and n > cap:
        raise SMTEmissionError(
            f"Refusing {spec.algorithm.value} encoding for N={n} > {cap}"
        )

    ranks = [f"r_{i}" for i in range(n)]
    lines = [
        f"; rank order: {spec.algorithm.value} N={n} S={spec.size} "
        f"mode={spec.cost_mode.value}",
        "(set-option :produce-models true)",
        "(set-logic QF_AUFLIRA)",
        "(define-fun max2 ((a Real) (b Real)) Real (ite (>= a b) a b))",
    ]
    lines += [f"(declare-fun {r} () Int)" for r in ranks]
    lines += [
        f"(assert (and (<= 0 {r}) (< {r} {n})))" for r in ranks
    ]
    if n > 1:
        lines.append(_sexpr("assert", _sexpr("distinct", *ranks)))

    lines.append("(declare-fun c () (Array Int Real))")
    for i in range(n):
        for j in range(n):
            value = _real(matrix.rtt[i, j])
            lines.append(f"(assert (= (select c {i * n + j}) {value}))")

    objective = _CostTerms(spec).objective()
    lines.append(f"(define-fun cost () Real {objective})")
    lines.append("(minimize cost)")
    if upper_bound is not None:
        lines.append(f"(assert (< cost {_real(upper_bound)}))")
    lines += [
        "(check-sat)",
        "(get-model)",
        _sexpr("get-value", _sexpr(*ranks)),
    ]
    return "\n".join(lines) + "\n"


_MODEL_LINE = re.compile(r"^\s*r_(\d+)\s*=\s*(-?\d+)\s*$")
_MODEL_DEFINE = re.compile(
    r"\(define-fun\s+r_(\d+)\s+\(\)\s+Int\s+(-?\d+)\s*\)"
)


def parse_external_model(text: str, n: int) -> RankOrder:
    """Parse an external solver model into a rank order.

    The model lists one `r_<i> = <int>` line per rank variable; a solver's
    `(define-fun r_<i> () Int <v>)` output is accepted as well.

    Raises:
        ExternalModelError: If variables are missing, repeated or do not
            form a permutation of `[0, N-1]`.
    """
    values: dict[int, int] = {}
    matches = [m.groups() for m in _MODEL_DEFINE.finditer(text)]
    if not matches:
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith(("#", ";")):
                continue
            match = _MODEL_LINE.match(line)
            if match is None:
                raise ExternalModelError(f"Unreadable model line '{line}'")
            matches.append(match.groups())

    for index, value in matches:
        if int(index) in values:
            raise ExternalModelError(f"r_{index} assigned twice")
        values[int(index)] = int(value)

    if sorted(values) != list(range(n)):
        raise ExternalModelError(f"Model must assign r_0 .. r_{n - 1}")
    try:
        return RankOrder(tuple(values[i] for i in range(n)))
    except RankOrderError as e:
        raise ExternalModelError(f"Model is not a permutation ({e})") from e


def two_stage_solve(
    matrix: CostMatrix,
    spec: CollectiveSpec,
    config: Optional[SolverConfig] = None,
    *,
    smt_path: Optional[Union[str, Path]] = None,
    external_model: Optional[Union[str, Path]] = None,
) -> Solution:
    """Stochastic/exact first stage followed by optional SMT refinement.

    Stage 1 solves exactly when N is within the exhaustive search limit
    and anneals otherwise, giving `C0`. Stage 2 writes the SMT-LIB2
    encoding bounded by `C0` to `smt_path`. An external model replaces the
    stage 1 order only if its verified cost is strictly below `C0`.

    Args:
        matrix: Cost matrix.

        spec: Collective parameters.

        config: Search parameters. Defaults to `SolverConfig()`.

        smt_path: Where to write the bounded SMT-LIB2 script.

        external_model: Model file produced by an external solver.

    Returns:
        Solution: The stage 1 solution or a strictly better external one.
    """
    config = config or SolverConfig()
    if spec.n <= config.brute_force_threshold:
        stage1 = brute_force(matrix, spec, config.brute_force_threshold)
    else:
        stage1 = anneal(matrix, spec, config)
    _logger.info(
        f"Stage 1 ({stage1.method.value}): cost {stage1.cost:.6g} after "
        f"{stage1.evaluations} evaluations"
    )

    if smt_path is not None:
        try:
            script = emit_smtlib(matrix, spec, stage1.cost, config.smt_cap)
        except SMTEmissionError as e:
            _logger.warning(f"SMT-LIB2 emission skipped - {e}")
        else:
            path = Path(smt_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(script, encoding="utf-8")
            _logger.info(f"Stage 2: SMT-LIB2 bounded by C0 written to {path}")

    if external_model is None:
        return stage1

    try:
        text = Path(external_model).read_text(encoding="utf-8")
        order = parse_external_model(text, spec.n)
    except (OSError, ExternalModelError) as e:
        _logger.warning(f"Ignoring external model {external_model} - {e}")
        return stage1

    cost = evaluate(matrix, order, spec)
    if cost < stage1.cost:
        _logger.info(f"External model improves cost to {cost:.6g}")
        return Solution(order, cost, Method.EXTERNAL, stage1.evaluations + 1)
    _logger.warning(
        f"External model cost {cost:.6g} does not improve on "
        f"{stage1.cost:.6g}; keeping stage 1"
    )
    return stage1
