"""Shared types, configuration, logging & exceptions for `rankweave`.

The `rankweave` package discovers pairwise network locality among a set of
hosts, evaluates collective-communication cost models over that locality
and searches for a rank order of the hosts which minimises a chosen model.

This module holds what every other module needs: the `RankweaveEnv`
configuration singleton, the exception hierarchy, the `CostMatrix` and
`RankOrder` types and the matrix JSON reader/writer.

Author: Andrew Ridyard.

License: GNU General Public License v3 or later.

Copyright (C): 2025.
"""

import json
import logging
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from rich.console import Console
from rich.logging import RichHandler

DEFAULT_PORT = 18515
DEFAULT_SEED = 0

_logger = logging.getLogger(__name__)
logging.getLogger("rankweave").addHandler(logging.NullHandler())


def configure_logging(level: int = logging.INFO) -> logging.Logger:
    """Attach a stderr `RichHandler` to the `rankweave` package logger.

    Calling this more than once replaces the previous handler, so the CLI
    and tests can change the level freely.

    Args:
        level: Logging level for the package logger. Defaults to
            `logging.INFO`.

    Returns:
        logging.Logger: The configured `rankweave` logger.
    """
    logger = logging.getLogger("rankweave")
    for handler in list(logger.handlers):
        if isinstance(handler, RichHandler):
            logger.removeHandler(handler)

    handler = RichHandler(
        console=Console(stderr=True),
        show_path=False,
        rich_tracebacks=True,
    )
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.setLevel(level)
    return logger


class RankweaveEnv:
    """Environment variable class for `rankweave` configuration."""

    PORT = "RANKWEAVE_PORT"
    SEED = "RANKWEAVE_SEED"

    _instance = None
    _env = {}

    def __new__(cls) -> "RankweaveEnv":
        """Return a `singleton` instance of the `RankweaveEnv` class.

        1. `RANKWEAVE_PORT` - Default UDP port of echo agents
        2. `RANKWEAVE_SEED` - Default seed for solvers & simulators

        Returns:
            RankweaveEnv: A new (if not previously initialised) or singleton
                instance of the `RankweaveEnv` class.
        """
        if cls._instance is None:
            cls._instance = super(RankweaveEnv, cls).__new__(cls)
        return cls._instance

    def getenv(self, key: str) -> Union[str, None]:
        """Get environment variable from `_env` or the process environment.

        Args:
            key: Environment variable key.

        Returns:
            Environment variable value or None.
        """
        value = self._env.get(key)
        if value is None:
            value = os.environ.get(key)
        return str(value) if value else None

    def putenv(self, key: str, value: Any) -> None:
        """Set environment variable in `_env` property.

        Args:
            key: Environment variable key.

            value: Environment variable value.
        """
        self._env[key] = value

    def delenv(self, key: str) -> None:
        """Deletes an environment variable.

        Args:
            key: Environment variable key.
        """
        if key in self._env:
            del self._env[key]

    def port(self) -> int:
        """Default echo agent port (`RANKWEAVE_PORT` or 18515)."""
        return self._get_int(self.PORT, DEFAULT_PORT)

    def seed(self) -> int:
        """Default random seed (`RANKWEAVE_SEED` or 0)."""
        return self._get_int(self.SEED, DEFAULT_SEED)

    def _get_int(self, key: str, default: int) -> int:
        value = self.getenv(key)
        if value is None:
            return default
        try:
            return int(value)
        except ValueError as e:
            _logger.error(f"`${key}` is not an integer ('{value}')")
            raise ConfigurationError(f"${key} must be an integer") from e


# ------ Exceptions ------ #


class RankweaveError(Exception):
    """Base class of all `rankweave` errors."""

    pass


class ConfigurationError(RankweaveError):
    """Raised on an invalid configuration value."""

    pass


class MatrixError(RankweaveError):
    """Raised on a malformed cost matrix or matrix file."""

    pass


class RankOrderError(RankweaveError):
    """Raised on an order that is not a permutation of the hosts."""

    pass


class CollectiveSpecError(RankweaveError):
    """Raised on collective parameters the algorithm cannot run with."""

    pass


class ProbePayloadError(RankweaveError):
    """Raised on a probe payload that is not exactly 4 bytes."""

    pass


class AgentBindError(RankweaveError):
    """Raised when the echo agent cannot bind its endpoint."""

    pass


class ProbeSourceError(RankweaveError):
    """Raised when a probe socket cannot bind the source host address."""

    pass


class PairUnreachableError(RankweaveError):
    """Raised when every probe of a host pair is lost."""

    def __init__(
        self, src: str, dst: str, message: str = "", attempted: int = 0
    ) -> None:
        """Initialises `PairUnreachableError`.

        Args:
            src: Source endpoint of the pair.

            dst: Destination endpoint of the pair.

            message: Optional detail appended to the error message.

            attempted: Probes sent before the pair was given up.
        """
        self.src = src
        self.dst = dst
        self.attempted = attempted
        detail = f" ({message})" if message else ""
        super().__init__(f"Pair {src} -> {dst} unreachable{detail}")


class BruteForceLimitError(RankweaveError):
    """Raised when exhaustive search is asked for too many hosts."""

    pass


class SMTEmissionError(RankweaveError):
    """Raised when an SMT-LIB2 encoding would be too large to emit."""

    pass


class ExternalModelError(RankweaveError):
    """Raised on an unusable external solver model file."""

    pass


class TopologyError(RankweaveError):
    """Raised on an invalid synthetic topology description."""

    pass


class UndefinedCorrelationError(RankweaveError):
    """Raised when a rank correlation is undefined (constant series)."""

    pass


class HostfileError(RankweaveError):
    """Raised on a malformed hostfile."""

    pass


# ------ Domain types ------ #


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Pairwise RTT (µs) between hosts.

    Row `i`, column `j` holds the RTT measured from host `i` to host `j`.
    The array is copied on construction & made read-only.
    """

    hosts: tuple[str, ...]
    rtt: np.ndarray

    def __post_init__(self) -> None:
        """Validate shape, diagonal & entry range.

        Raises:
            MatrixError: If any `CostMatrix` invariant is violated.
        """
        hosts = tuple(str(h) for h in self.hosts)
        try:
            rtt = np.array(self.rtt, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise MatrixError("RTT values must be numeric") from e

        n = len(hosts)
        if rtt.shape != (n, n):
            raise MatrixError(
                f"RTT matrix shape {rtt.shape} does not match {n} hosts"
            )
        if len(set(hosts)) != n:
            raise MatrixError("Host identifiers must be unique")
        if not np.all(np.isfinite(rtt)):
            raise MatrixError("RTT values must be finite")
        if np.any(rtt < 0):
            raise MatrixError("RTT values must be nonnegative")
        if np.any(np.diag(rtt) != 0):
            raise MatrixError("RTT diagonal must be zero")

        rtt.setflags(write=False)
        object.__setattr__(self, "hosts", hosts)
        object.__setattr__(self, "rtt", rtt)

    @property
    def n(self) -> int:
        """Number of hosts."""
        return len(self.hosts)

    def is_symmetric(self) -> bool:
        """True if `rtt[i][j] == rtt[j][i]` for all pairs."""
        return bool(np.array_equal(self.rtt, self.rtt.T))

    def scaled(self, factor: float) -> "CostMatrix":
        """Return a copy with every entry multiplied by `factor`."""
        return CostMatrix(self.hosts, self.rtt * factor)

    def relabelled(self, mapping: Sequence[int]) -> "CostMatrix":
        """Return the matrix with host `mapping[k]` moved to index `k`."""
        index = np.asarray(mapping, dtype=np.intp)
        hosts = tuple(self.hosts[i] for i in index)
        return CostMatrix(hosts, self.rtt[np.ix_(index, index)])

    @classmethod
    def uniform(cls, n: int, value: float = 1.0) -> "CostMatrix":
        """A matrix with every off-diagonal entry equal to `value`."""
        rtt = np.full((n, n), float(value))
        np.fill_diagonal(rtt, 0.0)
        return cls(default_hosts(n), rtt)

    @classmethod
    def from_array(
        cls, rtt: Any, hosts: Optional[Iterable[str]] = None
    ) -> "CostMatrix":
        """Build a matrix from a nested sequence, naming hosts by index."""
        array = np.asarray(rtt, dtype=np.float64)
        names = tuple(hosts) if hosts is not None else default_hosts(
            array.shape[0] if array.ndim else 0
        )
        return cls(names, array)


def default_hosts(n: int) -> tuple[str, ...]:
    """Placeholder host names `h0 .. h{n-1}`."""
    return tuple(f"h{i}" for i in range(n))


@dataclass(frozen=True)
class RankOrder:
    """A rank order; `perm[i]` is the original index of the rank `i` host."""

    perm: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        """Validate that `perm` is a bijection on `[0, N-1]`.

        Raises:
            RankOrderError: If `perm` is not a permutation.
        """
        try:
            perm = tuple(int(p) for p in self.perm)
        except (TypeError, ValueError) as e:
            raise RankOrderError("Rank order entries must be integers") from e
        if sorted(perm) != list(range(len(perm))):
            raise RankOrderError(f"{list(perm)} is not a permutation")
        object.__setattr__(self, "perm", perm)

    def __len__(self) -> int:
        """Number of ranks."""
        return len(self.perm)

    @property
    def n(self) -> int:
        """Number of ranks."""
        return len(self.perm)

    @classmethod
    def identity(cls, n: int) -> "RankOrder":
        """The order that keeps every host at its original rank."""
        return cls(tuple(range(n)))

    def as_array(self) -> np.ndarray:
        """The permutation as an integer numpy array."""
        return np.asarray(self.perm, dtype=np.intp)

    def inverse(self) -> "RankOrder":
        """The order mapping original host index -> rank."""
        inverse = [0] * self.n
        for rank, host in enumerate(self.perm):
            inverse[host] = rank
        return RankOrder(tuple(inverse))

    def rotated(self, k: int) -> "RankOrder":
        """Rotate ranks by `k` positions (rank `i` takes `perm[i + k]`)."""
        if not self.perm:
            return self
        k %= self.n
        return RankOrder(self.perm[k:] + self.perm[:k])

    def reversed(self) -> "RankOrder":
        """The order with ranks reversed."""
        return RankOrder(self.perm[::-1])


# ------ Matrix files ------ #


def _read_json(path: Union[str, Path]) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise MatrixError(f"{path} is not valid JSON ({e})") from e


def _write_json(path: Union[str, Path], document: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
        f.write("\n")
    _logger.debug(f"Wrote {path}")


def matrix_to_json(hosts: Sequence[str], rtt: np.ndarray) -> dict[str, Any]:
    """Matrix JSON document; NaN entries are written as `null`."""
    rows = [
        [None if math.isnan(v) else float(v) for v in row]
        for row in np.asarray(rtt, dtype=np.float64)
    ]
    return {"hosts": list(hosts), "rtt_us": rows}


def parse_matrix_document(
    document: Any,
) -> tuple[tuple[str, ...], np.ndarray]:
    """Parse a (possibly partial) matrix JSON document.

    Args:
        document: Decoded JSON object with `hosts` & `rtt_us` members.

    Returns:
        tuple[tuple[str, ...], np.ndarray]: Hosts and the RTT array with
            `null` entries as NaN.

    Raises:
        MatrixError: If the document does not follow the matrix format.
    """
    if not isinstance(document, dict):
        raise MatrixError("Matrix document must be a JSON object")
    hosts = document.get("hosts")
    rows = document.get("rtt_us")
    if not isinstance(hosts, list) or not isinstance(rows, list):
        raise MatrixError("Matrix document needs `hosts` & `rtt_us` lists")
    n = len(hosts)
    if len(rows) != n or any(
        not isinstance(row, list) or len(row) != n for row in rows
    ):
        raise MatrixError(f"`rtt_us` must be a {n}x{n} array")
    try:
        rtt = np.array(
            [[np.nan if v is None else float(v) for v in row] for row in rows],
            dtype=np.float64,
        ).reshape(n, n)
    except (TypeError, ValueError) as e:
        raise MatrixError("`rtt_us` entries must be numbers or null") from e
    return tuple(str(h) for h in hosts), rtt


def load_matrix(path: Union[str, Path]) -> CostMatrix:
    """Read a complete matrix JSON file.

    Raises:
        MatrixError: If the file is malformed or has missing entries.
    """
    hosts, rtt = parse_matrix_document(_read_json(path))
    missing = np.isnan(rtt)
    np.fill_diagonal(missing, False)
    if missing.any():
        count = int(missing.sum())
        raise MatrixError(f"{path} is partial ({count} entries missing)")
    np.fill_diagonal(rtt, 0.0)
    return CostMatrix(hosts, rtt)


def save_matrix(path: Union[str, Path], matrix: CostMatrix) -> None:
    """Write a matrix JSON file."""
    _write_json(path, matrix_to_json(matrix.hosts, matrix.rtt))
