"""Pairwise RTT probing over UDP.

Every host runs an echo agent (`run_echo_agent`) which reflects 4-byte
probe datagrams to their sender. A coordinator probes each ordered host pair
sequentially (`probe_pair`), reduces the samples of a pair to a robust RTT
estimate (`aggregate_rtt`) and assembles a symmetric `CostMatrix`
(`build_cost_matrix`).

Probe wire format - one 32-bit big-endian word:

    bits 31..24  round id (8 bits)
    bits 23..0   sequence number (24 bits)

A reply only counts for the probe it answers; replies carrying another
payload are late and discarded.

Author: Andrew Ridyard.

License: GNU General Public License v3 or later.

Copyright (C): 2025.
"""

import asyncio
import logging
import math
import struct
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .core import (
    DEFAULT_PORT,
    AgentBindError,
    ConfigurationError,
    CostMatrix,
    MatrixError,
    PairUnreachableError,
    ProbePayloadError,
    ProbeSourceError,
    _read_json,
    _write_json,
    matrix_to_json,
    parse_matrix_document,
)
from .hostfile import Endpoint

_logger = logging.getLogger(__name__)

PAYLOAD_SIZE = 4
MAX_ROUND_ID = 0xFF
MAX_SEQUENCE = 0xFFFFFF
_WORD = struct.Struct(">I")


# ------ Wire codec ------ #


def encode_probe(round_id: int, sequence: int) -> bytes:
    """Pack a round id & sequence number into a 4-byte probe payload.

    Args:
        round_id: Probe round, in `[0, 255]`.

        sequence: Sequence number within the round, in `[0, 2^24 - 1]`.

    Returns:
        bytes: Big-endian payload.

    Raises:
        ProbePayloadError: If either field is out of range.
    """
    if not 0 <= round_id <= MAX_ROUND_ID:
        raise ProbePayloadError(f"Round id {round_id} out of range")
    if not 0 <= sequence <= MAX_SEQUENCE:
        raise ProbePayloadError(f"Sequence {sequence} out of range")
    return _WORD.pack((round_id << 24) | sequence)


def decode_probe(payload: bytes) -> tuple[int, int]:
    """Unpack a probe payload into `(round_id, sequence)`.

    Raises:
        ProbePayloadError: If the payload is not exactly 4 bytes.
    """
    if len(payload) != PAYLOAD_SIZE:
        raise ProbePayloadError(
            f"Probe payload must be {PAYLOAD_SIZE} bytes, got {len(payload)}"
        )
    (word,) = _WORD.unpack(payload)
    return word >> 24, word & MAX_SEQUENCE


# ------ Configuration & results ------ #


@dataclass(frozen=True)
class ProbeConfig:
    """Probe pipeline parameters.

    Attributes:
        probes_per_pair: Probes sent for each ordered pair.

        percentile: Nearest-rank percentile taken as the pair RTT.

        timeout: Seconds to wait for each reply.

        port: Default agent UDP port for endpoints without one.

        gap: Seconds to wait between a reply (or loss) and the next probe.

        max_consecutive_losses: Abort a pair after this many losses in a row.

        parallel: Probe pairs concurrently instead of one at a time.
    """

    probes_per_pair: int = 10_000
    percentile: int = 10
    timeout: float = 1.0
    port: int = DEFAULT_PORT
    gap: float = 0.0
    max_consecutive_losses: int = 100
    parallel: bool = False

    def __post_init__(self) -> None:
        """Validate ranges.

        Raises:
            ConfigurationError: On an out of range parameter.
        """
        if self.probes_per_pair < 1:
            raise ConfigurationError("`probes_per_pair` must be >= 1")
        if not 1 <= self.percentile <= 100:
            raise ConfigurationError("`percentile` must be in [1, 100]")
        if not self.timeout > 0:
            raise ConfigurationError("`timeout` must be > 0")
        if self.gap < 0:
            raise ConfigurationError("`gap` must be >= 0")
        if self.max_consecutive_losses < 1:
            raise ConfigurationError(
                "`max_consecutive_losses` must be >= 1"
            )


@dataclass(frozen=True)
class ProbeSampleSet:
    """RTT samples (µs) collected for one ordered pair.

    `lost` counts every probe without a matching reply, including those
    whose only replies were `late` (mismatched payloads).
    """

    src: str
    dst: str
    samples: tuple[float, ...]
    lost: int = 0
    late: int = 0

    @property
    def attempted(self) -> int:
        """Number of probes sent."""
        return len(self.samples) + self.lost


def aggregate_rtt(samples: Sequence[float], percentile: int = 10) -> float:
    """Nearest-rank percentile of the samples.

    The estimate is the value at index `ceil(p / 100 * n) - 1` of the
    ascending sort, which filters out probes delayed by interference.

    Raises:
        ValueError: If `samples` is empty or `percentile` is out of range.
    """
    values = np.sort(np.asarray(samples, dtype=np.float64))
    n = values.size
    if n == 0:
        raise ValueError("Cannot aggregate an empty sample set")
    if not 1 <= percentile <= 100:
        raise ValueError("`percentile` must be in [1, 100]")
    # integer ceil avoids float rounding in p / 100 * n
    index = -(-percentile * n // 100) - 1
    return float(values[index])


def symmetrize(rtt: np.ndarray) -> np.ndarray:
    """Return `max(rtt, rtt.T)` elementwise with a zero diagonal.

    Raises:
        MatrixError: If `rtt` is not square.
    """
    array = np.asarray(rtt, dtype=np.float64)
    if array.ndim != 2 or array.shape[0] != array.shape[1]:
        raise MatrixError(f"Cannot symmetrize an array of shape {array.shape}")
    out = np.maximum(array, array.T)
    np.fill_diagonal(out, 0.0)
    return out


# ------ Echo agent ------ #


class EchoProtocol(asyncio.DatagramProtocol):
    """Reflects every 4-byte datagram to its sender; drops anything else."""

    def __init__(self) -> None:
        """Initialises the `EchoProtocol` class."""
        self.transport: Optional[asyncio.DatagramTransport] = None
        self.echoed = 0
        self.dropped = 0

    def connection_made(self, transport: asyncio.BaseTransport) -> None:
        """Keep the transport for replies."""
        self.transport = transport  # type: ignore[assignment]

    def datagram_received(self, data: bytes, addr: tuple[Any, ...]) -> None:
        """Echo a well formed probe unmodified."""
        if len(data) != PAYLOAD_SIZE or self.transport is None:
            self.dropped += 1
            return
        self.transport.sendto(data, addr)
        self.echoed += 1

    def error_received(self, exc: Exception) -> None:
        """Log socket errors; the agent keeps serving."""
        _logger.debug(f"Echo agent socket error - {exc}")


async def start_echo_agent(
    host: str = "0.0.0.0", port: int = DEFAULT_PORT
) -> tuple[asyncio.DatagramTransport, EchoProtocol]:
    """Bind an echo agent endpoint and return its transport & protocol.

    Raises:
        AgentBindError: If the endpoint cannot be bound.
    """
    loop = asyncio.get_running_loop()
    try:
        transport, protocol = await loop.create_datagram_endpoint(
            EchoProtocol, local_addr=(host, port)
        )
    except OSError as e:
        _logger.error(f"Echo agent cannot bind {host}:{port} - {e}")
        raise AgentBindError(f"Cannot bind {host}:{port} ({e})") from e
    address = transport.get_extra_info("sockname")
    _logger.info(f"Echo agent listening on {address[0]}:{address[1]}")
    return transport, protocol  # type: ignore[return-value]


async def run_echo_agent(
    host: str = "0.0.0.0",
    port: int = DEFAULT_PORT,
    stop: Optional[asyncio.Event] = None,
) -> None:
    """Serve probes until `stop` is set or the task is cancelled.

    Args:
        host: Bind address.

        port: Bind UDP port.

        stop: Optional event ending the agent cleanly.

    Raises:
        AgentBindError: If the endpoint cannot be bound.
    """
    transport, protocol = await start_echo_agent(host, port)
    try:
        if stop is None:
            await asyncio.Future()
        else:
            await stop.wait()
    finally:
        transport.close()
        _logger.info(
            f"Echo agent stopped ({protocol.echoed} echoed, "
            f"{protocol.dropped} dropped)"
        )


# ------ Probing ------ #


class _ProbeClientProtocol(asyncio.DatagramProtocol):
    """Queues `(payload, receive_ns)` for each reply."""

    def __init__(self) -> None:
        self.replies: asyncio.Queue = asyncio.Queue()

    def datagram_received(self, data: bytes, addr: tuple[Any, ...]) -> None:
        self.replies.put_nowait((data, time.perf_counter_ns()))

    def error_received(self, exc: Exception) -> None:
        # e.g. ICMP port unreachable; the probe will time out
        _logger.debug(f"Probe socket error - {exc}")


async def _await_reply(
    protocol: _ProbeClientProtocol, expected: bytes, timeout: float
) -> tuple[Optional[int], int]:
    """Wait for `expected`; return `(receive_ns or None, late_count)`."""
    loop = asyncio.get_running_loop()
    deadline = loop.time() + timeout
    late = 0
    while True:
        remaining = deadline - loop.time()
        if remaining <= 0:
            return None, late
        try:
            data, received_ns = await asyncio.wait_for(
                protocol.replies.get(), remaining
            )
        except asyncio.TimeoutError:
            return None, late
        if data == expected:
            return received_ns, late
        late += 1


async def probe_pair(
    src: Union[str, Endpoint],
    dst: Union[str, Endpoint],
    config: ProbeConfig,
    round_id: int = 0,
) -> ProbeSampleSet:
    """Probe `dst` from a socket bound to the `src` host address.

    Probes are strictly sequential: the next probe is only sent after the
    previous reply arrived or timed out.

    Args:
        src: Source endpoint; its host must be a local address.

        dst: Destination endpoint running an echo agent.

        config: Probe parameters.

        round_id: Round id stamped on every probe of this pair.

    Returns:
        ProbeSampleSet: Samples in microseconds and loss counts.

    Raises:
        ProbeSourceError: If the `src` host address cannot be bound.

        PairUnreachableError: If no probe of the pair was answered.
    """
    src = Endpoint.parse(src, config.port) if isinstance(src, str) else src
    dst = Endpoint.parse(dst, config.port) if isinstance(dst, str) else dst
    loop = asyncio.get_running_loop()
    try:
        transport, protocol = await loop.create_datagram_endpoint(
            _ProbeClientProtocol,
            local_addr=(src.host, 0),
            remote_addr=(dst.host, dst.port),
        )
    except OSError as e:
        _logger.error(f"Cannot probe from {src} - {e}")
        raise ProbeSourceError(f"Cannot bind probe source {src} ({e})") from e

    samples: list[float] = []
    lost = late = consecutive = 0
    round_id &= MAX_ROUND_ID
    try:
        for probe in range(config.probes_per_pair):
            payload = encode_probe(round_id, probe & MAX_SEQUENCE)
            sent_ns = time.perf_counter_ns()
            transport.sendto(payload)
            received_ns, stale = await _await_reply(
                protocol, payload, config.timeout
            )
            late += stale
            if received_ns is None:
                lost += 1
                consecutive += 1
                _logger.debug(f"{src} -> {dst}: probe {probe} lost")
                if consecutive >= config.max_consecutive_losses:
                    _logger.debug(
                        f"{src} -> {dst}: {consecutive} consecutive losses"
                    )
                    break
            else:
                consecutive = 0
                samples.append((received_ns - sent_ns) / 1000.0)
            if config.gap:
                await asyncio.sleep(config.gap)
    finally:
        transport.close()

    if not samples:
        raise PairUnreachableError(
            str(src), str(dst), f"{lost} probes lost", attempted=lost
        )
    return ProbeSampleSet(str(src), str(dst), tuple(samples), lost, late)


ProgressCallback = Callable[[int, int, ProbeSampleSet, float], None]


def load_partial_matrix(
    path: Union[str, Path], hosts: Sequence[str]
) -> np.ndarray:
    """Read a partial matrix file written for the same `hosts`.

    Returns:
        np.ndarray: RTT values with NaN for entries still to probe.

    Raises:
        MatrixError: If the file lists different hosts.
    """
    file_hosts, rtt = parse_matrix_document(_read_json(path))
    if list(file_hosts) != list(hosts):
        raise MatrixError(f"{path} was written for a different host list")
    return rtt


def save_partial_matrix(
    path: Union[str, Path], hosts: Sequence[str], rtt: np.ndarray
) -> None:
    """Write a (possibly partial) matrix with `null` for missing entries."""
    _write_json(path, matrix_to_json(hosts, rtt))


def merge_partial_matrices(
    documents: Sequence[tuple[Sequence[str], np.ndarray]],
) -> tuple[tuple[str, ...], np.ndarray]:
    """Merge partial matrices over the same hosts.

    Entries present in several inputs keep the larger value, matching the
    symmetrisation rule.

    Raises:
        MatrixError: If the inputs list different hosts.
    """
    if not documents:
        raise MatrixError("Nothing to merge")
    hosts = tuple(documents[0][0])
    merged = np.full((len(hosts), len(hosts)), np.nan)
    for other_hosts, rtt in documents:
        if tuple(other_hosts) != hosts:
            raise MatrixError("Cannot merge matrices over different hosts")
        merged = np.fmax(merged, rtt)
    return hosts, merged


def finalize_matrix(hosts: Sequence[str], rtt: np.ndarray) -> CostMatrix:
    """Symmetrize a complete raw matrix into a `CostMatrix`.

    Raises:
        MatrixError: If off-diagonal entries are still missing.
    """
    raw = np.array(rtt, dtype=np.float64)
    np.fill_diagonal(raw, 0.0)
    if np.isnan(raw).any():
        raise MatrixError(f"{int(np.isnan(raw).sum())} entries missing")
    return CostMatrix(tuple(hosts), symmetrize(raw))


def _pending_pairs(
    n: int, rtt: np.ndarray, sources: Optional[set[int]]
) -> list[tuple[int, int]]:
    return [
        (i, j)
        for i in range(n)
        for j in range(n)
        if i != j
        and np.isnan(rtt[i, j])
        and (sources is None or i in sources)
    ]


async def build_cost_matrix(
    hosts: Sequence[Union[str, Endpoint]],
    config: ProbeConfig,
    *,
    checkpoint: Optional[Union[str, Path]] = None,
    resume: bool = False,
    sources: Optional[Sequence[str]] = None,
    progress: Optional[ProgressCallback] = None,
) -> Union[CostMatrix, np.ndarray]:
    """Probe every ordered pair and assemble the symmetric cost matrix.

    Pairs are probed one at a time (unless `config.parallel`) so probes do
    not interfere with each other. Each pair is reduced with
    `aggregate_rtt`; the raw matrix is symmetrised at the end.

    Args:
        hosts: Host endpoints, in rank order of the input list.

        config: Probe parameters.

        checkpoint: Partial matrix file updated after every pair, and
            written on failure.

        resume: Load `checkpoint` first and only probe missing entries.

        sources: Only probe rows whose source endpoint is listed; the
            result is then the raw partial array rather than a matrix.

        progress: Called as `progress(done, total, samples, rtt_us)` after
            each pair.

    Returns:
        CostMatrix | np.ndarray: The symmetric matrix, or the raw partial
            array (NaN for unprobed entries) when `sources` is given.

    Raises:
        MatrixError: If fewer than 2 hosts are given.

        PairUnreachableError: If a pair cannot be probed; the matrix so far
            is persisted to `checkpoint` first.
    """
    endpoints = [
        h if isinstance(h, Endpoint) else Endpoint.parse(h, config.port)
        for h in hosts
    ]
    names = [str(e) for e in endpoints]
    n = len(endpoints)
    if n < 2:
        raise MatrixError("need >= 2 hosts")

    rtt = np.full((n, n), np.nan)
    if resume and checkpoint is not None and Path(checkpoint).exists():
        rtt = load_partial_matrix(checkpoint, names)
        _logger.warning(f"Resuming from {checkpoint}")
    np.fill_diagonal(rtt, 0.0)

    selected = None
    if sources is not None:
        wanted = {str(Endpoint.parse(s, config.port)) for s in sources}
        selected = {i for i, name in enumerate(names) if name in wanted}
    pending = _pending_pairs(n, rtt, selected)
    total = len(pending)
    _logger.info(f"Probing {total} ordered pairs over {n} hosts")

    async def measure(index: int, i: int, j: int) -> None:
        try:
            result = await probe_pair(
                endpoints[i], endpoints[j], config, round_id=index
            )
        except (PairUnreachableError, ProbeSourceError):
            if checkpoint is not None:
                save_partial_matrix(checkpoint, names, rtt)
            raise
        rtt[i, j] = aggregate_rtt(result.samples, config.percentile)
        if checkpoint is not None and not config.parallel:
            save_partial_matrix(checkpoint, names, rtt)
        done = int(np.count_nonzero(~np.isnan(rtt))) - n
        _logger.info(
            f"[{done}/{n * (n - 1)}] {names[i]} -> {names[j]}: "
            f"{rtt[i, j]:.1f} us ({len(result.samples)} samples, "
            f"{result.lost} lost)"
        )
        if progress is not None:
            progress(index + 1, total, result, float(rtt[i, j]))

    if config.parallel:
        await asyncio.gather(
            *(measure(k, i, j) for k, (i, j) in enumerate(pending))
        )
        if checkpoint is not None:
            save_partial_matrix(checkpoint, names, rtt)
    else:
        for k, (i, j) in enumerate(pending):
            await measure(k, i, j)

    if sources is not None:
        return rtt
    return finalize_matrix(names, rtt)


def rtt_spread(matrix: CostMatrix) -> float:
    """Ratio of the largest to the smallest off-diagonal RTT."""
    mask = ~np.eye(matrix.n, dtype=bool)
    values = matrix.rtt[mask]
    low = float(values.min()) if values.size else 0.0
    return math.inf if low == 0 else float(values.max()) / low
