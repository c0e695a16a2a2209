# pyright: reportAttributeAccessIssue=false
"""Loopback integration test module.

Tests run real echo agents & probers over UDP on `127.0.0.1`.

1. `agent_threads` fixture runs echo agents on their own event loops, so
   synchronous entry points (the CLI) can probe them.

2. Test the echo agent reflects probes & drops malformed datagrams.

3. Test `probe_pair` & `build_cost_matrix` against live agents.

4. Test unreachable pairs, mismatched replies, early aborts & unusable
   source addresses.

5. Test the `probe` command end to end.

Author: Andrew Ridyard.

License: GNU General Public License v3 or later.

Copyright (C): 2025."""

import asyncio
import logging
import threading
from collections.abc import Callable, Generator
from typing import Any

import pytest
from rich.console import Console
from rich.logging import RichHandler

LOOPBACK = "127.0.0.1"

_console = Console()
_rich_handler = RichHandler(console=_console, rich_tracebacks=True)
_logger = logging.getLogger("integration")
_logger.handlers.clear()
_logger.setLevel(logging.DEBUG)
_logger.addHandler(_rich_handler)


class _ClientProtocol(asyncio.DatagramProtocol):
    def __init__(self) -> None:
        self.replies: asyncio.Queue = asyncio.Queue()

    def datagram_received(self, data: bytes, addr: tuple[Any, ...]) -> None:
        self.replies.put_nowait(data)


async def _client(port: int) -> tuple[asyncio.DatagramTransport, Any]:
    loop = asyncio.get_running_loop()
    return await loop.create_datagram_endpoint(
        _ClientProtocol, remote_addr=(LOOPBACK, port)
    )


class _ScriptedAgent(asyncio.DatagramProtocol):
    """Answers datagram `k` with the replies `script(k, data)` returns."""

    def __init__(self, script: Callable[[int, bytes], list[bytes]]) -> None:
        self.script = script
        self.received = 0
        self.transport: Any = None

    def connection_made(self, transport: Any) -> None:
        self.transport = transport

    def datagram_received(self, data: bytes, addr: tuple[Any, ...]) -> None:
        for reply in self.script(self.received, data):
            self.transport.sendto(reply, addr)
        self.received += 1


async def _scripted_agent(
    script: Callable[[int, bytes], list[bytes]],
) -> tuple[asyncio.DatagramTransport, int]:
    loop = asyncio.get_running_loop()
    transport, _ = await loop.create_datagram_endpoint(
        lambda: _ScriptedAgent(script), local_addr=(LOOPBACK, 0)
    )
    return transport, transport.get_extra_info("sockname")[1]


def _other_round(data: bytes) -> bytes:
    from rankweave.prober import MAX_ROUND_ID, decode_probe, encode_probe

    round_id, sequence = decode_probe(data)
    return encode_probe((round_id + 1) & MAX_ROUND_ID, sequence)


class _AgentThread(threading.Thread):
    """An echo agent served from a background event loop."""

    def __init__(self) -> None:
        super().__init__(daemon=True)
        self.ready = threading.Event()
        self.port = 0
        self.loop: asyncio.AbstractEventLoop
        self.stop: asyncio.Event

    def run(self) -> None:
        asyncio.run(self._serve())

    async def _serve(self) -> None:
        from rankweave.prober import start_echo_agent

        self.loop = asyncio.get_running_loop()
        self.stop = asyncio.Event()
        transport, _ = await start_echo_agent(LOOPBACK, 0)
        self.port = transport.get_extra_info("sockname")[1]
        self.ready.set()
        try:
            await self.stop.wait()
        finally:
            transport.close()

    def close(self) -> None:
        self.loop.call_soon_threadsafe(self.stop.set)
        self.join(timeout=5)


@pytest.fixture(scope="module")
def agent_threads() -> Generator[list[_AgentThread]]:
    """Yields two running background echo agents."""
    agents = [_AgentThread(), _AgentThread()]
    try:
        for agent in agents:
            agent.start()
            if not agent.ready.wait(timeout=5):
                pytest.skip("Echo agent did not start")
            _logger.info(f"Background echo agent on {LOOPBACK}:{agent.port}")
        yield agents
    finally:
        for agent in agents:
            if agent.ready.is_set():
                agent.close()


# ------ Echo agent ------ #


@pytest.mark.asyncio
async def test_agent_echoes_probes(echo_agent) -> None:
    """Test a 4-byte probe comes back unmodified."""
    from rankweave.prober import encode_probe

    endpoint, protocol = echo_agent
    transport, client = await _client(endpoint.port)
    try:
        payload = encode_probe(3, 42)
        transport.sendto(payload)
        assert await asyncio.wait_for(client.replies.get(), 2.0) == payload
    finally:
        transport.close()
    assert protocol.echoed == 1


@pytest.mark.asyncio
async def test_agent_drops_malformed_datagrams(echo_agent) -> None:
    """Test datagrams other than 4 bytes get no reply."""
    endpoint, protocol = echo_agent
    transport, client = await _client(endpoint.port)
    try:
        transport.sendto(b"abc")
        transport.sendto(b"abcde")
        with pytest.raises(asyncio.TimeoutError):
            await asyncio.wait_for(client.replies.get(), 0.2)
    finally:
        transport.close()
    assert protocol.dropped == 2
    assert protocol.echoed == 0


@pytest.mark.asyncio
async def test_agent_serves_concurrent_senders(echo_agent) -> None:
    """Test replies reach the sender of each probe."""
    from rankweave.prober import encode_probe

    endpoint, _ = echo_agent
    clients = [await _client(endpoint.port) for _ in range(4)]
    try:
        for k, (transport, _) in enumerate(clients):
            for sequence in range(10):
                transport.sendto(encode_probe(k, sequence))
        for k, (_, client) in enumerate(clients):
            replies = [
                await asyncio.wait_for(client.replies.get(), 2.0)
                for _ in range(10)
            ]
            assert sorted(replies) == [encode_probe(k, s) for s in range(10)]
    finally:
        for transport, _ in clients:
            transport.close()


@pytest.mark.asyncio
async def test_agent_port_in_use(echo_agent) -> None:
    """Test binding an occupied port raises `AgentBindError`."""
    from rankweave.core import AgentBindError
    from rankweave.prober import start_echo_agent

    endpoint, _ = echo_agent
    with pytest.raises(AgentBindError):
        await start_echo_agent(LOOPBACK, endpoint.port)


# ------ Probing ------ #


@pytest.mark.asyncio
async def test_probe_pair_loopback(echo_agent) -> None:
    """Test loopback RTT samples are sub-millisecond with no loss."""
    from rankweave.hostfile import Endpoint
    from rankweave.prober import ProbeConfig, probe_pair

    endpoint, protocol = echo_agent
    config = ProbeConfig(probes_per_pair=200, timeout=1.0)
    result = await probe_pair(Endpoint(LOOPBACK, 0), endpoint, config, 7)

    assert result.lost == 0
    assert len(result.samples) == 200
    assert all(0 < s < 1000 for s in result.samples)
    assert protocol.echoed == 200


@pytest.mark.asyncio
async def test_build_cost_matrix_loopback(echo_agents, tmp_path) -> None:
    """Test two live agents give a symmetric 2x2 matrix."""
    from rankweave.core import load_matrix
    from rankweave.prober import ProbeConfig, build_cost_matrix

    checkpoint = tmp_path / "matrix.json"
    config = ProbeConfig(probes_per_pair=100, percentile=10)
    matrix = await build_cost_matrix(
        echo_agents, config, checkpoint=checkpoint
    )

    assert matrix.n == 2
    assert matrix.is_symmetric()
    assert 0 < matrix.rtt[0, 1] < 1000
    assert matrix.hosts == tuple(str(e) for e in echo_agents)
    assert load_matrix(checkpoint).rtt[0, 1] > 0


@pytest.mark.asyncio
async def test_probe_unreachable_pair(unused_udp_port: int) -> None:
    """Test a pair with no agent raises `PairUnreachableError`."""
    from rankweave.core import PairUnreachableError
    from rankweave.hostfile import Endpoint
    from rankweave.prober import ProbeConfig, probe_pair

    config = ProbeConfig(
        probes_per_pair=20, timeout=0.05, max_consecutive_losses=3
    )
    dst = Endpoint(LOOPBACK, unused_udp_port)
    with pytest.raises(PairUnreachableError) as e:
        await probe_pair(Endpoint(LOOPBACK, 0), dst, config)
    assert e.value.dst == str(dst)
    assert e.value.attempted == 3


@pytest.mark.asyncio
async def test_probe_from_foreign_source(echo_agent) -> None:
    """Test a source address that is not local raises `ProbeSourceError`."""
    from rankweave.core import ProbeSourceError
    from rankweave.hostfile import Endpoint
    from rankweave.prober import ProbeConfig, probe_pair

    endpoint, _ = echo_agent
    with pytest.raises(ProbeSourceError):
        await probe_pair(
            Endpoint("192.0.2.1", 0), endpoint, ProbeConfig(timeout=0.1)
        )


@pytest.mark.asyncio
async def test_mismatched_reply_counts_as_late() -> None:
    """Test a reply from another round is skipped for the matching one."""
    from rankweave.hostfile import Endpoint
    from rankweave.prober import ProbeConfig, probe_pair

    def script(k: int, data: bytes) -> list[bytes]:
        return [_other_round(data), data] if k == 0 else [data]

    transport, port = await _scripted_agent(script)
    try:
        config = ProbeConfig(probes_per_pair=5, timeout=1.0)
        result = await probe_pair(
            Endpoint(LOOPBACK, 0), Endpoint(LOOPBACK, port), config
        )
    finally:
        transport.close()

    assert len(result.samples) == 5
    assert (result.lost, result.late) == (0, 1)


@pytest.mark.asyncio
async def test_only_mismatched_replies_count_as_lost() -> None:
    """Test a probe answered only by a stale reply is lost & late."""
    from rankweave.hostfile import Endpoint
    from rankweave.prober import ProbeConfig, probe_pair

    def script(k: int, data: bytes) -> list[bytes]:
        return [_other_round(data)] if k == 0 else [data]

    transport, port = await _scripted_agent(script)
    try:
        config = ProbeConfig(probes_per_pair=5, timeout=0.2)
        result = await probe_pair(
            Endpoint(LOOPBACK, 0), Endpoint(LOOPBACK, port), config
        )
    finally:
        transport.close()

    assert len(result.samples) == 4
    assert (result.lost, result.late) == (1, 1)
    assert result.attempted == 5


@pytest.mark.asyncio
async def test_consecutive_losses_end_the_pair_early() -> None:
    """Test a pair stops after `max_consecutive_losses` losses in a row."""
    from rankweave.hostfile import Endpoint
    from rankweave.prober import ProbeConfig, probe_pair

    def script(k: int, data: bytes) -> list[bytes]:
        return [data] if k < 2 else []

    transport, port = await _scripted_agent(script)
    try:
        config = ProbeConfig(
            probes_per_pair=20, timeout=0.05, max_consecutive_losses=3
        )
        result = await probe_pair(
            Endpoint(LOOPBACK, 0), Endpoint(LOOPBACK, port), config
        )
    finally:
        transport.close()

    assert len(result.samples) == 2
    assert result.lost == 3
    assert result.attempted == 5


# ------ Command line ------ #


def test_probe_command_loopback(agent_threads, tmp_path) -> None:
    """Test `rankweave probe` against a live agent."""
    from rankweave.cli import main
    from rankweave.core import load_matrix

    hosts = tmp_path / "hosts"
    hosts.write_text("".join(f"{LOOPBACK}:{a.port}\n" for a in agent_threads))
    out = tmp_path / "matrix.json"
    args = ["--hosts", str(hosts), "--out", str(out), "--count", "50"]
    code = main(["-q", "probe", *args])

    assert code == 0
    matrix = load_matrix(out)
    assert matrix.n == 2
    assert 0 < matrix.rtt[0, 1] < 1000

    logger = logging.getLogger("rankweave")
    for handler in list(logger.handlers):
        if isinstance(handler, RichHandler):
            logger.removeHandler(handler)
