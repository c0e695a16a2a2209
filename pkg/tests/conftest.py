"""Pytest `conftest` with shared fixtures.

Fixtures include seeded generators, random cost matrices, a clean
`RankweaveEnv` singleton & loopback echo agents.

Author: Andrew Ridyard.

License: GNU General Public License v3 or later.

Copyright (C): 2025.
"""

from collections.abc import AsyncIterator, Callable
from typing import Any

import numpy as np
import pytest
import pytest_asyncio

LOOPBACK = "127.0.0.1"


def random_rtt(n: int, seed: int, symmetric: bool = False) -> np.ndarray:
    """Random RTT array with entries in [1, 100) and a zero diagonal."""
    rng = np.random.default_rng(seed)
    rtt = rng.uniform(1.0, 100.0, size=(n, n))
    if symmetric:
        rtt = np.triu(rtt, 1)
        rtt = rtt + rtt.T
    np.fill_diagonal(rtt, 0.0)
    return rtt


@pytest.fixture
def rng() -> np.random.Generator:
    """A seeded numpy generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def make_matrix() -> Callable[..., Any]:
    """Factory for random `CostMatrix` instances."""
    from rankweave.core import CostMatrix

    def factory(n: int, seed: int = 0, symmetric: bool = False) -> Any:
        return CostMatrix.from_array(random_rtt(n, seed, symmetric))

    return factory


@pytest.fixture
def rankweave_env_instance() -> Any:
    """Provides a clean `RankweaveEnv` instance for each test."""
    from rankweave.core import RankweaveEnv

    # clear singleton instance & environment for test isolation
    RankweaveEnv._instance = None
    RankweaveEnv._env = {}
    yield RankweaveEnv()
    RankweaveEnv._instance = None
    RankweaveEnv._env = {}


@pytest.fixture
def two_rack_topology() -> Any:
    """64 hosts in 2 racks of 32 with a 4:1 oversubscribed top level."""
    from rankweave.topology import Level, TopologySpec

    return TopologySpec(
        levels=(
            Level(fanout=32, latency_us=1.0, bandwidth_Bpus=1000.0),
            Level(
                fanout=2, latency_us=200.0, bandwidth_Bpus=1000.0, oversub=4.0
            ),
        ),
        jitter=0.1,
        seed=7,
    )


@pytest_asyncio.fixture
async def echo_agent() -> AsyncIterator[Any]:
    """An echo agent on an ephemeral loopback port.

    Yields `(endpoint, protocol)` so tests can inspect the echo counters.
    """
    from rankweave.hostfile import Endpoint
    from rankweave.prober import start_echo_agent

    transport, protocol = await start_echo_agent(LOOPBACK, 0)
    port = transport.get_extra_info("sockname")[1]
    yield Endpoint(LOOPBACK, port), protocol
    transport.close()


@pytest_asyncio.fixture
async def echo_agents() -> AsyncIterator[list[Any]]:
    """Two echo agents on ephemeral loopback ports."""
    from rankweave.hostfile import Endpoint
    from rankweave.prober import start_echo_agent

    transports = []
    endpoints = []
    for _ in range(2):
        transport, _ = await start_echo_agent(LOOPBACK, 0)
        transports.append(transport)
        port = transport.get_extra_info("sockname")[1]
        endpoints.append(Endpoint(LOOPBACK, port))
    yield endpoints
    for transport in transports:
        transport.close()
