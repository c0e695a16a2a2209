# pyright: reportUndefinedVariable=false
"""Prober unit tests for `rankweave.prober`.

Wire codec, sample aggregation, symmetrisation, probe configuration and the
partial matrix (resume & merge) helpers. Socket level behaviour is covered
by the loopback integration tests.

Author: Andrew Ridyard.

License: GNU General Public License v3 or later.

Copyright (C): 2025.
"""

import logging
from unittest.mock import MagicMock

import numpy as np
import pytest
from pytest_mock import MockerFixture


@pytest.mark.parametrize(
    "round_id, sequence, payload",
    [
        (0, 0, b"\x00\x00\x00\x00"),
        (1, 2, b"\x01\x00\x00\x02"),
        (255, 2**24 - 1, b"\xff\xff\xff\xff"),
    ],
)
def test_encode_probe(round_id: int, sequence: int, payload: bytes) -> None:
    """Test the big-endian probe layout."""
    from rankweave.prober import decode_probe, encode_probe

    assert encode_probe(round_id, sequence) == payload
    assert decode_probe(payload) == (round_id, sequence)


def test_probe_codec_random_values() -> None:
    """Test decode inverts encode over random 32-bit words."""
    from rankweave.prober import decode_probe, encode_probe

    rng = np.random.default_rng(42)
    for word in rng.integers(0, 2**32, size=100_000, dtype=np.uint64):
        word = int(word)
        payload = word.to_bytes(4, "big")
        round_id, sequence = decode_probe(payload)
        assert encode_probe(round_id, sequence) == payload


def test_probe_codec_errors() -> None:
    """Test out of range fields & wrong payload lengths raise."""
    from rankweave.core import ProbePayloadError
    from rankweave.prober import decode_probe, encode_probe

    with pytest.raises(ProbePayloadError):
        encode_probe(256, 0)

    with pytest.raises(ProbePayloadError):
        encode_probe(0, 2**24)

    for payload in (b"", b"\x01\x02\x03", b"\x00" * 5):
        with pytest.raises(ProbePayloadError):
            decode_probe(payload)


def test_aggregate_rtt_examples() -> None:
    """Test nearest-rank percentile examples."""
    from rankweave.prober import aggregate_rtt

    assert aggregate_rtt([5.0]) == 5.0
    assert aggregate_rtt(list(range(1, 101)), 10) == 10.0
    assert aggregate_rtt([9, 3, 7, 1, 5], 10) == 1.0
    assert aggregate_rtt([9, 3, 7, 1, 5], 100) == 9.0
    assert aggregate_rtt([9, 3, 7, 1, 5], 50) == 5.0


def test_aggregate_rtt_properties() -> None:
    """Test aggregation ignores sample order & is monotone in percentile."""
    from rankweave.prober import aggregate_rtt

    rng = np.random.default_rng(0)
    samples = rng.exponential(50.0, size=997)
    shuffled = rng.permutation(samples)
    estimates = [aggregate_rtt(samples, p) for p in range(1, 101)]

    assert aggregate_rtt(shuffled, 10) == aggregate_rtt(samples, 10)
    assert estimates == sorted(estimates)


def test_aggregate_rtt_errors() -> None:
    """Test empty samples & bad percentiles raise."""
    from rankweave.prober import aggregate_rtt

    with pytest.raises(ValueError):
        aggregate_rtt([])

    with pytest.raises(ValueError):
        aggregate_rtt([1.0], 0)


def test_symmetrize() -> None:
    """Test the elementwise max rule, idempotence & zero diagonal."""
    from rankweave.core import MatrixError
    from rankweave.prober import symmetrize

    np.testing.assert_array_equal(
        symmetrize(np.array([[0, 5], [3, 0]])), [[0, 5], [5, 0]]
    )
    out = symmetrize(np.array([[0, 1, 2], [4, 0, 3], [2, 9, 0]]))
    np.testing.assert_array_equal(out, [[0, 4, 2], [4, 0, 9], [2, 9, 0]])
    np.testing.assert_array_equal(symmetrize(out), out)
    np.testing.assert_array_equal(
        np.diag(symmetrize(np.array([[7, 1], [1, 7]]))), [0, 0]
    )

    with pytest.raises(MatrixError):
        symmetrize(np.zeros((2, 3)))


def test_probe_config_validation() -> None:
    """Test `ProbeConfig` defaults & range checks."""
    from rankweave.core import DEFAULT_PORT, ConfigurationError
    from rankweave.prober import ProbeConfig

    config = ProbeConfig()
    assert config.probes_per_pair == 10_000
    assert config.percentile == 10
    assert config.port == DEFAULT_PORT
    assert config.gap == 0.0
    assert not config.parallel

    for bad in (
        {"probes_per_pair": 0},
        {"percentile": 0},
        {"percentile": 101},
        {"timeout": 0},
        {"gap": -1.0},
        {"max_consecutive_losses": 0},
    ):
        with pytest.raises(ConfigurationError):
            ProbeConfig(**bad)


def test_probe_sample_set_attempted() -> None:
    """Test samples + lost = attempted probes."""
    from rankweave.prober import ProbeSampleSet

    samples = ProbeSampleSet("a:1", "b:1", (10.0, 12.0), lost=3, late=1)
    assert samples.attempted == 5


def test_partial_matrix_roundtrip(tmp_path) -> None:
    """Test partial matrices keep missing entries as NaN (`null`)."""
    import json

    from rankweave.prober import load_partial_matrix, save_partial_matrix

    hosts = ["a:1", "b:1", "c:1"]
    rtt = np.full((3, 3), np.nan)
    np.fill_diagonal(rtt, 0.0)
    rtt[0, 1] = 12.5
    path = tmp_path / "partial.json"
    save_partial_matrix(path, hosts, rtt)

    document = json.loads(path.read_text())
    assert document["rtt_us"][0] == [0.0, 12.5, None]

    loaded = load_partial_matrix(path, hosts)
    np.testing.assert_array_equal(np.isnan(loaded), np.isnan(rtt))
    assert loaded[0, 1] == 12.5


def test_partial_matrix_host_mismatch(tmp_path) -> None:
    """Test resuming against a different host list fails."""
    from rankweave.core import MatrixError
    from rankweave.prober import load_partial_matrix, save_partial_matrix

    path = tmp_path / "partial.json"
    save_partial_matrix(path, ["a:1", "b:1"], np.zeros((2, 2)))
    with pytest.raises(MatrixError):
        load_partial_matrix(path, ["b:1", "a:1"])


def test_merge_partial_matrices() -> None:
    """Test merging rows probed on different hosts."""
    from rankweave.core import MatrixError
    from rankweave.prober import finalize_matrix, merge_partial_matrices

    hosts = ("a:1", "b:1")
    first = np.array([[0.0, 4.0], [np.nan, 0.0]])
    second = np.array([[0.0, np.nan], [6.0, 0.0]])
    merged_hosts, merged = merge_partial_matrices(
        [(hosts, first), (hosts, second)]
    )
    assert merged_hosts == hosts
    np.testing.assert_array_equal(merged, [[0.0, 4.0], [6.0, 0.0]])

    matrix = finalize_matrix(merged_hosts, merged)
    np.testing.assert_array_equal(matrix.rtt, [[0.0, 6.0], [6.0, 0.0]])

    with pytest.raises(MatrixError):
        merge_partial_matrices([(hosts, first), (("x:1", "y:1"), second)])

    with pytest.raises(MatrixError):
        merge_partial_matrices([])

    with pytest.raises(MatrixError):
        finalize_matrix(hosts, first)


def test_rtt_spread() -> None:
    """Test the max/min off-diagonal RTT ratio."""
    from rankweave.core import CostMatrix
    from rankweave.prober import rtt_spread

    matrix = CostMatrix.from_array([[0, 2, 8], [2, 0, 4], [8, 4, 0]])
    assert rtt_spread(matrix) == 4.0


@pytest.mark.asyncio
async def test_build_cost_matrix_needs_two_hosts() -> None:
    """Test a single host cannot form a matrix."""
    from rankweave.core import MatrixError
    from rankweave.prober import ProbeConfig, build_cost_matrix

    with pytest.raises(MatrixError, match="need >= 2 hosts"):
        await build_cost_matrix(["127.0.0.1:9"], ProbeConfig())


@pytest.mark.asyncio
async def test_build_cost_matrix_with_mocked_pairs(
    mocker: MockerFixture, caplog: pytest.LogCaptureFixture
) -> None:
    """Test every ordered pair is probed once, in order, & symmetrised."""
    from rankweave.prober import ProbeConfig, ProbeSampleSet, build_cost_matrix

    rtts = {("10.0.0.1", "10.0.0.2"): 30.0, ("10.0.0.2", "10.0.0.1"): 20.0}

    async def fake_probe(src, dst, config, round_id=0):
        value = rtts[(src.host, dst.host)]
        return ProbeSampleSet(str(src), str(dst), (value, value + 5.0))

    mock_probe: MagicMock = mocker.patch(
        "rankweave.prober.probe_pair", side_effect=fake_probe
    )
    progress = MagicMock()
    with caplog.at_level(logging.INFO, logger="rankweave.prober"):
        matrix = await build_cost_matrix(
            ["10.0.0.1", "10.0.0.2"], ProbeConfig(), progress=progress
        )

    assert mock_probe.call_count == 2
    assert matrix.hosts == ("10.0.0.1:18515", "10.0.0.2:18515")
    np.testing.assert_array_equal(matrix.rtt, [[0.0, 30.0], [30.0, 0.0]])
    assert progress.call_count == 2
    assert "10.0.0.1:18515 -> 10.0.0.2:18515" in caplog.text


@pytest.mark.asyncio
async def test_build_cost_matrix_resume_skips_probed_pairs(
    mocker: MockerFixture, tmp_path
) -> None:
    """Test resuming from a complete partial file sends no probes."""
    from rankweave.prober import (
        ProbeConfig,
        build_cost_matrix,
        save_partial_matrix,
    )

    hosts = ["10.0.0.1:18515", "10.0.0.2:18515"]
    checkpoint = tmp_path / "matrix.json"
    save_partial_matrix(checkpoint, hosts, np.array([[0.0, 3.0], [4.0, 0.0]]))
    mock_probe = mocker.patch("rankweave.prober.probe_pair")

    matrix = await build_cost_matrix(
        hosts, ProbeConfig(), checkpoint=checkpoint, resume=True
    )

    mock_probe.assert_not_called()
    np.testing.assert_array_equal(matrix.rtt, [[0.0, 4.0], [4.0, 0.0]])


@pytest.mark.asyncio
async def test_build_cost_matrix_persists_on_failure(
    mocker: MockerFixture, tmp_path
) -> None:
    """Test an unreachable pair is named & progress so far is saved."""
    from rankweave.core import PairUnreachableError
    from rankweave.prober import (
        ProbeConfig,
        ProbeSampleSet,
        build_cost_matrix,
        load_partial_matrix,
    )

    async def fake_probe(src, dst, config, round_id=0):
        if dst.host == "10.0.0.3":
            raise PairUnreachableError(str(src), str(dst))
        return ProbeSampleSet(str(src), str(dst), (7.0,))

    mocker.patch("rankweave.prober.probe_pair", side_effect=fake_probe)
    hosts = ["10.0.0.1", "10.0.0.2", "10.0.0.3"]
    checkpoint = tmp_path / "matrix.json"

    with pytest.raises(PairUnreachableError) as e:
        await build_cost_matrix(hosts, ProbeConfig(), checkpoint=checkpoint)

    assert e.value.dst == "10.0.0.3:18515"
    names = [f"{h}:18515" for h in hosts]
    partial = load_partial_matrix(checkpoint, names)
    assert partial[0, 1] == 7.0
    assert np.isnan(partial[0, 2])


@pytest.mark.asyncio
async def test_build_cost_matrix_single_source(mocker: MockerFixture) -> None:
    """Test probing only one source row returns the raw partial array."""
    from rankweave.prober import ProbeConfig, ProbeSampleSet, build_cost_matrix

    async def fake_probe(src, dst, config, round_id=0):
        return ProbeSampleSet(str(src), str(dst), (1.0,))

    mock_probe = mocker.patch(
        "rankweave.prober.probe_pair", side_effect=fake_probe
    )
    rtt = await build_cost_matrix(
        ["10.0.0.1", "10.0.0.2", "10.0.0.3"],
        ProbeConfig(),
        sources=["10.0.0.2"],
    )

    assert mock_probe.call_count == 2
    assert not np.isnan(rtt[1]).any()
    assert np.isnan(rtt[0, 1]) and np.isnan(rtt[2, 0])
