"""`rankweave` command line.

Subcommands:

1. `agent` - run a UDP echo agent until SIGINT/SIGTERM

2. `probe` - probe a hostfile into a matrix JSON file

3. `solve` - search a rank order for a matrix & collective

4. `reorder` - rewrite a hostfile in a solved rank order

5. `validate` - model cost vs simulated time on a synthetic topology

6. `generate` - matrix JSON of a synthetic topology

7. `merge` - merge partial matrix files probed on different hosts

Progress & summaries go to stderr; artifacts are only written to files
(or stdout for `solve` without `--out`).

Exit codes: 0 success, 1 usage, 2 I/O or parse error, 3 domain constraint
violation, 4 network failure.

Author: Andrew Ridyard.

License: GNU General Public License v3 or later.

Copyright (C): 2025.
"""

import argparse
import asyncio
import json
import logging
import math
import signal
import sys
from collections.abc import Sequence
from typing import NoReturn, Optional

import numpy as np
from rich.console import Console
from rich.table import Table

from . import __version__
from .core import (
    AgentBindError,
    ConfigurationError,
    CostMatrix,
    ExternalModelError,
    HostfileError,
    MatrixError,
    PairUnreachableError,
    ProbeSourceError,
    RankOrder,
    RankweaveEnv,
    RankweaveError,
    TopologyError,
    _read_json,
    _write_json,
    configure_logging,
    load_matrix,
    parse_matrix_document,
    save_matrix,
)
from .cost import Algorithm, CollectiveSpec, CostMode, HDPairing, evaluate
from .hostfile import Endpoint, read_hostfile, write_hostfile
from .prober import (
    ProbeConfig,
    build_cost_matrix,
    finalize_matrix,
    merge_partial_matrices,
    rtt_spread,
    run_echo_agent,
    save_partial_matrix,
)
from .solver import (
    Solution,
    SolverConfig,
    anneal,
    load_solution,
    save_solution,
    two_stage_solve,
)
from .topology import (
    generate_matrix,
    load_topology,
    validate_topology,
)

_logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DOMAIN = 3
EXIT_NETWORK = 4

_console = Console(stderr=True)


class _ArgumentParser(argparse.ArgumentParser):
    """`ArgumentParser` exiting with the usage exit code on bad arguments."""

    def error(self, message: str) -> NoReturn:
        """Print usage & exit with `EXIT_USAGE`."""
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def exit_code(error: BaseException) -> int:
    """Map an exception onto a command exit code."""
    network = (AgentBindError, PairUnreachableError, ProbeSourceError)
    if isinstance(error, network):
        return EXIT_NETWORK
    if isinstance(error, ConfigurationError):
        return EXIT_USAGE
    unreadable = (
        OSError,
        MatrixError,
        HostfileError,
        TopologyError,
        ExternalModelError,
    )
    if isinstance(error, unreadable):
        return EXIT_IO
    return EXIT_DOMAIN


# ------ Commands ------ #


def cmd_agent(args: argparse.Namespace) -> int:
    """Run an echo agent until SIGINT or SIGTERM."""
    endpoint = Endpoint.parse(args.bind, args.port or RankweaveEnv().port())

    async def serve() -> None:
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for signum in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(signum, stop.set)
            except (NotImplementedError, RuntimeError):
                _logger.debug(f"Cannot handle signal {signum} in this loop")
        await run_echo_agent(endpoint.host, endpoint.port, stop)

    asyncio.run(serve())
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    """Probe every pair of a hostfile into a matrix file."""
    port = args.port or RankweaveEnv().port()
    endpoints = read_hostfile(args.hosts).endpoints(port)
    config = ProbeConfig(
        probes_per_pair=args.count,
        percentile=args.percentile,
        timeout=args.timeout,
        port=port,
    )
    result = asyncio.run(
        build_cost_matrix(
            endpoints,
            config,
            checkpoint=args.out,
            resume=args.resume,
            sources=args.source or None,
        )
    )
    if isinstance(result, CostMatrix):
        save_matrix(args.out, result)
        _console.print(
            f"Wrote {result.n}x{result.n} matrix to {args.out} "
            f"(max/min RTT {rtt_spread(result):.2f})"
        )
    else:
        names = [str(e) for e in endpoints]
        save_partial_matrix(args.out, names, result)
        missing = int(np.isnan(result).sum())
        _console.print(
            f"Wrote partial matrix to {args.out} ({missing} entries missing)"
        )
    return EXIT_OK


def _collective(args: argparse.Namespace, n: int) -> CollectiveSpec:
    return CollectiveSpec(
        algorithm=Algorithm(args.algo),
        n=n,
        size=args.size,
        bcube_b=args.b,
        cost_mode=CostMode(args.cost_mode),
        hd_pairing=HDPairing(args.hd_pairing),
    )


def _solver_config(args: argparse.Namespace) -> SolverConfig:
    seed = args.seed if args.seed is not None else RankweaveEnv().seed()
    return SolverConfig(budget=args.budget, seed=seed, workers=args.workers)


def _ratio(numerator: float, denominator: float) -> float:
    if denominator == 0:
        return 1.0 if numerator == 0 else math.inf
    return numerator / denominator


def cmd_solve(args: argparse.Namespace) -> int:
    """Solve a rank order for a matrix file."""
    matrix = load_matrix(args.matrix)
    spec = _collective(args, matrix.n)
    config = _solver_config(args)
    solution = two_stage_solve(
        matrix,
        spec,
        config,
        smt_path=args.emit_smt,
        external_model=args.external_model,
    )
    identity = evaluate(matrix, RankOrder.identity(matrix.n), spec)

    title = f"{spec.algorithm.value} N={spec.n} S={spec.size:g}"
    table = Table(title=title)
    table.add_column("order")
    table.add_column("cost", justify="right")
    table.add_row("identity", f"{identity:.6g}")
    table.add_row(solution.method.value, f"{solution.cost:.6g}")
    if args.worst:
        worst = anneal(matrix, spec, config, maximize=True)
        table.add_row("worst", f"{worst.cost:.6g}")
    _console.print(table)
    _console.print(
        f"Improvement over identity: {_ratio(identity, solution.cost):.3f}x"
    )
    if args.worst:
        _console.print(
            f"Best vs worst speedup: {_ratio(worst.cost, solution.cost):.3f}x"
        )

    if args.out:
        save_solution(args.out, solution)
        _logger.info(f"Wrote solution to {args.out}")
    else:
        print(json.dumps(solution.to_json()))
    return EXIT_OK


def cmd_reorder(args: argparse.Namespace) -> int:
    """Rewrite a hostfile in the order of a solution file."""
    hostfile = read_hostfile(args.hosts)
    solution = load_solution(args.order)
    write_hostfile(args.out, hostfile.reordered(solution.order))
    _logger.info(f"Wrote {len(hostfile)} hosts to {args.out}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    """Correlate model cost with simulated time on a synthetic topology."""
    topology = load_topology(args.topology)
    spec = _collective(args, topology.n)
    seed = args.seed if args.seed is not None else RankweaveEnv().seed()

    solved: Optional[Solution] = None
    if args.solve:
        solved = two_stage_solve(
            generate_matrix(topology), spec, _solver_config(args)
        )
    report = validate_topology(
        topology,
        spec,
        args.samples,
        seed,
        stratified=args.stratified,
        solved=solved.order if solved else None,
    )
    _write_json(args.out, report.to_json())

    correlation = (
        "undefined"
        if report.correlation is None
        else f"{report.correlation:.3f}"
    )
    _console.print(
        f"Spearman(model cost, simulated time) = {correlation} over "
        f"{report.samples} orders; model max/min {report.model.spread:.2f}"
    )
    if report.solved_percentile is not None:
        _console.print(
            f"Solved order simulated time at percentile "
            f"{report.solved_percentile:.1f} of random orders"
        )
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    """Write the matrix of a synthetic topology."""
    matrix = generate_matrix(load_topology(args.topology))
    save_matrix(args.out, matrix)
    _logger.info(f"Wrote {matrix.n}x{matrix.n} matrix to {args.out}")
    return EXIT_OK


def cmd_merge(args: argparse.Namespace) -> int:
    """Merge partial matrix files into one file."""
    documents = [parse_matrix_document(_read_json(p)) for p in args.inputs]
    hosts, rtt = merge_partial_matrices(documents)
    missing = np.isnan(rtt)
    np.fill_diagonal(missing, False)
    if missing.any():
        _logger.warning(f"Merged matrix still misses {int(missing.sum())}")
        save_partial_matrix(args.out, hosts, rtt)
    else:
        save_matrix(args.out, finalize_matrix(hosts, rtt))
    _logger.info(f"Wrote merged matrix to {args.out}")
    return EXIT_OK


# ------ Parser ------ #


def _add_collective_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--algo",
        required=True,
        choices=[a.value for a in Algorithm],
        help="collective algorithm",
    )
    parser.add_argument(
        "--size", type=float, required=True, help="data size S in bytes"
    )
    parser.add_argument("--b", type=int, default=2, help="BCube group size")
    parser.add_argument(
        "--cost-mode",
        choices=[m.value for m in CostMode],
        default=CostMode.LATENCY_TIMES_SIZE.value,
        help="transfer cost: rtt or rtt * bytes (default)",
    )
    parser.add_argument(
        "--hd-pairing",
        choices=[p.value for p in HDPairing],
        default=HDPairing.OFFSET.value,
        help="halving doubling peer selection",
    )


def _add_solver_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--budget", type=float, default=10.0, help="annealing seconds"
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="seed ($RANKWEAVE_SEED)"
    )
    parser.add_argument(
        "--workers", type=int, default=1, help="concurrent restarts"
    )


def build_parser() -> argparse.ArgumentParser:
    """The `rankweave` argument parser."""
    parser = _ArgumentParser(
        prog="rankweave",
        description="Locality-aware rank ordering for collectives.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    commands = parser.add_subparsers(
        dest="command", required=True, parser_class=_ArgumentParser
    )

    agent = commands.add_parser("agent", help="run a UDP echo agent")
    agent.add_argument("--bind", default="0.0.0.0", help="ADDR[:PORT]")
    agent.add_argument(
        "--port", type=int, default=None, help="port ($RANKWEAVE_PORT)"
    )
    agent.set_defaults(func=cmd_agent)

    probe = commands.add_parser("probe", help="probe a cost matrix")
    probe.add_argument("--hosts", required=True, help="hostfile")
    probe.add_argument("--out", required=True, help="matrix JSON path")
    probe.add_argument("--count", type=int, default=10_000)
    probe.add_argument("--percentile", type=int, default=10)
    probe.add_argument(
        "--port", type=int, default=None, help="port ($RANKWEAVE_PORT)"
    )
    probe.add_argument("--timeout", type=float, default=1.0)
    probe.add_argument(
        "--resume", action="store_true", help="only probe missing entries"
    )
    probe.add_argument(
        "--source",
        action="append",
        help="only probe rows of this (local) host; repeatable",
    )
    probe.set_defaults(func=cmd_probe)

    solve = commands.add_parser("solve", help="solve a rank order")
    solve.add_argument("--matrix", required=True, help="matrix JSON path")
    _add_collective_arguments(solve)
    _add_solver_arguments(solve)
    solve.add_argument("--emit-smt", default=None, help="SMT-LIB2 output")
    solve.add_argument(
        "--external-model", default=None, help="external solver model"
    )
    solve.add_argument("--out", default=None, help="solution JSON path")
    solve.add_argument(
        "--worst", action="store_true", help="also search the worst order"
    )
    solve.set_defaults(func=cmd_solve)

    reorder = commands.add_parser("reorder", help="reorder a hostfile")
    reorder.add_argument("--hosts", required=True)
    reorder.add_argument("--order", required=True, help="solution JSON")
    reorder.add_argument("--out", required=True)
    reorder.set_defaults(func=cmd_reorder)

    validate = commands.add_parser(
        "validate", help="model vs simulated time on a topology"
    )
    validate.add_argument("--topology", required=True)
    _add_collective_arguments(validate)
    _add_solver_arguments(validate)
    validate.add_argument("--samples", type=int, default=50)
    validate.add_argument("--out", required=True, help="report JSON path")
    validate.add_argument(
        "--stratified",
        action="store_true",
        help="use orders spread across the cost distribution",
    )
    validate.add_argument(
        "--solve",
        action="store_true",
        help="also solve & simulate an optimised order",
    )
    validate.set_defaults(func=cmd_validate)

    generate = commands.add_parser("generate", help="topology to matrix")
    generate.add_argument("--topology", required=True)
    generate.add_argument("--out", required=True)
    generate.set_defaults(func=cmd_generate)

    merge = commands.add_parser("merge", help="merge partial matrices")
    merge.add_argument("inputs", nargs="+")
    merge.add_argument("--out", required=True)
    merge.set_defaults(func=cmd_merge)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    configure_logging(level)

    try:
        return args.func(args)
    except (RankweaveError, OSError, ValueError) as e:
        _logger.error(f"{args.command}: {e}")
        return exit_code(e)
