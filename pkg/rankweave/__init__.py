"""`rankweave` __init__."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    CostMatrix,
    RankOrder,
    RankweaveEnv,
    RankweaveError,
    configure_logging,
    load_matrix,
    save_matrix,
)
from .cost import (  # noqa: E402
    Algorithm,
    CollectiveSpec,
    CostMode,
    HDPairing,
    Schedule,
    Transfer,
    evaluate,
    evaluate_many,
    expand_schedule,
    schedule_cost,
    transfer_cost,
)
from .hostfile import Endpoint, Hostfile, parse_hostfile  # noqa: E402
from .prober import (  # noqa: E402
    ProbeConfig,
    aggregate_rtt,
    build_cost_matrix,
    decode_probe,
    encode_probe,
    probe_pair,
    run_echo_agent,
    symmetrize,
)
from .solver import (  # noqa: E402
    Solution,
    SolverConfig,
    anneal,
    brute_force,
    emit_smtlib,
    neighbor,
    two_stage_solve,
)
from .topology import (  # noqa: E402
    DistributionStats,
    Level,
    TopologySpec,
    generate_matrix,
    sample_cost_distribution,
    simulate_collective,
    spearman,
)

__all__ = (
    "Algorithm",
    "CollectiveSpec",
    "CostMatrix",
    "CostMode",
    "DistributionStats",
    "Endpoint",
    "HDPairing",
    "Hostfile",
    "Level",
    "ProbeConfig",
    "RankOrder",
    "RankweaveEnv",
    "RankweaveError",
    "Schedule",
    "Solution",
    "SolverConfig",
    "TopologySpec",
    "Transfer",
    "aggregate_rtt",
    "anneal",
    "brute_force",
    "build_cost_matrix",
    "configure_logging",
    "decode_probe",
    "emit_smtlib",
    "encode_probe",
    "evaluate",
    "evaluate_many",
    "expand_schedule",
    "generate_matrix",
    "load_matrix",
    "neighbor",
    "parse_hostfile",
    "probe_pair",
    "run_echo_agent",
    "sample_cost_distribution",
    "save_matrix",
    "schedule_cost",
    "simulate_collective",
    "spearman",
    "symmetrize",
    "transfer_cost",
    "two_stage_solve",
)
