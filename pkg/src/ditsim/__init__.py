"""ditsim: discrete-event simulation of elastic diffusion-transformer serving.

The library models a GPU cluster serving text-to-video requests whose
denoising phase runs under sequence parallelism.  It provides execution-time
profiles, seeded workload generation, a node-aware buddy GPU allocator, a
step-granular simulation engine with DoP promotion and DiT-VAE decoupling,
a greedy scheduler plus four baseline policies, queueing/batch occupancy
models with a dynamic-programming optimal-occupancy solver, and an
experiment harness with a small CLI (``ditsim run|solve|profile-check|replay``).
"""

from .allocator import (
    AllocationError,
    AllocationHandle,
    Block,
    ClusterTopology,
    GpuPool,
    bandwidth_aware_partition,
)
from .engine import (
    EventKind,
    OverheadModel,
    RequestRecord,
    RequestState,
    RequestStatus,
    SimResult,
    Simulation,
    SimulationError,
    TraceRecord,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    load_config,
    make_policy,
    replay_workload,
    run_experiment,
)
from .metrics import MetricsReport, compute_metrics, nearest_rank_percentile, normalize
from .optimal import (
    BatchModel,
    InfeasibleError,
    OptimalAllocation,
    QueueModel,
    SaturationError,
    TypeAssignment,
    approx_factorial,
    empty_system_probability,
    occupy_batch,
    occupy_md1,
    occupy_mdc,
    solve_optimal,
    stirling_factorial,
)
from .policies import (
    ClusterPlan,
    ClusterPolicy,
    GreedyPolicy,
    PromoteEntry,
    SchedulingPolicy,
    StaticDopPolicy,
    build_dpci_plan,
    build_spci_plan,
    update_starvation,
)
from .profiles import (
    DopTable,
    ProfileError,
    ProfileLookupError,
    ProfileTable,
    ResolutionClass,
    change_rate,
    default_profile,
    derive_dop_table,
    estimate_execution_time,
    load_profiles,
    optimal_dop,
)
from .workload import (
    ArrivalRecord,
    WorkloadError,
    WorkloadSpec,
    empirical_proportions,
    generate,
    load_workload,
    save_workload,
    stratified_counts,
)

__version__ = "0.1.0"
