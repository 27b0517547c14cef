"""Clustered dose-response function estimation for continuous treatments."""

from .adrf import AdrfCurve, UnknownCluster, default_grid, estimate_adrf
from .estimator import (
    AllStartsFailed,
    ClusterAssignment,
    FitOptions,
    FitResult,
    assign_step,
    fit,
    fit_each_start,
    fit_given_assignment,
    initialize,
    objective,
    update_gps,
    update_outcome,
)
from .model_core import (
    ClDrfError,
    Dataset,
    InsufficientMembers,
    ModelSpec,
    OutcomeModel,
    RankDeficient,
    TreatmentModel,
    build_design,
    fit_treatment_cluster,
    gps_density,
    weighted_ols,
)
from .selection import (
    DegenerateElbowWarning,
    SelectionReport,
    elbow_select,
    information_criterion,
    select_clusters,
)
from .simulation import (
    LabeledDataset,
    ReplicationSummary,
    ScenarioConfig,
    generate,
    rand_index,
    run_replications,
    scenario_spec,
)

__version__ = "0.1.0"
