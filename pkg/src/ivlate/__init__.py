"""Weight diagnostics for linear IV over discrete covariate cells.

The library estimates the classic just-identified IV slope together with
three companions that weight the same per-cell Wald ratios differently:
the interacted (cell-by-cell first stage) two-stage estimate, a
"reordered" IV that flips the instrument wherever the within-cell first
stage is negative, and the nonparametric complier-weighted average.  It
reports the implicit per-cell weights, flags negative ones, decomposes
the reordered estimate into treated- and untreated-mover components, and
ships an exact finite-population oracle that verifies every weighting
identity the estimators rely on.
"""

from .bootstrap import (
    BootstrapConfig,
    BootstrapResult,
    bootstrap_se,
    bootstrap_se_vector,
)
from .decomposition import (
    Decomposition,
    SweepCurve,
    SweepPoint,
    bias_sweep,
    decompose,
    lambda_rule_of_thumb,
)
from .dgp import (
    DgpSpec,
    IdentityReport,
    PopCell,
    PopulationEstimands,
    draw_sample,
    fixture_dgps,
    hs_mass,
    load_dgp,
    monotonicity,
    population_estimands,
    random_dgp,
    save_dgp,
    sign_reversal_dgp,
    two_point_dgp,
    verify_identities,
)
from .errors import (
    BootstrapError,
    DataError,
    EstimandError,
    IVLateError,
    SchemaError,
    SingularError,
)
from .estimators import (
    CellEstimates,
    ControlsSpec,
    EstimateResult,
    WALD_FLOOR,
    cell_estimates,
    estimate_beta_2sls_interacted,
    estimate_beta_iv,
    estimate_beta_riv,
    estimate_tau_late,
    reorder_instrument,
    reordered_table,
)
from .projection import (
    DesignMatrices,
    FitResult,
    first_stage_f,
    iv_just_identified,
    ols,
    tsls,
)
from .sample import (
    Cell,
    CellTable,
    DEFAULT_MIN_CELL_N,
    Sample,
    TreatmentRule,
    build_cells,
    cell_index_of,
    drop_unidentified,
    load_sample,
    restrict_cells,
    subset_to_cells,
)
from .weights import (
    NegativeWeightReport,
    WeightTable,
    negative_weight_report,
    weight_schemes,
    weight_table,
)

__version__ = "0.1.0"
