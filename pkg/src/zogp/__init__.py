"""Zero-order SQP for Gaussian-process based stochastic MPC.

Modules
-------
gp           exact GP regression with posterior moments and mean Jacobians
dynamics     hanging-chain model and Gauss-Legendre IRK integrator
uncertainty  covariance propagation and chance-constraint tightening
qp           Riccati interior point and dense active-set QP solvers
sqp          zero-order and covariance-augmented SQP drivers, diagnostics
harness      chain experiments (data, closed loop, scaling, profiling)
"""

from .dynamics import ChainConfig, DiscreteModel, resting_state
from .errors import (
    InvalidArgumentError,
    NumericalError,
    QpInfeasibleError,
    UnsupportedConfigurationError,
    ZogpError,
)
from .gp import FeatureMap, GpDataset, KernelHyperparams, MultiGpModel, fit_gp, prior_model
from .qp import OcpQp, QpSettings, solve_dense_kkt, solve_ocp_qp
from .sqp import (
    ChanceConstraint,
    Iterate,
    OcpSpec,
    SolverOptions,
    SolverStats,
    check_feasibility,
    jacobian_error_norm,
    measure_contraction,
    solve_naive,
    solve_zero_order,
)
from .uncertainty import propagate_covariances, tightening_factor

__version__ = "0.1.0"
