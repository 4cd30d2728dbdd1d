"""Neural optimal design of experiments.

Jointly trains a reconstruction network and continuous measurement locations
(sampling times, pixel coordinates, projection angles) by gradient descent.
"""

from .analytic import ls_estimate, optimal_split, risk_endpoint, risk_exact, risk_monte_carlo
from .autodiff import ContractError, Tape, TapeError, Var
from .design import (
    AdmissibleSpace,
    DesignVector,
    endpoint_split,
    init_by_variance,
    init_random,
    init_uniform,
    project_to_box,
    round_to_grid,
)
from .forward import NoiseModel, RadonGeometry, make_phantoms, radon, radon_dangle, radon_op
from .nn import MLP, AdamState, adam_step, gradient_check
from .problems import CTProblem, ExponentialProblem, ImageProblem
from .trainer import (
    AdaptiveState,
    TrainConfig,
    Trainer,
    TrainingTrace,
    evaluate,
    train_adaptive,
    train_baseline,
    train_node,
)

__version__ = "0.1.0"
