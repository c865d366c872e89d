"""metricreg: learn the smoothing weight of a diffeomorphic registration
operator so that the registration metric classifies shapes well.

The pipeline registers every pair of training images by velocity-field
gradient descent, turns the pairwise energies into an exponential kernel,
fits a kernel Fisher discriminant, and alternates re-registration with
hinge-loss descent on the operator weight. See the README for the CLI.
"""

from .diffop import (
    OperatorParams,
    SpectralOperator,
    apply_L,
    apply_Linv,
    build_operator,
    metric_energy,
    metric_energy_dalpha,
    metric_energy_dbeta,
    spectral_moments,
)
from .emtrain import EmConfig, EmTrace, TrainResult, e_step, m_step, split_folds, train
from .errors import (
    ConfigError,
    DegenerateSampleError,
    InputError,
    MetricRegError,
    NumericalError,
)
from .evalsuite import (
    MomentumMap,
    RocResult,
    logistic_baseline,
    mi_select_alpha,
    momentum_map,
    mutual_information,
    roc_auc,
)
from .grid import (
    DeformationMap,
    GridSpec,
    ScalarImage,
    TimeVelocity,
    VectorField,
    compose_deform,
    interpolate,
    jacobian_determinant,
    warp,
)
from .kernel import (
    KernelGradient,
    KernelMatrix,
    MetricMatrix,
    from_pairwise,
    kernel_dalpha,
    kernel_row,
    symmetrize,
    to_kernel,
)
from .klda import (
    KldaModel,
    LabeledSample,
    class_means,
    decision,
    fit,
    hinge,
    hinge_grad_alpha,
    margin_scale,
    rayleigh_quotient,
    within_class,
)
from .registration import (
    PairwiseMetrics,
    RegistrationConfig,
    RegistrationResult,
    register,
    register_pairwise,
)
from .synthdata import ShapeGenConfig, generate, read_dataset, write_dataset

__version__ = "0.1.0"
