"""Mixed-precision in-memory computing: a simulated PCM crossbar inside iterative refinement."""

from .crossbar import (
    AnalogOperator,
    CrossbarEncoding,
    MatvecResult,
    analog_matvec,
    calibrate_drift,
    encode_matrix,
    scalar_multiply,
)
from .pcm_device import DeviceState, NoiseModel, apply_drift, program_and_verify, read_current
from .problems import (
    ExpressionMatrix,
    GeneNetwork,
    build_interactome,
    generate_rhs,
    inverse_covariance,
    model_covariance,
    partial_correlation,
    sample_covariance,
)
from .solver import (
    LinearProblem,
    MixedPrecisionSolver,
    SolveTrace,
    cg_inner,
    gmres_inner,
    iterative_refine,
    precondition_split,
    residual,
)

__version__ = "0.1.0"
