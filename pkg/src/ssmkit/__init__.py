"""Composable state space modelling and filtering."""
from ssmkit._accel import backend
from ssmkit.errors import (
    ConfigError,
    DegenerateEnsembleError,
    DimensionMismatchError,
    DtypeMismatchError,
    ImpossibleObservationError,
    ModelEvaluationError,
    NotPositiveSemidefiniteError,
    SingularInnovationError,
    SSMError,
)
from ssmkit.genealogy import AncestryTree, filter_with_genealogy
from ssmkit.inference import filter, step
from ssmkit.kalman import DiscreteBelief, ForwardAlgorithm, GaussianBelief, KalmanFilter
from ssmkit.models import (
    DiscreteDynamics,
    GaussianEmissions,
    HierarchicalModel,
    LatentDynamics,
    LinearGaussianDynamics,
    LinearGaussianObservation,
    ObservationProcess,
    StateSpaceModel,
    joint_logdensity,
    sample_trajectory,
)
from ssmkit.particle import BootstrapFilter, ParticleContainer, ParticleEnsemble, Resampler, ess
from ssmkit.pmmh import MarkovChain, ParameterSpace, pmmh
from ssmkit.rbpf import RBPF, RBParticles

__version__ = "0.1.0"
