"""Model-authoring interface.

A state space model pairs a :class:`LatentDynamics` with an
:class:`ObservationProcess`.  Every method is vectorised over leading axes:
``states`` has shape ``(..., D_x)`` and log-densities come back with shape
``(...)``.  Inference-time inputs travel in a read-only ``context`` mapping
(step-dependent controls, and ``prev_outer`` / ``new_outer`` for the inner
half of a :class:`HierarchicalModel`).
"""
import abc
import math
from types import MappingProxyType

import numpy as np
import scipy.linalg

from ssmkit.errors import DimensionMismatchError, DtypeMismatchError, NotPositiveSemidefiniteError

EMPTY_CONTEXT = MappingProxyType({})

PSD_TOL = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


def check_psd(matrix, what="matrix", tol=PSD_TOL):
    """Raise unless the symmetric part of ``matrix`` (possibly batched) is PSD to ``tol``."""
    m = np.asarray(matrix)
    sym = 0.5 * (m + np.swapaxes(m, -1, -2))
    if sym.shape[-1] == 0:
        return sym
    try:
        np.linalg.cholesky(sym + tol * np.eye(sym.shape[-1], dtype=sym.dtype))
        return sym
    except np.linalg.LinAlgError:
        pass
    lo = np.min(np.linalg.eigvalsh(sym))
    if lo < -tol:
        raise NotPositiveSemidefiniteError(what, lo)
    return sym


def psd_factor(cov):
    """Return ``L`` with ``L @ L.T == cov`` for a PSD (possibly singular, possibly batched) matrix."""
    cov = np.asarray(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
        return v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def mvn_logpdf(x, mean, cov):
    """Multivariate normal log-density, broadcasting over leading axes."""
    x = np.asarray(x)
    diff = x - mean
    cov = np.asarray(cov)
    d = cov.shape[-1]
    L = np.linalg.cholesky(cov)
    if L.ndim == 2:
        flat = diff.reshape(-1, d)
        sol = scipy.linalg.solve_triangular(L, flat.T, lower=True, check_finite=False).T
        sol = sol.reshape(diff.shape)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
    else:
        diff, L = np.broadcast_arrays(diff[..., None], L)
        sol = np.linalg.solve(L, diff[..., :1])[..., 0]
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * (np.sum(sol * sol, axis=-1) + logdet + d * _LOG_2PI)


def _resolve(value, *args):
    return value(*args) if callable(value) else value


class LatentDynamics(abc.ABC):
    """Initial and transition distributions of the latent Markov chain.

    Subclasses set ``dim`` and implement the four abstract methods.
    """

    dim = None
    dtype = np.dtype(np.float64)

    @abc.abstractmethod
    def sample_initial(self, rng, n=None, context=EMPTY_CONTEXT):
        """Draw ``n`` initial states, shape ``(n, dim)``; a single ``(dim,)`` state if ``n`` is None."""

    @abc.abstractmethod
    def logdensity_initial(self, state, context=EMPTY_CONTEXT):
        ...

    @abc.abstractmethod
    def sample_transition(self, rng, step, states, context=EMPTY_CONTEXT):
        """Draw ``x_step`` given ``x_{step-1} = states`` for every leading index."""

    @abc.abstractmethod
    def logdensity_transition(self, step, prev_states, new_states, context=EMPTY_CONTEXT):
        ...


class ObservationProcess(abc.ABC):
    dim = None
    # dimension of the state this process reads, when known
    state_dim = None
    dtype = np.dtype(np.float64)

    @abc.abstractmethod
    def sample_observation(self, rng, step, states, context=EMPTY_CONTEXT):
        ...

    @abc.abstractmethod
    def logdensity_observation(self, step, states, observation, context=EMPTY_CONTEXT):
        ...


class LinearGaussianDynamics(LatentDynamics):
    """``x_t ~ N(A_t x_{t-1} + b_t, Q_t)`` with ``x_0 ~ N(mu0, Sigma0)``.

    Each of ``A, b, Q`` may be an array or a callable ``(step, context)``;
    ``mu0, Sigma0`` may be arrays or callables ``(context)``.  Subclasses can
    instead override ``calc_A`` / ``calc_b`` / ``calc_Q``, e.g. to scale the
    noise by ``context["new_outer"]``.  Callables may return batched values
    with leading axes that broadcast against the state batch.
    """

    def __init__(self, A, Q, mu0, Sigma0, b=None, dim=None, dtype=None):
        self._A, self._Q, self._b = A, Q, b
        self._mu0, self._Sigma0 = mu0, Sigma0
        if dtype is None:
            probe = next((v for v in (A, Q, mu0, Sigma0) if not callable(v)), None)
            dtype = np.asarray(probe).dtype if probe is not None else np.float64
            if not np.issubdtype(dtype, np.floating):
                dtype = np.float64
        self.dtype = np.dtype(dtype)
        for name in ("_A", "_Q", "_b", "_mu0", "_Sigma0"):
            v = getattr(self, name)
            if v is not None and not callable(v):
                setattr(self, name, np.asarray(v, dtype=self.dtype))
        if dim is None:
            for v in (self._mu0, self._A, self._Q, self._Sigma0):
                if not callable(v):
                    dim = np.asarray(v).shape[-1]
                    break
        if dim is None:
            raise ValueError("dim must be given when every parameter is callable")
        self.dim = int(dim)
        for name, v in (("Q", self._Q), ("Sigma0", self._Sigma0)):
            if not callable(v):
                if v.shape[-2:] != (self.dim, self.dim):
                    raise DimensionMismatchError(f"{name} has shape {v.shape}, expected ({self.dim}, {self.dim})")
                check_psd(v, name)
        if not callable(self._A) and self._A.shape[-2:] != (self.dim, self.dim):
            raise DimensionMismatchError(f"A has shape {self._A.shape}, expected ({self.dim}, {self.dim})")
        self._factor_cache = {}

    def calc_A(self, step, context=EMPTY_CONTEXT):
        return _resolve(self._A, step, context)

    def calc_b(self, step, context=EMPTY_CONTEXT):
        if self._b is None:
            return np.zeros(self.dim, dtype=self.dtype)
        return _resolve(self._b, step, context)

    def calc_Q(self, step, context=EMPTY_CONTEXT):
        return _resolve(self._Q, step, context)

    def calc_mu0(self, context=EMPTY_CONTEXT):
        return _resolve(self._mu0, context)

    def calc_Sigma0(self, context=EMPTY_CONTEXT):
        return _resolve(self._Sigma0, context)

    def _factor(self, cov, attr, method):
        # factors of constant, non-overridden covariances are computed once
        if callable(getattr(self, attr)) or getattr(type(self), method) is not getattr(LinearGaussianDynamics, method):
            return psd_factor(cov)
        if attr not in self._factor_cache:
            self._factor_cache[attr] = psd_factor(cov)
        return self._factor_cache[attr]

    def _gaussian(self, rng, mean, L, shape):
        eps = rng.standard_normal(shape).astype(self.dtype, copy=False)
        return mean + np.einsum("...ij,...j->...i", L, eps)

    def sample_initial(self, rng, n=None, context=EMPTY_CONTEXT):
        mu0 = self.calc_mu0(context)
        S0 = self.calc_Sigma0(context)
        L = self._factor(S0, "_Sigma0", "calc_Sigma0")
        shape = (self.dim,) if n is None else (n, self.dim)
        return self._gaussian(rng, mu0, L, shape)

    def logdensity_initial(self, state, context=EMPTY_CONTEXT):
        return mvn_logpdf(state, self.calc_mu0(context), self.calc_Sigma0(context))

    def transition_mean(self, step, states, context=EMPTY_CONTEXT):
        A = self.calc_A(step, context)
        return np.einsum("...ij,...j->...i", A, states) + self.calc_b(step, context)

    def sample_transition(self, rng, step, states, context=EMPTY_CONTEXT):
        states = np.asarray(states)
        mean = self.transition_mean(step, states, context)
        L = self._factor(self.calc_Q(step, context), "_Q", "calc_Q")
        return self._gaussian(rng, mean, L, mean.shape)

    def logdensity_transition(self, step, prev_states, new_states, context=EMPTY_CONTEXT):
        mean = self.transition_mean(step, np.asarray(prev_states), context)
        return mvn_logpdf(new_states, mean, self.calc_Q(step, context))


class LinearGaussianObservation(ObservationProcess):
    """``y_t ~ N(H_t x_t + c_t, R_t)``; parameters are arrays or callables ``(step, context)``."""

    def __init__(self, H, R, c=None, dtype=None):
        self._H, self._R, self._c = H, R, c
        if dtype is None:
            probe = next((v for v in (H, R) if not callable(v)), None)
            dtype = np.asarray(probe).dtype if probe is not None else np.float64
            if not np.issubdtype(dtype, np.floating):
                dtype = np.float64
        self.dtype = np.dtype(dtype)
        for name in ("_H", "_R", "_c"):
            v = getattr(self, name)
            if v is not None and not callable(v):
                setattr(self, name, np.asarray(v, dtype=self.dtype))
        if not callable(self._H):
            self.dim, self.state_dim = self._H.shape[-2:]
        elif not callable(self._R):
            self.dim = self._R.shape[-1]
        if not callable(self._R):
            if self.dim is not None and self._R.shape[-2:] != (self.dim, self.dim):
                raise DimensionMismatchError(f"R has shape {self._R.shape}, expected ({self.dim}, {self.dim})")
            check_psd(self._R, "R")
            self._R_chol = psd_factor(self._R)

    def calc_H(self, step, context=EMPTY_CONTEXT):
        return _resolve(self._H, step, context)

    def calc_R(self, step, context=EMPTY_CONTEXT):
        return _resolve(self._R, step, context)

    def calc_c(self, step, context=EMPTY_CONTEXT):
        if self._c is None:
            return 0.0
        return _resolve(self._c, step, context)

    def observation_mean(self, step, states, context=EMPTY_CONTEXT):
        H = self.calc_H(step, context)
        return np.einsum("...ij,...j->...i", H, np.asarray(states)) + self.calc_c(step, context)

    def sample_observation(self, rng, step, states, context=EMPTY_CONTEXT):
        mean = self.observation_mean(step, states, context)
        R = self.calc_R(step, context)
        L = self._R_chol if (not callable(self._R) and type(self).calc_R is LinearGaussianObservation.calc_R) else psd_factor(R)
        eps = rng.standard_normal(mean.shape).astype(self.dtype, copy=False)
        return mean + np.einsum("...ij,...j->...i", L, eps)

    def logdensity_observation(self, step, states, observation, context=EMPTY_CONTEXT):
        mean = self.observation_mean(step, states, context)
        return mvn_logpdf(observation, mean, self.calc_R(step, context))


class DiscreteDynamics(LatentDynamics):
    """Finite-state Markov chain on ``{0, ..., K-1}``; states are integer arrays.

    ``transition_matrix`` is row-stochastic, ``T[i, j] = p(x_t = j | x_{t-1} = i)``,
    or a callable ``(step, context)`` returning one.
    """

    dim = 1

    def __init__(self, transition_matrix, initial_probs):
        self._T = transition_matrix if callable(transition_matrix) else np.asarray(transition_matrix, dtype=float)
        self._p0 = np.asarray(initial_probs, dtype=float)
        self.num_states = self._p0.shape[-1]
        if not callable(self._T):
            _check_stochastic(self._T)

    def calc_transition_matrix(self, step, context=EMPTY_CONTEXT):
        return _resolve(self._T, step, context)

    def calc_initial_probs(self, context=EMPTY_CONTEXT):
        return self._p0

    def sample_initial(self, rng, n=None, context=EMPTY_CONTEXT):
        p0 = self.calc_initial_probs(context)
        if n is None:
            return int(rng.choice(self.num_states, p=p0))
        return rng.choice(self.num_states, size=n, p=p0)

    def logdensity_initial(self, state, context=EMPTY_CONTEXT):
        with np.errstate(divide="ignore"):
            return np.log(self.calc_initial_probs(context)[state])

    def sample_transition(self, rng, step, states, context=EMPTY_CONTEXT):
        T = self.calc_transition_matrix(step, context)
        states = np.asarray(states)
        cum = np.cumsum(T[states], axis=-1)
        u = rng.random(states.shape + (1,))
        out = np.sum(u >= cum, axis=-1)
        return np.minimum(out, self.num_states - 1)

    def logdensity_transition(self, step, prev_states, new_states, context=EMPTY_CONTEXT):
        T = self.calc_transition_matrix(step, context)
        with np.errstate(divide="ignore"):
            return np.log(T[prev_states, new_states])


def _check_stochastic(T, tol=1e-10):
    T = np.asarray(T)
    if T.shape[-1] != T.shape[-2]:
        raise DimensionMismatchError(f"transition matrix must be square, got {T.shape}")
    if np.any(T < 0) or np.max(np.abs(T.sum(axis=-1) - 1.0)) > tol:
        raise ValueError("transition matrix rows must be non-negative and sum to 1")


class GaussianEmissions(ObservationProcess):
    """Scalar Gaussian emissions for a discrete chain: ``y | x=k ~ N(means[k], stds[k]^2)``."""

    dim = 1

    def __init__(self, means, stds):
        self.means = np.asarray(means, dtype=float)
        self.stds = np.asarray(stds, dtype=float)

    def sample_observation(self, rng, step, states, context=EMPTY_CONTEXT):
        states = np.asarray(states)
        return self.means[states] + self.stds[states] * rng.standard_normal(states.shape)

    def logdensity_observation(self, step, states, observation, context=EMPTY_CONTEXT):
        m, s = self.means[states], self.stds[states]
        z = (np.asarray(observation) - m) / s
        return -0.5 * z * z - np.log(s) - 0.5 * _LOG_2PI

    def emission_logdensities(self, step, observation, context=EMPTY_CONTEXT):
        return self.logdensity_observation(step, np.arange(self.means.shape[0]), observation, context)


class StateSpaceModel:
    """A latent dynamics paired with an observation process sharing one scalar type."""

    def __init__(self, dynamics, observation):
        if np.dtype(dynamics.dtype) != np.dtype(observation.dtype):
            raise DtypeMismatchError(
                f"dynamics scalar type {np.dtype(dynamics.dtype)} does not match "
                f"observation scalar type {np.dtype(observation.dtype)}"
            )
        sd = getattr(observation, "state_dim", None)
        if sd is not None and dynamics.dim is not None and sd != dynamics.dim:
            raise DimensionMismatchError(f"observation expects state dimension {sd}, dynamics has {dynamics.dim}")
        self.dynamics = dynamics
        self.observation = observation

    @property
    def dtype(self):
        return np.dtype(self.dynamics.dtype)


class HierarchicalModel:
    """Outer dynamics ``u_t`` driving an inner conditional model over ``z_t``.

    The inner dynamics and observation read ``prev_outer`` (``u_{t-1}``) and
    ``new_outer`` (``u_t``) from the context.  ``flat`` optionally supplies an
    equivalent :class:`StateSpaceModel` on the concatenated state ``(u, z)``
    (e.g. a linear-Gaussian one so that a Kalman filter can run on it); when
    absent, :func:`as_state_space` builds a generic sampling-based flattening.
    """

    def __init__(self, outer_dynamics, inner_model, flat=None):
        if np.dtype(outer_dynamics.dtype) != np.dtype(inner_model.dtype):
            raise DtypeMismatchError("outer and inner scalar types differ")
        self.outer_dynamics = outer_dynamics
        self.inner_model = inner_model
        self.flat = flat

    @property
    def dtype(self):
        return np.dtype(self.outer_dynamics.dtype)

    @property
    def outer_dim(self):
        return self.outer_dynamics.dim

    @property
    def inner_dim(self):
        return self.inner_model.dynamics.dim


def _with(context, **extra):
    return MappingProxyType({**context, **extra})


class _FlatDynamics(LatentDynamics):
    def __init__(self, hier):
        self.h = hier
        self.du = hier.outer_dim
        self.dim = hier.outer_dim + hier.inner_dim
        self.dtype = hier.dtype

    def sample_initial(self, rng, n=None, context=EMPTY_CONTEXT):
        u = self.h.outer_dynamics.sample_initial(rng, n, context)
        z = self.h.inner_model.dynamics.sample_initial(rng, n, _with(context, new_outer=u))
        return np.concatenate([u, z], axis=-1)

    def logdensity_initial(self, state, context=EMPTY_CONTEXT):
        u, z = state[..., : self.du], state[..., self.du:]
        return (self.h.outer_dynamics.logdensity_initial(u, context)
                + self.h.inner_model.dynamics.logdensity_initial(z, _with(context, new_outer=u)))

    def sample_transition(self, rng, step, states, context=EMPTY_CONTEXT):
        u, z = states[..., : self.du], states[..., self.du:]
        u_new = self.h.outer_dynamics.sample_transition(rng, step, u, context)
        ctx = _with(context, prev_outer=u, new_outer=u_new)
        z_new = self.h.inner_model.dynamics.sample_transition(rng, step, z, ctx)
        return np.concatenate([u_new, z_new], axis=-1)

    def logdensity_transition(self, step, prev_states, new_states, context=EMPTY_CONTEXT):
        u, z = prev_states[..., : self.du], prev_states[..., self.du:]
        u2, z2 = new_states[..., : self.du], new_states[..., self.du:]
        ctx = _with(context, prev_outer=u, new_outer=u2)
        return (self.h.outer_dynamics.logdensity_transition(step, u, u2, context)
                + self.h.inner_model.dynamics.logdensity_transition(step, z, z2, ctx))


class _FlatObservation(ObservationProcess):
    def __init__(self, hier):
        self.h = hier
        self.du = hier.outer_dim
        self.dim = hier.inner_model.observation.dim
        self.state_dim = hier.outer_dim + hier.inner_dim
        self.dtype = hier.dtype

    def sample_observation(self, rng, step, states, context=EMPTY_CONTEXT):
        ctx = _with(context, new_outer=states[..., : self.du])
        return self.h.inner_model.observation.sample_observation(rng, step, states[..., self.du:], ctx)

    def logdensity_observation(self, step, states, observation, context=EMPTY_CONTEXT):
        ctx = _with(context, new_outer=states[..., : self.du])
        return self.h.inner_model.observation.logdensity_observation(step, states[..., self.du:], observation, ctx)


def as_state_space(model):
    """Return a :class:`StateSpaceModel` view of ``model`` (identity for plain models)."""
    if isinstance(model, HierarchicalModel):
        if model.flat is not None:
            return model.flat
        return StateSpaceModel(_FlatDynamics(model), _FlatObservation(model))
    return model


def _contexts(contexts, T):
    if contexts is None:
        return [EMPTY_CONTEXT] * T
    contexts = list(contexts)
    if len(contexts) != T:
        raise ValueError(f"expected {T} contexts, got {len(contexts)}")
    return contexts


def sample_trajectory(model, T, rng, contexts=None):
    """Forward-simulate ``T`` steps.

    Returns ``(states, observations)`` with ``T + 1`` states and ``T``
    observations.  For a :class:`HierarchicalModel` the states are returned
    as a pair ``(outer_states, inner_states)``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    ctxs = _contexts(contexts, T)
    if isinstance(model, HierarchicalModel):
        flat = StateSpaceModel(_FlatDynamics(model), _FlatObservation(model))
        xs, ys = sample_trajectory(flat, T, rng, ctxs)
        du = model.outer_dim
        return (xs[:, :du], xs[:, du:]), ys
    dyn, obs = model.dynamics, model.observation
    x = dyn.sample_initial(rng, None, EMPTY_CONTEXT)
    states, observations = [x], []
    for t in range(1, T + 1):
        x = dyn.sample_transition(rng, t, x, ctxs[t - 1])
        states.append(x)
        observations.append(obs.sample_observation(rng, t, x, ctxs[t - 1]))
    return np.asarray(states), np.asarray(observations)


def joint_logdensity(model, states, observations, contexts=None):
    """``log p(x_0) + sum_t [log p(x_t | x_{t-1}) + log p(y_t | x_t)]``.

    A zero-density term yields ``-inf`` rather than an exception.  For a
    hierarchical model pass ``states`` as ``(outer_states, inner_states)``;
    the density is assembled from the outer, inner-transition and observation
    factors separately.
    """
    T = len(observations)
    ctxs = _contexts(contexts, T)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if isinstance(model, HierarchicalModel):
            us, zs = (np.asarray(s) for s in states)
            if len(us) != T + 1 or len(zs) != T + 1:
                raise ValueError("need T + 1 outer and inner states")
            outer, inner = model.outer_dynamics, model.inner_model
            total = float(outer.logdensity_initial(us[0]))
            total += float(inner.dynamics.logdensity_initial(zs[0], _with(EMPTY_CONTEXT, new_outer=us[0])))
            for t in range(1, T + 1):
                c = ctxs[t - 1]
                ic = _with(c, prev_outer=us[t - 1], new_outer=us[t])
                total += float(outer.logdensity_transition(t, us[t - 1], us[t], c))
                total += float(inner.dynamics.logdensity_transition(t, zs[t - 1], zs[t], ic))
                total += float(inner.observation.logdensity_observation(t, zs[t], observations[t - 1], ic))
            return total if not math.isnan(total) else -math.inf
        states = np.asarray(states)
        if len(states) != T + 1:
            raise ValueError(f"need {T + 1} states for {T} observations, got {len(states)}")
        dyn, obs = model.dynamics, model.observation
        total = float(dyn.logdensity_initial(states[0]))
        for t in range(1, T + 1):
            total += float(dyn.logdensity_transition(t, states[t - 1], states[t], ctxs[t - 1]))
            total += float(obs.logdensity_observation(t, states[t], observations[t - 1], ctxs[t - 1]))
        return total if not math.isnan(total) else -math.inf
