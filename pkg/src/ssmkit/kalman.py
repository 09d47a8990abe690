"""Closed-form filters: Kalman filter and the discrete forward algorithm.

Both work on beliefs that may carry leading batch axes, which is how the
Rao-Blackwellised particle filter runs one inner filter per particle.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ssmkit.errors import (
    DimensionMismatchError,
    ImpossibleObservationError,
    NotPositiveSemidefiniteError,
    SingularInnovationError,
)
from ssmkit.models import EMPTY_CONTEXT, PSD_TOL, _check_stochastic, as_state_space

_LOG_2PI = math.log(2.0 * math.pi)


def _sym(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _mv(M, v):
    return np.einsum("...ij,...j->...i", M, v)


def _mT(M):
    return np.swapaxes(M, -1, -2)


def _ensure_psd(cov, what):
    d = cov.shape[-1]
    try:
        np.linalg.cholesky(cov + PSD_TOL * np.eye(d, dtype=cov.dtype))
    except np.linalg.LinAlgError:
        lo = np.min(np.linalg.eigvalsh(cov))
        if lo < -PSD_TOL:
            raise NotPositiveSemidefiniteError(what, lo) from None


@dataclass
class GaussianBelief:
    """Mean ``(..., D)`` and covariance ``(..., D, D)``."""

    mean: np.ndarray
    covariance: np.ndarray

    @property
    def batch_shape(self):
        return self.mean.shape[:-1]

    def take(self, idx):
        return GaussianBelief(self.mean[idx], self.covariance[idx])

    def expand(self, n):
        """Broadcast an unbatched belief to ``n`` independent copies."""
        d = self.mean.shape[-1]
        return GaussianBelief(
            np.broadcast_to(self.mean, (n, d)).copy(),
            np.broadcast_to(self.covariance, (n, d, d)).copy(),
        )

    def __len__(self):
        return self.mean.shape[0]


@dataclass
class DiscreteBelief:
    """Normalised log-probabilities over ``K`` states, shape ``(..., K)``."""

    log_probabilities: np.ndarray

    @property
    def probabilities(self):
        return np.exp(self.log_probabilities)

    @property
    def batch_shape(self):
        return self.log_probabilities.shape[:-1]

    def take(self, idx):
        return DiscreteBelief(self.log_probabilities[idx])

    def expand(self, n):
        k = self.log_probabilities.shape[-1]
        return DiscreteBelief(np.broadcast_to(self.log_probabilities, (n, k)).copy())

    def __len__(self):
        return self.log_probabilities.shape[0]


def kalman_predict(belief, step, dynamics, context=EMPTY_CONTEXT):
    """Push a Gaussian belief through linear-Gaussian dynamics."""
    A = dynamics.calc_A(step, context)
    b = dynamics.calc_b(step, context)
    Q = dynamics.calc_Q(step, context)
    m, P = belief.mean, belief.covariance
    if A.shape[-1] != m.shape[-1]:
        raise DimensionMismatchError(f"A has {A.shape[-1]} columns, belief has dimension {m.shape[-1]}")
    mean = _mv(A, m) + b
    cov = _sym(A @ P @ _mT(A) + Q)
    _ensure_psd(cov, "predicted covariance")
    return GaussianBelief(mean, cov)


def _cholesky_with_retry(S, step):
    try:
        return np.linalg.cholesky(S), S
    except np.linalg.LinAlgError:
        pass
    dy = S.shape[-1]
    jitter = 1e-9 * np.trace(S, axis1=-2, axis2=-1) / dy
    S = S + jitter[..., None, None] * np.eye(dy, dtype=S.dtype)
    try:
        return np.linalg.cholesky(S), S
    except np.linalg.LinAlgError:
        raise SingularInnovationError(step) from None


def kalman_update(belief, step, observation, y, context=EMPTY_CONTEXT):
    """Condition a predicted belief on ``y``.

    Returns the filtered belief (Joseph-form covariance) and the incremental
    log-likelihood ``log N(y; H m + c, S)``.
    """
    H = observation.calc_H(step, context)
    R = observation.calc_R(step, context)
    c = observation.calc_c(step, context)
    m, P = belief.mean, belief.covariance
    y = np.asarray(y, dtype=m.dtype)
    dy = H.shape[-2]
    if H.shape[-1] != m.shape[-1]:
        raise DimensionMismatchError(f"H has {H.shape[-1]} columns, belief has dimension {m.shape[-1]}")
    if y.shape[-1:] != (dy,):
        raise DimensionMismatchError(f"observation has shape {y.shape}, expected trailing dimension {dy}")

    HP = H @ P
    S = _sym(HP @ _mT(H) + R)
    L, S = _cholesky_with_retry(S, step)
    resid = y - (_mv(H, m) + c)
    # S^{-1} [HP | resid] via the Cholesky factor
    batch = np.broadcast_shapes(HP.shape[:-2], resid.shape[:-1], L.shape[:-2])
    rhs = np.concatenate(
        [np.broadcast_to(HP, batch + HP.shape[-2:]), np.broadcast_to(resid, batch + (dy,))[..., None]], axis=-1
    )
    L = np.broadcast_to(L, batch + L.shape[-2:])
    tmp = np.linalg.solve(L, rhs)
    sol = np.linalg.solve(_mT(L), tmp)
    Kt, alpha = sol[..., :-1], sol[..., -1]
    K = _mT(Kt)

    mean = m + _mv(K, resid)
    d = m.shape[-1]
    IKH = np.eye(d, dtype=m.dtype) - K @ H
    cov = _sym(IKH @ P @ _mT(IKH) + K @ R @ Kt)

    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    quad = np.sum(resid * alpha, axis=-1)
    ll = -0.5 * (quad + logdet + dy * _LOG_2PI)
    return GaussianBelief(mean, cov), ll


def forward_predict(belief, step, transition_matrix, context=EMPTY_CONTEXT):
    """``p'(j) = sum_i p(i) T[i, j]`` evaluated in log space."""
    T = np.asarray(transition_matrix)
    _check_stochastic(T)
    with np.errstate(divide="ignore"):
        logT = np.log(T)
    lp = belief.log_probabilities
    return DiscreteBelief(logsumexp(lp[..., :, None] + logT, axis=-2))


def forward_update(belief, emission_logdensities, step=None):
    """Bayes update with per-state emission log-densities ``(..., K)``."""
    lp = belief.log_probabilities
    unnorm = lp + np.asarray(emission_logdensities)
    total = logsumexp(unnorm, axis=-1)
    if np.any(np.isneginf(total)):
        raise ImpossibleObservationError(step)
    ll = total - logsumexp(lp, axis=-1)
    return DiscreteBelief(unnorm - total[..., None]), ll


class KalmanFilter:
    """Exact filter for linear-Gaussian models (``LinearGaussianDynamics`` + ``LinearGaussianObservation``)."""

    def initialise(self, rng, model, context=EMPTY_CONTEXT):
        dyn = as_state_space(model).dynamics
        return GaussianBelief(np.asarray(dyn.calc_mu0(context)), np.asarray(dyn.calc_Sigma0(context)))

    def predict(self, rng, model, step, belief, context=EMPTY_CONTEXT):
        return kalman_predict(belief, step, as_state_space(model).dynamics, context)

    def update(self, model, step, belief, observation, context=EMPTY_CONTEXT):
        return kalman_update(belief, step, as_state_space(model).observation, observation, context)

    def __repr__(self):
        return "KalmanFilter()"


class ForwardAlgorithm:
    """Exact filter for finite-state models (``DiscreteDynamics`` + per-state emissions)."""

    def initialise(self, rng, model, context=EMPTY_CONTEXT):
        p0 = as_state_space(model).dynamics.calc_initial_probs(context)
        with np.errstate(divide="ignore"):
            return DiscreteBelief(np.log(np.asarray(p0, dtype=float)))

    def predict(self, rng, model, step, belief, context=EMPTY_CONTEXT):
        T = as_state_space(model).dynamics.calc_transition_matrix(step, context)
        return forward_predict(belief, step, T, context)

    def update(self, model, step, belief, observation, context=EMPTY_CONTEXT):
        obs = as_state_space(model).observation
        if hasattr(obs, "emission_logdensities"):
            ll = obs.emission_logdensities(step, observation, context)
        else:
            k = belief.log_probabilities.shape[-1]
            ll = obs.logdensity_observation(step, np.arange(k), observation, context)
        return forward_update(belief, ll, step)

    def __repr__(self):
        return "ForwardAlgorithm()"
