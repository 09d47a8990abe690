"""Particle-marginal Metropolis-Hastings over static parameters.

The sampler only needs a log-evidence, so the engine is interchangeable:
a :class:`~ssmkit.kalman.KalmanFilter` gives exact Metropolis-Hastings, a
particle filter gives the pseudo-marginal variant.
"""
import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ssmkit.errors import SSMError
from ssmkit.inference import filter as run_filter
from ssmkit.models import LinearGaussianDynamics, LinearGaussianObservation, StateSpaceModel

SUPPORTS = ("positive", "real")


@dataclass(frozen=True)
class ParameterSpace:
    """Named parameters and their supports; positive ones random-walk on the log scale."""

    names: tuple
    supports: tuple

    def __post_init__(self):
        if len(self.names) != len(self.supports):
            raise ValueError("names and supports differ in length")
        bad = [s for s in self.supports if s not in SUPPORTS]
        if bad:
            raise ValueError(f"unknown support(s) {bad}")

    @property
    def _pos(self):
        return np.array([s == "positive" for s in self.supports])

    def contains(self, theta):
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(np.isfinite(theta)) and np.all(theta[self._pos] > 0))

    def to_unconstrained(self, theta):
        phi = np.array(theta, dtype=float)
        phi[self._pos] = np.log(phi[self._pos])
        return phi

    def from_unconstrained(self, phi):
        theta = np.array(phi, dtype=float)
        theta[self._pos] = np.exp(theta[self._pos])
        return theta

    def log_jacobian(self, theta):
        """``log |d theta / d phi|`` of the inverse transform."""
        return float(np.sum(np.log(np.asarray(theta, dtype=float)[self._pos])))


@dataclass
class MarkovChain:
    names: tuple
    thetas: np.ndarray
    log_prior: np.ndarray
    log_evidence: np.ndarray
    accepted: np.ndarray
    # iterations whose proposal made the filter fail (counted as rejections)
    failures: list = field(default_factory=list)

    def __len__(self):
        return self.thetas.shape[0]

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accepted[1:])) if len(self) > 1 else float("nan")

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", *self.names, "log_prior", "log_evidence", "accepted"])
            for i in range(len(self)):
                w.writerow([i, *(repr(float(v)) for v in self.thetas[i]),
                            repr(float(self.log_prior[i])), repr(float(self.log_evidence[i])),
                            int(self.accepted[i])])


def _log_evidence(seed, model_builder, engine, theta, observations, contexts):
    _, ll = run_filter(np.random.default_rng(seed), model_builder(theta), engine, observations, contexts)
    return float(ll)


def pmmh(rng, model_builder, log_prior, scales, engine, observations, n_iters, theta_init,
         space=None, contexts=None, log_evidence=None):
    """Random-walk PMMH.

    Parameters
    ----------
    model_builder : callable
        ``theta -> model`` accepted by ``engine``.
    log_prior : callable
        ``theta -> float`` log prior density on the constrained scale.
    scales : array_like
        Random-walk standard deviations on the unconstrained scale.
    space : ParameterSpace, optional
        Defaults to every parameter being positive.
    log_evidence : callable, optional
        Override ``(seed, theta) -> float``; defaults to a fresh filter run
        seeded with ``seed``.

    The log-evidence of the current state is stored and reused, never
    re-estimated.  A proposal on which the filter fails is rejected and its
    iteration is recorded in ``chain.failures``.
    """
    theta = np.array(theta_init, dtype=float)
    p = theta.size
    space = space or ParameterSpace(tuple(f"theta{i}" for i in range(p)), ("positive",) * p)
    scales = np.broadcast_to(np.asarray(scales, dtype=float), (p,))
    observations = list(observations)
    if log_evidence is None:
        def log_evidence(seed, th):
            return _log_evidence(seed, model_builder, engine, th, observations, contexts)

    lp = float(log_prior(theta))
    if not (space.contains(theta) and np.isfinite(lp)):
        raise ValueError("prior density must be positive at theta_init")
    ll = log_evidence(int(rng.integers(2**63)), theta)
    if not np.isfinite(ll):
        raise ValueError("log-evidence is not finite at theta_init")

    thetas = np.empty((n_iters + 1, p))
    lps = np.empty(n_iters + 1)
    lls = np.empty(n_iters + 1)
    acc = np.zeros(n_iters + 1, dtype=bool)
    thetas[0], lps[0], lls[0], acc[0] = theta, lp, ll, True
    failures = []
    phi = space.to_unconstrained(theta)
    log_jac = space.log_jacobian(theta)

    for i in range(1, n_iters + 1):
        # draws happen unconditionally so the random stream never depends on outcomes
        step = scales * rng.standard_normal(p)
        seed = int(rng.integers(2**63))
        log_u = math.log(rng.random())
        phi_new = phi + step
        theta_new = space.from_unconstrained(phi_new)
        lp_new = float(log_prior(theta_new)) if space.contains(theta_new) else -math.inf
        ll_new = -math.inf
        if np.isfinite(lp_new):
            try:
                ll_new = log_evidence(seed, theta_new)
            except SSMError:
                failures.append(i)
        if np.isfinite(ll_new) and np.isfinite(lp_new):
            log_jac_new = space.log_jacobian(theta_new)
            log_alpha = (ll_new + lp_new + log_jac_new) - (ll + lp + log_jac)
            if log_u < log_alpha:
                phi, theta, lp, ll, log_jac = phi_new, theta_new, lp_new, ll_new, log_jac_new
                acc[i] = True
        thetas[i], lps[i], lls[i] = theta, lp, ll
    return MarkovChain(space.names, thetas, lps, lls, acc, failures)


def inverse_gamma_logpdf(x, shape=2.0, scale=3.0):
    return float(np.sum(stats.invgamma.logpdf(np.asarray(x, dtype=float), shape, scale=scale)))


def batch_means_se(x, n_batches=50):
    """Monte Carlo standard error of the mean of a correlated series (non-overlapping batch means)."""
    x = np.asarray(x, dtype=float)
    b = len(x) // n_batches
    if b < 1:
        raise ValueError("series shorter than the number of batches")
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))


def noise_variance_model(theta, a=0.9, sigma0=1.0):
    """Scalar ``x_t = a x_{t-1} + N(0, theta[0])``, ``y_t = x_t + N(0, theta[1])``."""
    q, r = float(theta[0]), float(theta[1])
    return StateSpaceModel(
        LinearGaussianDynamics(A=[[a]], Q=[[q]], mu0=[0.0], Sigma0=[[sigma0]]),
        LinearGaussianObservation(H=[[1.0]], R=[[r]]),
    )


def observation_variance_family(block_model):
    """``theta -> hierarchical model`` whose observation covariance is ``theta[0] * I``.

    The returned models run unchanged under a Kalman filter (through their
    flat view), a bootstrap filter and an RBPF.
    """
    def build(theta):
        bm = dataclasses.replace(block_model, R=float(theta[0]) * np.eye(block_model.R.shape[0]))
        return bm.hierarchical()

    return build
