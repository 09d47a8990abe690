"""Multi-object tracking with global-nearest-neighbour association.

Targets follow independent near-constant-velocity models with state
``(x, vx, y, vy)``.  Each scan mixes detections (probability ``p_detect``,
Gaussian around the position) with Poisson clutter uniform over a
rectangular region.  Association is solved exactly with the Hungarian
method on log-likelihood-ratio costs; associated targets get a Kalman
update, the rest keep their prediction.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ssmkit import kernels
from ssmkit.errors import SSMError
from ssmkit.kalman import GaussianBelief, kalman_predict, kalman_update
from ssmkit.models import LinearGaussianDynamics, LinearGaussianObservation

GATE = 25.0


class TrackingError(SSMError):
    pass


class InfeasibleAssociationError(TrackingError):
    pass


def cv_matrices(tau, q=1.0, r=0.3):
    """Near-constant-velocity ``A, Q`` and position-sensor ``H, R`` for interval ``tau``.

    ``Q`` carries the usual white-acceleration blocks
    ``q * [[tau^3/3, tau^2/2], [tau^2/2, tau]]`` per axis.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    A = np.eye(4)
    A[0, 1] = A[2, 3] = tau
    blk = q * np.array([[tau**3 / 3.0, tau**2 / 2.0], [tau**2 / 2.0, tau]])
    Q = np.zeros((4, 4))
    Q[:2, :2] = Q[2:, 2:] = blk
    H = np.zeros((2, 4))
    H[0, 0] = H[1, 2] = 1.0
    R = r * np.eye(2)
    return A, Q, H, R


@dataclass(frozen=True)
class SensorModel:
    p_detect: float
    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.p_detect <= 1.0:
            raise ValueError("p_detect must lie in (0, 1]")

    @property
    def observation(self):
        return LinearGaussianObservation(self.H, self.R)


@dataclass(frozen=True)
class ClutterModel:
    """Poisson clutter with mean ``rate`` per scan, uniform on ``bounds = ((x0, x1), (y0, y1))``."""

    rate: float
    bounds: tuple

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("clutter rate must be non-negative")
        if self.volume <= 0:
            raise ValueError("surveillance region must have positive area")

    @property
    def volume(self):
        (x0, x1), (y0, y1) = self.bounds
        return float((x1 - x0) * (y1 - y0))

    @property
    def density(self):
        return self.rate / self.volume


@dataclass
class Scan:
    measurements: np.ndarray
    index: int = 0
    # target index of each measurement, -1 for clutter; unknown for real data
    origin: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.measurements.shape[0]


def simulate_scan(rng, targets, sensor, clutter, index=0):
    """Detections of ``targets`` ``(K, 4)`` followed by clutter, then shuffled."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    k = targets.shape[0]
    detected = rng.random(k) < sensor.p_detect
    L = np.linalg.cholesky(sensor.R)
    det = targets[detected] @ sensor.H.T + rng.standard_normal((int(detected.sum()), 2)) @ L.T
    m_c = rng.poisson(clutter.rate)
    (x0, x1), (y0, y1) = clutter.bounds
    clut = np.column_stack([rng.uniform(x0, x1, m_c), rng.uniform(y0, y1, m_c)])
    meas = np.concatenate([det, clut]).reshape(-1, 2)
    origin = np.concatenate([np.flatnonzero(detected), np.full(m_c, -1)]).astype(np.int64)
    perm = rng.permutation(meas.shape[0])
    return Scan(meas[perm], index, origin[perm])


def hungarian(cost, miss_cost):
    """Optimal association vector for a ``(K, M)`` cost matrix with per-target miss costs.

    Returns ``theta`` of length ``K`` with entries in ``0..M``; ``0`` marks a
    missed target and ``j > 0`` the ``j``-th measurement (1-based).  Entries
    may be ``+inf`` to forbid a pairing.
    """
    miss = np.asarray(miss_cost, dtype=float)
    if miss.size == 0:
        return np.zeros(0, dtype=np.int64)
    cost = np.asarray(cost, dtype=float).reshape(miss.size, -1)
    k, m = cost.shape
    if np.any(np.isnan(cost)) or np.any(np.isnan(miss)) or np.any(np.isneginf(cost)) or np.any(np.isneginf(miss)):
        raise ValueError("costs must be real or +inf")
    aug = np.full((k, m + k), np.inf)
    aug[:, :m] = cost
    aug[np.arange(k), m + np.arange(k)] = miss
    finite = np.isfinite(aug)
    if not finite.any():
        raise InfeasibleAssociationError("every pairing and miss is forbidden")
    span = np.max(np.abs(aug[finite]))
    big = (span + 1.0) * (k + 1) * 4.0
    # shift so all finite costs are non-negative, forbidden ones exceed any feasible total
    work = np.where(finite, aug - aug[finite].min(), big)
    cols = kernels.linear_assignment(work)
    if np.any(cols < 0) or not np.all(finite[np.arange(k), cols]):
        raise InfeasibleAssociationError("no feasible association")
    return np.where(cols < m, cols + 1, 0).astype(np.int64)


def check_association(theta, n_measurements):
    """The two constraints: each target takes at most one measurement and vice versa."""
    theta = np.asarray(theta)
    used = theta[theta > 0]
    return bool(np.all((theta >= 0) & (theta <= n_measurements)) and np.unique(used).size == used.size)


def association_costs(pred, scan, sensor, clutter):
    """Pair costs ``-log N(y_j; H m_i, S_i) - log p_D + log(clutter density)`` with gating, plus miss costs."""
    H, R = sensor.H, sensor.R
    mean_y = pred.mean @ H.T
    S = H @ pred.covariance @ H.T + R
    S_inv = np.linalg.inv(S)
    logdet = np.linalg.slogdet(S)[1]
    diff = scan.measurements[None, :, :] - mean_y[:, None, :]
    d2 = np.einsum("kmi,kij,kmj->km", diff, S_inv, diff)
    nll = 0.5 * (d2 + logdet[:, None] + 2.0 * math.log(2.0 * math.pi))
    lam = max(clutter.density, np.finfo(float).tiny)
    cost = nll - math.log(sensor.p_detect) + math.log(lam)
    cost[d2 > GATE] = np.inf
    miss = np.full(pred.mean.shape[0], -math.log1p(-sensor.p_detect) if sensor.p_detect < 1 else np.inf)
    return cost, miss


def gnn_track_step(beliefs, scan, sensor, clutter, dynamics, step=0):
    """Predict every target, associate, update the associated ones.

    Returns ``(filtered_beliefs, theta)``.
    """
    pred = kalman_predict(beliefs, step, dynamics)
    cost, miss = association_costs(pred, scan, sensor, clutter)
    try:
        theta = hungarian(cost, miss)
    except InfeasibleAssociationError:
        raise TrackingError(
            "no feasible association with p_detect = 1; use p_detect < 1 so targets may go undetected"
        ) from None
    hit = np.flatnonzero(theta > 0)
    out = GaussianBelief(pred.mean.copy(), pred.covariance.copy())
    if hit.size:
        y = scan.measurements[theta[hit] - 1]
        upd, _ = kalman_update(pred.take(hit), step, sensor.observation, y)
        out.mean[hit] = upd.mean
        out.covariance[hit] = upd.covariance
    return out, theta


@dataclass
class TrackingResult:
    means: np.ndarray          # (T + 1, K, 4), row 0 is the initial belief
    associations: np.ndarray   # (T, K)
    frames: list


def run_tracker(initial, scans, sensor, clutter, dynamics, frames=None):
    beliefs = initial
    means = [beliefs.mean.copy()]
    assoc = []
    for n, scan in enumerate(scans, start=1):
        beliefs, theta = gnn_track_step(beliefs, scan, sensor, clutter, dynamics, n)
        if not check_association(theta, len(scan)):
            raise TrackingError(f"association constraints violated at scan {n}")
        means.append(beliefs.mean.copy())
        assoc.append(theta)
    frames = list(range(1, len(scans) + 1)) if frames is None else list(frames)
    return TrackingResult(np.asarray(means), np.asarray(assoc).reshape(len(scans), -1), frames)


def cv_dynamics(tau, q=1.0):
    A, Q, _, _ = cv_matrices(tau, q)
    return LinearGaussianDynamics(A=A, Q=Q, mu0=np.zeros(4), Sigma0=np.eye(4))


def initial_beliefs(positions, velocity_var=1.0, position_var=0.3, velocities=None):
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    k = pos.shape[0]
    vel = np.zeros((k, 2)) if velocities is None else np.asarray(velocities, dtype=float).reshape(k, 2)
    mean = np.column_stack([pos[:, 0], vel[:, 0], pos[:, 1], vel[:, 1]])
    cov = np.broadcast_to(np.diag([position_var, velocity_var, position_var, velocity_var]), (k, 4, 4)).copy()
    return GaussianBelief(mean, cov)


def simulate_scenario(rng, n_targets=7, n_steps=50, tau=1.0, q=1.0, r=0.3, p_detect=0.9,
                      clutter_rate=10.0, bounds=((0.0, 200.0), (0.0, 200.0)), speed=1.0):
    """Ground truth ``(n_steps + 1, K, 4)`` and scans for targets spread over the region."""
    A, Q, H, R = cv_matrices(tau, q, r)
    (x0, x1), (y0, y1) = bounds
    k = n_targets
    pos = np.column_stack([rng.uniform(x0 + 0.2 * (x1 - x0), x1 - 0.2 * (x1 - x0), k),
                           rng.uniform(y0 + 0.2 * (y1 - y0), y1 - 0.2 * (y1 - y0), k)])
    vel = speed * rng.standard_normal((k, 2))
    x = np.column_stack([pos[:, 0], vel[:, 0], pos[:, 1], vel[:, 1]])
    LQ = np.linalg.cholesky(Q)
    sensor = SensorModel(p_detect, H, R)
    clutter = ClutterModel(clutter_rate, bounds)
    truth, scans = [x], []
    for n in range(1, n_steps + 1):
        x = x @ A.T + rng.standard_normal((k, 4)) @ LQ.T
        truth.append(x)
        scans.append(simulate_scan(rng, x, sensor, clutter, n))
    return np.asarray(truth), scans, sensor, clutter


def position_rmse(truth, means):
    """Per-target, per-coordinate position RMSE over all scans (row 0 excluded).

    Comparable with the per-coordinate measurement noise std ``sqrt(r)``.
    """
    err = means[1:, :, [0, 2]] - truth[1:, :, [0, 2]]
    return np.sqrt(np.mean(err**2, axis=(0, 2)))


def read_detections_csv(path):
    """Detections CSV with columns ``frame, x, y``; returns ``(frames, scans)`` sorted by frame."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"frame", "x", "y"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"detections CSV lacks columns {sorted(missing)}")
        for r in reader:
            rows.setdefault(int(r["frame"]), []).append((float(r["x"]), float(r["y"])))
    frames = sorted(rows)
    return frames, [Scan(np.asarray(rows[f], dtype=float).reshape(-1, 2), f) for f in frames]


def write_detections_csv(path, scans, frames=None):
    frames = frames or [s.index for s in scans]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "x", "y"])
        for f, s in zip(frames, scans):
            for x, y in s.measurements:
                w.writerow([f, repr(float(x)), repr(float(y))])


def write_tracks_csv(path, result):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "target_id", "x", "y"])
        for f, m in zip(result.frames, result.means[1:]):
            for k, s in enumerate(m):
                w.writerow([f, k, repr(float(s[0])), repr(float(s[2]))])


def write_associations_csv(path, result):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "target_id", "measurement"])
        for f, theta in zip(result.frames, result.associations):
            for k, j in enumerate(theta):
                w.writerow([f, k, int(j)])
