"""Hot inner loops.

Each kernel exists twice: a numba ``@njit`` loop (``*_nb``) and a numpy
implementation (``*_np``).  The public dispatchers pick one according to
:data:`ssmkit._accel.USE_NUMBA`; both produce identical results (the
genealogy kernel may number arena slots differently, but the recorded
lineages are the same), which the test-suite checks directly.
"""
import numpy as np

from ssmkit._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# resampling: ancestors from a cumulative weight vector and sorted positions


@njit
def _search_sorted_nb(cumw, positions):
    # positions ascending; equivalent to searchsorted(cumw, positions, "right")
    n = cumw.shape[0]
    out = np.empty(positions.shape[0], dtype=np.int64)
    j = 0
    for k in range(positions.shape[0]):
        p = positions[k]
        while j < n - 1 and cumw[j] <= p:
            j += 1
        out[k] = j
    return out


@njit
def _search_unsorted_nb(cumw, positions):
    n = cumw.shape[0]
    out = np.empty(positions.shape[0], dtype=np.int64)
    for k in range(positions.shape[0]):
        p = positions[k]
        lo, hi = 0, n
        while lo < hi:
            mid = (lo + hi) // 2
            if cumw[mid] <= p:
                lo = mid + 1
            else:
                hi = mid
        out[k] = min(lo, n - 1)
    return out


def _search_np(cumw, positions):
    return np.minimum(np.searchsorted(cumw, positions, side="right"), cumw.shape[0] - 1).astype(np.int64)


def inverse_cdf(cumw, positions, sorted_positions=False):
    """Map positions in ``[0, cumw[-1])`` to indices of the cumulative weights."""
    cumw = np.ascontiguousarray(cumw, dtype=np.float64)
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    if not USE_NUMBA:
        return _search_np(cumw, positions)
    if sorted_positions:
        return _search_sorted_nb(cumw, positions)
    return _search_unsorted_nb(cumw, positions)


# --------------------------------------------------------------------------
# genealogy: arena insertion and reference-count pruning


@njit
def _record_nb(parent, nchild, node_states, free, n_free, leaves, ancestors, particles, is_root):
    n = ancestors.shape[0]
    new_leaves = np.empty(n, dtype=np.int64)
    for i in range(n):
        n_free -= 1
        slot = free[n_free]
        if is_root:
            parent[slot] = -1
        else:
            p = leaves[ancestors[i]]
            parent[slot] = p
            nchild[p] += 1
        nchild[slot] = 0
        for d in range(particles.shape[1]):
            node_states[slot, d] = particles[i, d]
        new_leaves[i] = slot
    if not is_root:
        for k in range(leaves.shape[0]):
            node = leaves[k]
            # free dead leaves and walk up while a branch loses its last child
            while node >= 0 and nchild[node] == 0:
                p = parent[node]
                parent[node] = -2
                free[n_free] = node
                n_free += 1
                if p >= 0:
                    nchild[p] -= 1
                node = p
    return new_leaves, n_free


def _record_np(parent, nchild, node_states, free, n_free, leaves, ancestors, particles, is_root):
    n = ancestors.shape[0]
    slots = free[n_free - n:n_free][::-1].copy()
    n_free -= n
    if is_root:
        parent[slots] = -1
    else:
        par = leaves[ancestors]
        parent[slots] = par
        np.add.at(nchild, par, 1)
    nchild[slots] = 0
    node_states[slots] = particles
    if not is_root:
        dead = np.unique(leaves[nchild[leaves] == 0])
        while dead.size:
            p = parent[dead]
            parent[dead] = -2
            free[n_free:n_free + dead.size] = dead
            n_free += dead.size
            p = p[p >= 0]
            np.subtract.at(nchild, p, 1)
            dead = np.unique(p[nchild[p] == 0])
    return slots, n_free


def record_generation(parent, nchild, node_states, free, n_free, leaves, ancestors, particles, is_root):
    """Insert one generation into the arena; returns ``(new_leaves, n_free)``.

    Arrays are mutated in place.  The caller guarantees ``n_free >= len(ancestors)``.
    """
    fn = _record_nb if USE_NUMBA else _record_np
    return fn(parent, nchild, node_states, free, n_free, leaves,
              np.ascontiguousarray(ancestors, dtype=np.int64),
              np.ascontiguousarray(particles, dtype=node_states.dtype), is_root)


# --------------------------------------------------------------------------
# rectangular linear assignment (shortest augmenting path Hungarian method)


@njit
def _hungarian_nb(cost):
    # rows <= cols; returns column assigned to each row
    nr, nc = cost.shape
    u = np.zeros(nr + 1)
    v = np.zeros(nc + 1)
    p = np.zeros(nc + 1, dtype=np.int64)     # p[j]: row (1-based) matched to column j
    way = np.zeros(nc + 1, dtype=np.int64)
    for i in range(1, nr + 1):
        p[0] = i
        j0 = 0
        minv = np.full(nc + 1, np.inf)
        used = np.zeros(nc + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, nc + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            if j1 < 0:
                # remaining columns unreachable
                return np.full(nr, -1, dtype=np.int64)
            for j in range(nc + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.full(nr, -1, dtype=np.int64)
    for j in range(1, nc + 1):
        if p[j] > 0:
            assign[p[j] - 1] = j - 1
    return assign


_hungarian_py = getattr(_hungarian_nb, "py_func", _hungarian_nb)


def linear_assignment(cost):
    """Minimum-cost assignment of every row to a distinct column (rows <= cols).

    ``cost`` must be finite.  Returns the column index chosen for each row.
    The numpy path runs the same algorithm interpreted.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.shape[0] > cost.shape[1]:
        raise ValueError("linear_assignment needs rows <= cols")
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    fn = _hungarian_nb if USE_NUMBA else _hungarian_py
    return fn(cost)


# --------------------------------------------------------------------------
# Lorenz-63 RK4 over a particle batch


@njit
def _lorenz_rk4_nb(states, dt, sigma, rho, beta):
    n = states.shape[0]
    out = np.empty_like(states)
    for i in range(n):
        x, y, z = states[i, 0], states[i, 1], states[i, 2]
        k1x = sigma * (y - x)
        k1y = x * (rho - z) - y
        k1z = x * y - beta * z
        x2, y2, z2 = x + 0.5 * dt * k1x, y + 0.5 * dt * k1y, z + 0.5 * dt * k1z
        k2x = sigma * (y2 - x2)
        k2y = x2 * (rho - z2) - y2
        k2z = x2 * y2 - beta * z2
        x3, y3, z3 = x + 0.5 * dt * k2x, y + 0.5 * dt * k2y, z + 0.5 * dt * k2z
        k3x = sigma * (y3 - x3)
        k3y = x3 * (rho - z3) - y3
        k3z = x3 * y3 - beta * z3
        x4, y4, z4 = x + dt * k3x, y + dt * k3y, z + dt * k3z
        k4x = sigma * (y4 - x4)
        k4y = x4 * (rho - z4) - y4
        k4z = x4 * y4 - beta * z4
        out[i, 0] = x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        out[i, 1] = y + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        out[i, 2] = z + dt / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z)
    return out


def _lorenz_deriv_np(s, sigma, rho, beta):
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)


def _lorenz_rk4_np(states, dt, sigma, rho, beta):
    k1 = _lorenz_deriv_np(states, sigma, rho, beta)
    k2 = _lorenz_deriv_np(states + 0.5 * dt * k1, sigma, rho, beta)
    k3 = _lorenz_deriv_np(states + 0.5 * dt * k2, sigma, rho, beta)
    k4 = _lorenz_deriv_np(states + dt * k3, sigma, rho, beta)
    return states + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz_rk4(states, dt, sigma, rho, beta):
    """One RK4 step of the Lorenz-63 flow for every row of ``states`` ``(N, 3)``."""
    states = np.ascontiguousarray(states, dtype=np.float64)
    if USE_NUMBA and states.ndim == 2:
        return _lorenz_rk4_nb(states, float(dt), float(sigma), float(rho), float(beta))
    return _lorenz_rk4_np(states, dt, sigma, rho, beta)
