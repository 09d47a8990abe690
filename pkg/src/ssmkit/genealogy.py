"""Sparse storage of particle ancestry.

Only lineages with a living descendant are kept.  Nodes live in a growable
arena with explicit live-child counts; a node whose count drops to zero and
is not a current leaf goes straight back on the free-list.
"""
import csv

import numpy as np

from ssmkit import kernels
from ssmkit.inference import step as _step
from ssmkit.models import EMPTY_CONTEXT


class AncestryTree:
    def __init__(self, n_particles, state_dim, capacity=None, dtype=np.float64):
        self.n_particles = int(n_particles)
        self.state_dim = int(state_dim)
        cap = int(capacity) if capacity is not None else 4 * self.n_particles
        cap = max(cap, self.n_particles)
        self.parent = np.full(cap, -2, dtype=np.int64)
        self.nchild = np.zeros(cap, dtype=np.int64)
        self.states = np.zeros((cap, self.state_dim), dtype=dtype)
        # popping from the end hands out slot 0 first
        self.free = np.arange(cap - 1, -1, -1, dtype=np.int64)
        self.n_free = cap
        self.leaves = np.zeros(0, dtype=np.int64)
        self.generations = 0
        self.peak_live = 0

    @property
    def capacity(self):
        return self.parent.shape[0]

    @property
    def live_count(self):
        return self.capacity - self.n_free

    def _grow(self, need):
        old = self.capacity
        new = max(2 * old, old + need)
        extra = new - old
        self.parent = np.concatenate([self.parent, np.full(extra, -2, dtype=np.int64)])
        self.nchild = np.concatenate([self.nchild, np.zeros(extra, dtype=np.int64)])
        self.states = np.concatenate([self.states, np.zeros((extra, self.state_dim), dtype=self.states.dtype)])
        free = np.empty(new, dtype=np.int64)
        # new slots sit below the existing free entries, so they are handed out last
        free[:extra] = np.arange(new - 1, old - 1, -1)
        free[extra:extra + self.n_free] = self.free[: self.n_free]
        self.free = free
        self.n_free += extra

    def record_generation(self, particles, ancestors=None):
        """Append a generation; ``ancestors`` index the previous generation (omit for the first)."""
        particles = np.asarray(particles).reshape(self.n_particles, self.state_dim)
        is_root = self.generations == 0
        if is_root:
            ancestors = np.zeros(self.n_particles, dtype=np.int64)
        elif ancestors is None:
            raise ValueError("ancestors are required after the first generation")
        ancestors = np.asarray(ancestors)
        if not is_root and (ancestors.min() < 0 or ancestors.max() >= self.n_particles):
            raise IndexError("ancestor index out of range")
        if self.n_free < self.n_particles:
            self._grow(self.n_particles)
        self.leaves, self.n_free = kernels.record_generation(
            self.parent, self.nchild, self.states, self.free, self.n_free,
            self.leaves, ancestors, particles, is_root,
        )
        self.generations += 1
        self.peak_live = max(self.peak_live, self.live_count)
        return self

    def extract_path(self, leaf_index):
        """States from the root generation to leaf ``leaf_index``, shape ``(T + 1, D)``."""
        node = int(self.leaves[leaf_index])
        out = np.empty((self.generations, self.state_dim), dtype=self.states.dtype)
        for t in range(self.generations - 1, -1, -1):
            out[t] = self.states[node]
            node = self.parent[node]
        return out

    def extract_paths(self):
        """All surviving paths, shape ``(N, T + 1, D)``."""
        out = np.empty((self.n_particles, self.generations, self.state_dim), dtype=self.states.dtype)
        idx = self.leaves.copy()
        for t in range(self.generations - 1, -1, -1):
            out[:, t] = self.states[idx]
            idx = self.parent[idx]
        return out

    def check_invariants(self):
        """Assert the no-leak and reachability invariants."""
        live = np.flatnonzero(self.parent != -2)
        if live.size + self.n_free != self.capacity:
            raise AssertionError(f"leak: {live.size} live + {self.n_free} free != {self.capacity}")
        free = self.free[: self.n_free]
        if np.unique(free).size != free.size or np.any(self.parent[free] != -2):
            raise AssertionError("free-list corrupted")
        counts = np.zeros(self.capacity, dtype=np.int64)
        par = self.parent[live]
        np.add.at(counts, par[par >= 0], 1)
        if not np.array_equal(counts[live], self.nchild[live]):
            raise AssertionError("child counts out of sync")
        leaf_set = np.zeros(self.capacity, dtype=bool)
        leaf_set[self.leaves] = True
        if np.any((self.nchild[live] == 0) & ~leaf_set[live]):
            raise AssertionError("childless non-leaf node left alive")
        idx = self.leaves.copy()
        for _ in range(self.generations - 1):
            idx = self.parent[idx]
            if np.any(idx < 0):
                raise AssertionError("leaf path ends before the root generation")
        if np.any(self.parent[idx] != -1):
            raise AssertionError("leaf path does not reach a root")


def write_path_csv(path, states, columns=None):
    """One row per time step, one column per state component."""
    states = np.asarray(states)
    columns = columns or [f"x{i}" for i in range(states.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *columns])
        for t, row in enumerate(states):
            w.writerow([t, *(repr(float(v)) for v in row)])


def filter_with_genealogy(rng, model, alg, observations, contexts=None, callback=None):
    """Run a particle engine while recording every generation.

    Returns ``(final_container, log_evidence, tree)``.  The tree holds
    ``T + 1`` generations: the initial draw plus one per observation.
    """
    observations = list(observations)
    state = alg.initialise(rng, model, EMPTY_CONTEXT)
    parts = np.asarray(state.filtered.particles)
    tree = AncestryTree(len(parts), parts.reshape(len(parts), -1).shape[1], dtype=parts.dtype)
    tree.record_generation(parts)
    total = 0.0
    for t, y in enumerate(observations, start=1):
        ctx = EMPTY_CONTEXT if contexts is None else contexts[t - 1]
        state, ll = _step(rng, model, alg, t, state, y, ctx)
        tree.record_generation(state.filtered.particles, state.ancestors)
        total += ll
        if callback is not None:
            callback(t, state, ll, tree)
    return state, total, tree
