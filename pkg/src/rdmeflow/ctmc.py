"""Explicit generator of the master equation on a capped state space.

For tiny systems the whole RDME fits in memory: enumerate every state with
at most ``cap`` molecules of each species in each voxel and write the
generator ``Q`` so that ``p(t) = p(0) expm(Q t)``. Transitions that would
leave the capped space are dropped (their rate is not added to the
diagonal either), so every row sums to zero.

Propensities here are evaluated by tree walking in Python, independently of
the compiled kernels.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .errors import CapacityError
from .model import ModelSpec, initial_state, propensity, require_valid

MAX_STATES = 200_000


@dataclass(frozen=True, eq=False)
class CTMC:
    generator: sp.csr_matrix
    states: np.ndarray   # (N, K, S)
    caps: np.ndarray     # (S,)

    def index(self, state) -> int:
        state = np.asarray(state).reshape(self.states.shape[1:])
        radix = self.caps + 1
        idx = 0
        for k in range(state.shape[0]):
            for s in range(state.shape[1]):
                if not 0 <= state[k, s] <= self.caps[s]:
                    raise CapacityError(f"state {state.tolist()} is outside the capped space")
                idx = idx * int(radix[s]) + int(state[k, s])
        return idx

    def point_mass(self, state) -> np.ndarray:
        p = np.zeros(len(self.states))
        p[self.index(state)] = 1.0
        return p

    def distribution(self, p0, t: float) -> np.ndarray:
        """``p0 expm(Q t)``."""
        if t == 0:
            return np.asarray(p0, dtype=float).copy()
        p = expm_multiply(self.generator.T * t, np.asarray(p0, dtype=float))
        return np.clip(p, 0.0, None)


def build_ctmc_generator(model: ModelSpec, diffusion=None, state_cap=10) -> CTMC:
    """Enumerate states and assemble the sparse generator.

    ``state_cap`` is an int (every species) or a mapping species -> cap,
    bounding each voxel's count of that species.
    """
    require_valid(model)
    diffusion = model.diffusion if diffusion is None else diffusion
    K, S = model.num_voxels, len(model.species)
    names = model.species_names
    if isinstance(state_cap, dict):
        caps = np.array([int(state_cap[n]) for n in names], dtype=np.int64)
    else:
        caps = np.full(S, int(state_cap), dtype=np.int64)
    n_states = 1
    for _ in range(K):
        for s in range(S):
            n_states *= int(caps[s]) + 1
            if n_states > MAX_STATES:
                raise CapacityError(f"capped state space exceeds {MAX_STATES} states")

    # voxel-major, species-minor mixed radix; first entry most significant
    ranges = [range(int(caps[s]) + 1) for _ in range(K) for s in range(S)]
    states = np.array(list(itertools.product(*ranges)), dtype=np.int64).reshape(n_states, K, S)
    radix = np.array([int(caps[s]) + 1 for _ in range(K) for s in range(S)], dtype=np.int64)
    weights = np.ones(K * S, dtype=np.int64)
    for q in range(K * S - 2, -1, -1):
        weights[q] = weights[q + 1] * radix[q + 1]

    params = model.parameter_values
    vols = model.mesh.volumes
    masks = [model.reaction_mask(r) for r in model.reactions]
    changes = []
    for r in model.reactions:
        c = np.zeros(S, dtype=np.int64)
        for name, n in r.change().items():
            c[names.index(name)] = n
        changes.append(c)
    jumps = []
    for s in range(S):
        for i in range(K):
            cols, rates = diffusion.row(s, i)
            for j, rate in zip(cols, rates):
                if rate > 0:
                    jumps.append((s, i, int(j), float(rate)))

    rows, cols, vals = [], [], []
    diag = np.zeros(n_states)
    for n in range(n_states):
        x = states[n]
        flat = x.reshape(-1)
        out_rate = 0.0
        for m, r in enumerate(model.reactions):
            for i in range(K):
                if not masks[m][i]:
                    continue
                a = propensity(r, {names[s]: int(x[i, s]) for s in range(S)}, vols[i], params)
                if a <= 0:
                    continue
                y = x[i] + changes[m]
                if np.any(y < 0) or np.any(y > caps):
                    continue
                target = n + int(np.dot(weights[i * S:(i + 1) * S], changes[m]))
                rows.append(n), cols.append(target), vals.append(a)
                out_rate += a
        for s, i, j, rate in jumps:
            a = rate * flat[i * S + s]
            if a <= 0 or flat[j * S + s] + 1 > caps[s]:
                continue
            target = n - weights[i * S + s] + weights[j * S + s]
            rows.append(n), cols.append(int(target)), vals.append(a)
            out_rate += a
        diag[n] = -out_rate
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(n_states, n_states)) + sp.diags(diag)
    return CTMC(Q.tocsr(), states, caps)


def initial_distribution(ctmc: CTMC, model: ModelSpec) -> np.ndarray:
    """Point mass at the model's deterministic initial state (``set`` directives only)."""
    return ctmc.point_mass(initial_state(model))
