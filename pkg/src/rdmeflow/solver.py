"""Exact samplers for the reaction-diffusion master equation.

:func:`run_nsm` is the Next Subvolume Method: one exponential clock per
voxel, held in an indexed binary min-heap, so each event costs O(log K).
:func:`run_direct_ssa` flattens every reaction channel in every voxel and
every diffusion jump into one Gillespie direct-method loop; it shares no
sampling code with the NSM and serves as its oracle.

Both kernels are numba-compiled and draw from a ``numpy.random.Generator``
passed in by the caller, so a seed fully determines a trajectory.
"""
from __future__ import annotations

import math
import time
import weakref
from dataclasses import dataclass

import numba
import numpy as np

from . import expr as _expr
from .errors import BudgetExceededError, ModelError, ModelRuntimeError
from .model import MassAction, ModelSpec, initial_state, rate_value, require_valid
from .rng import make_rng
from .trajectory import Trajectory

KIND_CUSTOM, KIND_ZERO, KIND_UNI, KIND_BI, KIND_DIMER = range(5)

OK, ERR_NEGATIVE_PROPENSITY, ERR_NEGATIVE_COUNT, ERR_BUDGET = range(4)

DEFAULT_MAX_EVENTS = 2_000_000_000
RESYNC_EVERY = 10_000


@dataclass(frozen=True, eq=False)
class CompiledModel:
    """Flat arrays describing a validated model, ready for the kernels."""

    model: ModelSpec
    volumes: np.ndarray
    dptr: np.ndarray
    dcol: np.ndarray
    drate: np.ndarray
    dexit: np.ndarray
    rkind: np.ndarray
    rk: np.ndarray
    rs1: np.ndarray
    rs2: np.ndarray
    nu: np.ndarray
    rmask: np.ndarray
    pstart: np.ndarray
    pend: np.ndarray
    pop: np.ndarray
    parg: np.ndarray
    stack_size: int

    @property
    def num_reactions(self):
        return len(self.rkind)


_compiled_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def compile_model(model: ModelSpec, diffusion=None) -> CompiledModel:
    if diffusion is None:
        cached = _compiled_cache.get(model)
        if cached is not None:
            return cached
    require_valid(model)
    diffusion = model.diffusion if diffusion is None else diffusion
    K, S = model.num_voxels, len(model.species)
    if diffusion.num_voxels != K or len(diffusion.species) != S:
        raise ModelError("diffusion matrix does not match the model")
    idx = model.species_index
    params = model.parameter_values
    M = len(model.reactions)
    rkind = np.zeros(M, np.int64)
    rk = np.zeros(M)
    rs1 = np.zeros(M, np.int64)
    rs2 = np.zeros(M, np.int64)
    nu = np.zeros((M, S), np.int64)
    rmask = np.zeros((M, K), np.uint8)
    pstart = np.zeros(M, np.int64)
    pend = np.zeros(M, np.int64)
    ops, args = [], []
    stack = 1
    for m, r in enumerate(model.reactions):
        for s, n in r.change().items():
            nu[m, idx[s]] = n
        rmask[m] = model.reaction_mask(r)
        pstart[m] = sum(len(o) for o in ops)
        if isinstance(r.propensity, MassAction):
            rk[m] = rate_value(r.propensity.rate, params)
            items = list(r.reactants.items())
            if r.order == 0:
                rkind[m] = KIND_ZERO
            elif r.order == 1:
                rkind[m], rs1[m] = KIND_UNI, idx[items[0][0]]
            elif len(items) == 2:
                rkind[m], rs1[m], rs2[m] = KIND_BI, idx[items[0][0]], idx[items[1][0]]
            else:
                rkind[m], rs1[m] = KIND_DIMER, idx[items[0][0]]
        else:
            rkind[m] = KIND_CUSTOM
            o, a, depth = _expr.compile_rpn(r.propensity.tree, idx, params)
            ops.append(o)
            args.append(a)
            stack = max(stack, depth)
        pend[m] = sum(len(o) for o in ops)
    compiled = CompiledModel(
        model=model,
        volumes=np.ascontiguousarray(model.mesh.volumes, dtype=float),
        dptr=np.ascontiguousarray(diffusion.indptr, dtype=np.int64),
        dcol=np.ascontiguousarray(diffusion.indices, dtype=np.int64),
        drate=np.ascontiguousarray(diffusion.rates, dtype=float),
        dexit=np.ascontiguousarray(diffusion.exit_rates, dtype=float),
        rkind=rkind, rk=rk, rs1=rs1, rs2=rs2, nu=nu, rmask=rmask,
        pstart=pstart, pend=pend,
        pop=np.concatenate(ops) if ops else np.zeros(0, np.int64),
        parg=np.concatenate(args) if args else np.zeros(0),
        stack_size=stack,
    )
    if diffusion is model.diffusion:
        _compiled_cache[model] = compiled
    return compiled


# --------------------------------------------------------------------------
# shared numba helpers
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _eval_rpn(lo, hi, pop, parg, x, i, vol, stack):
    sp = 0
    for p in range(lo, hi):
        op = pop[p]
        if op == 0:
            stack[sp] = parg[p]
            sp += 1
        elif op == 1:
            stack[sp] = float(x[i, int(parg[p])])
            sp += 1
        elif op == 2:
            stack[sp] = vol
            sp += 1
        elif op == 8:
            stack[sp - 1] = -stack[sp - 1]
        elif op == 11:
            stack[sp - 1] = math.exp(stack[sp - 1])
        else:
            a = stack[sp - 2]
            b = stack[sp - 1]
            sp -= 1
            if op == 3:
                r = a + b
            elif op == 4:
                r = a - b
            elif op == 5:
                r = a * b
            elif op == 6:
                r = a / b if b != 0.0 else math.nan
            elif op == 7:
                r = a**b if (a >= 0.0 or b == math.floor(b)) else math.nan
            elif op == 9:
                r = min(a, b)
            else:
                r = max(a, b)
            stack[sp - 1] = r
    return stack[0]


@numba.njit(cache=True)
def _reaction_propensity(m, i, x, vol, rkind, rk, rs1, rs2, pstart, pend, pop, parg, stack):
    kind = rkind[m]
    v = vol[i]
    if kind == 1:
        return rk[m] * v
    if kind == 2:
        return rk[m] * x[i, rs1[m]]
    if kind == 3:
        return rk[m] / v * x[i, rs1[m]] * x[i, rs2[m]]
    if kind == 4:
        xa = x[i, rs1[m]]
        return rk[m] / v * xa * (xa - 1) * 0.5
    return _eval_rpn(pstart[m], pend[m], pop, parg, x, i, v, stack)


# --------------------------------------------------------------------------
# NSM kernel
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _heap_swap(heap, pos, a, b):
    va = heap[a]
    vb = heap[b]
    heap[a] = vb
    heap[b] = va
    pos[vb] = a
    pos[va] = b


@numba.njit(cache=True)
def _less(times, u, v):
    return times[u] < times[v] or (times[u] == times[v] and u < v)


@numba.njit(cache=True)
def _heap_fix(heap, pos, times, i):
    """Restore heap order after ``times[i]`` changed."""
    p = pos[i]
    while p > 0:
        parent = (p - 1) >> 1
        if _less(times, heap[p], heap[parent]):
            _heap_swap(heap, pos, p, parent)
            p = parent
        else:
            break
    _sift_down(heap, pos, times, p)


@numba.njit(cache=True)
def _sift_down(heap, pos, times, p):
    n = heap.shape[0]
    while True:
        left = 2 * p + 1
        if left >= n:
            break
        best = left
        right = left + 1
        if right < n and _less(times, heap[right], heap[left]):
            best = right
        if _less(times, heap[best], heap[p]):
            _heap_swap(heap, pos, p, best)
            p = best
        else:
            break


@numba.njit(cache=True)
def _voxel_rates(i, x, vol, dexit, rkind, rk, rs1, rs2, rmask, pstart, pend, pop, parg, stack, aprop):
    """Refresh reaction propensities of voxel ``i`` in ``aprop``; returns (a_i, d_i, bad reaction)."""
    M = rkind.shape[0]
    S = x.shape[1]
    a = 0.0
    bad = -1
    for m in range(M):
        if rmask[m, i]:
            p = _reaction_propensity(m, i, x, vol, rkind, rk, rs1, rs2, pstart, pend, pop, parg, stack)
            if not (p >= 0.0) or math.isinf(p):
                bad = m
                p = 0.0
        else:
            p = 0.0
        aprop[i, m] = p
        a += p
    d = 0.0
    for s in range(S):
        d += dexit[s, i] * x[i, s]
    return a, d, bad


@numba.njit(cache=True)
def _nsm_kernel(x, vol, dptr, dcol, drate, dexit, rkind, rk, rs1, rs2, nu, rmask,
                pstart, pend, pop, parg, stack_size, tspan, out, rng, max_events, rescale, info):
    K = x.shape[0]
    S = x.shape[1]
    M = rkind.shape[0]
    T = tspan.shape[0]
    stack = np.zeros(stack_size + 1)
    aprop = np.zeros((K, max(M, 1)))
    atot = np.zeros(K)
    dtot = np.zeros(K)
    times = np.empty(K)
    heap = np.arange(K)
    pos = np.arange(K)
    t = tspan[0]

    for i in range(K):
        a, d, bad = _voxel_rates(i, x, vol, dexit, rkind, rk, rs1, rs2, rmask, pstart, pend, pop, parg, stack, aprop)
        if bad >= 0:
            info[0] = i
            info[1] = bad
            info[2] = t
            return ERR_NEGATIVE_PROPENSITY
        atot[i] = a
        dtot[i] = d
        total = a + d
        times[i] = t + rng.exponential() / total if total > 0.0 else math.inf
    for p in range(K // 2 - 1, -1, -1):
        _sift_down(heap, pos, times, p)

    n_react = 0
    n_diff = 0
    since_sync = 0
    drift = 0.0
    out_i = 0
    while True:
        i = heap[0]
        tn = times[i]
        while out_i < T and tspan[out_i] < tn:
            for k in range(K):
                for s in range(S):
                    out[out_i, k, s] = x[k, s]
            out_i += 1
        if out_i >= T:
            break
        if n_react + n_diff >= max_events:
            info[2] = t
            info[3] = n_react
            info[4] = n_diff
            return ERR_BUDGET
        t = tn
        total = atot[i] + dtot[i]
        u = rng.random() * total
        if u < atot[i]:
            # reaction: linear search over the voxel's channels
            m = -1
            acc = 0.0
            for mm in range(M):
                if aprop[i, mm] > 0.0:
                    m = mm
                    acc += aprop[i, mm]
                    if u < acc:
                        break
            for s in range(S):
                if x[i, s] + nu[m, s] < 0:
                    info[0] = i
                    info[1] = m
                    info[2] = t
                    return ERR_NEGATIVE_COUNT
            for s in range(S):
                x[i, s] += nu[m, s]
            n_react += 1
            a, d, bad = _voxel_rates(i, x, vol, dexit, rkind, rk, rs1, rs2, rmask, pstart, pend, pop, parg, stack, aprop)
            if bad >= 0:
                info[0] = i
                info[1] = bad
                info[2] = t
                return ERR_NEGATIVE_PROPENSITY
            atot[i] = a
            dtot[i] = d
        else:
            # diffusion: pick species, then destination
            u -= atot[i]
            sel = -1
            acc = 0.0
            w = 0.0
            found = False
            for s in range(S):
                w = dexit[s, i] * x[i, s]
                if w > 0.0:
                    sel = s
                    if u < acc + w:
                        found = True
                        break
                    acc += w
            s = sel
            if not found:
                acc -= dexit[s, i] * x[i, s]
            r = (u - acc) / x[i, s]
            lo = dptr[s, i]
            hi = dptr[s, i + 1]
            j = dcol[hi - 1]
            acc = 0.0
            for q in range(lo, hi):
                acc += drate[q]
                if r < acc:
                    j = dcol[q]
                    break
            x[i, s] -= 1
            x[j, s] += 1
            n_diff += 1
            a, d, bad = _voxel_rates(i, x, vol, dexit, rkind, rk, rs1, rs2, rmask, pstart, pend, pop, parg, stack, aprop)
            if bad >= 0:
                info[0] = i
                info[1] = bad
                info[2] = t
                return ERR_NEGATIVE_PROPENSITY
            atot[i] = a
            dtot[i] = d
            old = atot[j] + dtot[j]
            a, d, bad = _voxel_rates(j, x, vol, dexit, rkind, rk, rs1, rs2, rmask, pstart, pend, pop, parg, stack, aprop)
            if bad >= 0:
                info[0] = j
                info[1] = bad
                info[2] = t
                return ERR_NEGATIVE_PROPENSITY
            atot[j] = a
            dtot[j] = d
            new = a + d
            if new <= 0.0:
                times[j] = math.inf
            elif rescale and old > 0.0 and times[j] < math.inf:
                times[j] = t + (times[j] - t) * (old / new)
            else:
                times[j] = t + rng.exponential() / new
            _heap_fix(heap, pos, times, j)
        total = atot[i] + dtot[i]
        times[i] = t + rng.exponential() / total if total > 0.0 else math.inf
        _heap_fix(heap, pos, times, i)

        since_sync += 1
        if since_sync >= RESYNC_EVERY:
            since_sync = 0
            scratch = np.zeros((K, max(M, 1)))
            for k in range(K):
                a, d, bad = _voxel_rates(k, x, vol, dexit, rkind, rk, rs1, rs2, rmask, pstart, pend, pop, parg, stack, scratch)
                ref = max(abs(a), abs(d), 1e-300)
                drift = max(drift, abs(a - atot[k]) / ref, abs(d - dtot[k]) / ref)
                atot[k] = a
                dtot[k] = d
                for mm in range(M):
                    aprop[k, mm] = scratch[k, mm]
    info[3] = n_react
    info[4] = n_diff
    info[5] = drift
    info[2] = t
    return OK


# --------------------------------------------------------------------------
# direct-method SSA kernel (oracle)
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _ssa_kernel(x, vol, ch_kind, ch_a, ch_b, ch_c, ch_rate, rkind, rk, rs1, rs2, nu,
                pstart, pend, pop, parg, stack_size, tspan, out, rng, max_events, info):
    # channel kinds: 0 = reaction (a = reaction index, b = voxel)
    #                1 = jump (a = species, b = source, c = destination, rate)
    C = ch_kind.shape[0]
    K = x.shape[0]
    S = x.shape[1]
    T = tspan.shape[0]
    stack = np.zeros(stack_size + 1)
    props = np.zeros(C)
    t = tspan[0]
    out_i = 0
    n_react = 0
    n_diff = 0
    while True:
        total = 0.0
        for c in range(C):
            if ch_kind[c] == 0:
                p = _reaction_propensity(ch_a[c], ch_b[c], x, vol, rkind, rk, rs1, rs2, pstart, pend, pop, parg, stack)
                if not (p >= 0.0) or math.isinf(p):
                    info[0] = ch_b[c]
                    info[1] = ch_a[c]
                    info[2] = t
                    return ERR_NEGATIVE_PROPENSITY
            else:
                p = ch_rate[c] * x[ch_b[c], ch_a[c]]
            props[c] = p
            total += p
        tn = t + rng.exponential() / total if total > 0.0 else math.inf
        while out_i < T and tspan[out_i] < tn:
            for k in range(K):
                for s in range(S):
                    out[out_i, k, s] = x[k, s]
            out_i += 1
        if out_i >= T:
            break
        if n_react + n_diff >= max_events:
            info[2] = t
            return ERR_BUDGET
        t = tn
        u = rng.random() * total
        acc = 0.0
        chosen = -1
        for c in range(C):
            if props[c] > 0.0:
                chosen = c
                acc += props[c]
                if u < acc:
                    break
        c = chosen
        if ch_kind[c] == 0:
            m = ch_a[c]
            i = ch_b[c]
            for s in range(S):
                if x[i, s] + nu[m, s] < 0:
                    info[0] = i
                    info[1] = m
                    info[2] = t
                    return ERR_NEGATIVE_COUNT
            for s in range(S):
                x[i, s] += nu[m, s]
            n_react += 1
        else:
            x[ch_b[c], ch_a[c]] -= 1
            x[ch_c[c], ch_a[c]] += 1
            n_diff += 1
    info[2] = t
    info[3] = n_react
    info[4] = n_diff
    return OK


def _ssa_channels(cm: CompiledModel):
    kind, a, b, c, rate = [], [], [], [], []
    M, K = cm.rmask.shape
    for m in range(M):
        for i in range(K):
            if cm.rmask[m, i]:
                kind.append(0), a.append(m), b.append(i), c.append(-1), rate.append(0.0)
    S = cm.dexit.shape[0]
    for s in range(S):
        for i in range(K):
            for q in range(cm.dptr[s, i], cm.dptr[s, i + 1]):
                if cm.drate[q] > 0:
                    kind.append(1), a.append(s), b.append(i), c.append(int(cm.dcol[q])), rate.append(float(cm.drate[q]))
    return (np.array(kind, np.int64), np.array(a, np.int64), np.array(b, np.int64),
            np.array(c, np.int64), np.array(rate, float))


# --------------------------------------------------------------------------
# public entry points
# --------------------------------------------------------------------------

def _raise_for(status, info, model, seed):
    if status == OK:
        return
    names = [r.name for r in model.reactions]
    voxel, reaction, t = int(info[0]), int(info[1]), float(info[2])
    rname = names[reaction] if 0 <= reaction < len(names) else None
    if status == ERR_NEGATIVE_PROPENSITY:
        raise ModelRuntimeError(f"propensity is negative or not finite (seed {seed})", voxel, rname, t)
    if status == ERR_NEGATIVE_COUNT:
        raise ModelRuntimeError(f"reaction would make a count negative (seed {seed})", voxel, rname, t)
    raise BudgetExceededError(f"event budget exhausted at t={t} (seed {seed})")


def _prepare(model, diffusion, seed):
    cm = model if isinstance(model, CompiledModel) else compile_model(model, diffusion)
    model = cm.model
    rng = make_rng(seed)
    x = initial_state(model, rng)
    tspan = np.ascontiguousarray(model.tspan, dtype=float)
    out = np.zeros((len(tspan), model.num_voxels, len(model.species)), dtype=np.int64)
    return cm, model, rng, x, tspan, out


def run_nsm(model, diffusion=None, seed: int = 0, *, rescale: bool = True,
            max_events: int = DEFAULT_MAX_EVENTS) -> Trajectory:
    """Sample one realization with the Next Subvolume Method.

    ``rescale=False`` redraws the destination voxel's clock after a jump
    instead of rescaling its remaining waiting time.
    """
    start = time.perf_counter()
    cm, model, rng, x, tspan, out = _prepare(model, diffusion, seed)
    info = np.zeros(6)
    status = _nsm_kernel(x, cm.volumes, cm.dptr, cm.dcol, cm.drate, cm.dexit, cm.rkind, cm.rk,
                         cm.rs1, cm.rs2, cm.nu, cm.rmask, cm.pstart, cm.pend, cm.pop, cm.parg,
                         cm.stack_size, tspan, out, rng, max_events, rescale, info)
    _raise_for(status, info, model, seed)
    return Trajectory(tspan, out, model.model_hash, seed, tuple(model.species_names), "nsm",
                      time.perf_counter() - start,
                      {"reaction": int(info[3]), "diffusion": int(info[4]), "resync_drift": float(info[5])})


def run_direct_ssa(model, diffusion=None, seed: int = 0, *, max_events: int = DEFAULT_MAX_EVENTS) -> Trajectory:
    """Sample one realization with the global direct method (oracle for :func:`run_nsm`)."""
    start = time.perf_counter()
    cm, model, rng, x, tspan, out = _prepare(model, diffusion, seed)
    kind, a, b, c, rate = _ssa_channels(cm)
    info = np.zeros(6)
    status = _ssa_kernel(x, cm.volumes, kind, a, b, c, rate, cm.rkind, cm.rk, cm.rs1, cm.rs2, cm.nu,
                         cm.pstart, cm.pend, cm.pop, cm.parg, cm.stack_size, tspan, out, rng, max_events, info)
    _raise_for(status, info, model, seed)
    return Trajectory(tspan, out, model.model_hash, seed, tuple(model.species_names), "ssa",
                      time.perf_counter() - start,
                      {"reaction": int(info[3]), "diffusion": int(info[4])})
