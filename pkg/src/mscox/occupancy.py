"""State occupation probabilities from cumulative transition hazards.

Clock-reset models on tree structures use the sojourn convolution argument
on a uniform grid ``t_k = k * dt``, ``k = 0..K``:

* ``q[i->j](k)``: probability that the sojourn in ``i`` ends in cell
  ``[t_k, t_k+1)`` with a jump to ``j``;
* ``r[i](k) = exp(-Lambda_i(t_k))``: probability the sojourn in ``i``
  outlasts ``t_k``;
* arrival kernels are built down the tree with
  ``Q_n(k) = sum_{l<k} q[m->n](k-l-1) Q_m(l)``, and
  ``p_n(k) = sum_{l<k} r[n](k-l-1) Q_n(l)``.

The sums are evaluated either directly or through the FFT. Clock-forward
models use the Aalen-Johansen product integral, and :func:`sample_paths`
gives a simulation estimate for either time scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import fft as sp_fft
from joblib import Parallel, delayed

from .cumhaz import HazardBundle
from .dataset import TransitionStructure
from .exceptions import (
    ClippingWarning,
    HorizonBeyondData,
    NegativeDiagonal,
    NotTree,
    ValidationError,
)

DEFAULT_K = 10_000
CLIP_TOL = 1e-6
BLOCK_SIZE = 4096


@dataclass
class OccupancyGrid:
    """Occupation probabilities of every state on ``t_k = k * delta_t``.

    ``probs[s - 1, k]`` is the probability of being in state ``s`` at ``t_k``
    having started in `initial_state` at time 0.
    """

    initial_state: int
    delta_t: float
    K: int
    probs: np.ndarray
    structure: TransitionStructure | None = None
    method: str = ""

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.K + 1) * self.delta_t

    @property
    def t_max(self) -> float:
        return self.K * self.delta_t

    def state(self, s: int) -> np.ndarray:
        return self.probs[s - 1]

    def at(self, t) -> np.ndarray:
        """Probabilities (states x len(t)) at the grid points nearest to `t`."""
        k = np.clip(np.rint(np.asarray(t, float) / self.delta_t).astype(int), 0, self.K)
        return self.probs[:, k]

    def to_frame(self) -> pd.DataFrame:
        cols = {"time": self.times}
        for s in range(1, self.probs.shape[0] + 1):
            cols[f"state_{s}"] = self.probs[s - 1]
        return pd.DataFrame(cols)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


@dataclass
class Kernels:
    """Discretized sojourn kernels of a tree-structured clock-reset model."""

    structure: TransitionStructure
    K: int
    delta_t: float
    q: dict
    r: dict
    beyond_data: bool = False
    cumhaz: dict = field(default_factory=dict, repr=False)


def _grid_cumhaz(bundle: HazardBundle, k: int, grid: np.ndarray) -> np.ndarray:
    if bundle.interpolation == "linear":
        return np.interp(grid, bundle.times[k], bundle.cumhaz[k])
    t, h = bundle.times[k], bundle.cumhaz[k]
    jumps = np.diff(h)
    # each jump lands on the first grid point at or after its time
    pos = np.searchsorted(grid, t[1:], side="left")
    keep = pos < grid.size
    return np.cumsum(np.bincount(pos[keep], weights=jumps[keep], minlength=grid.size))


def discretize_kernels(bundle: HazardBundle, K: int = DEFAULT_K, t_max: float | None = None,
                       discretization: str = "exact") -> Kernels:
    """Sojourn kernels ``q`` and survivor sequences ``r`` on a uniform grid.

    Parameters
    ----------
    bundle : HazardBundle
        Clock-reset cumulative hazards on a tree structure.
    K : int
        Number of grid intervals.
    t_max : float
        Grid horizon; defaults to the last knot of the bundle.
    discretization : {"exact", "linear"}
        ``"linear"`` uses ``q[i->j](k) = r[i](k) * dLambda_ij(k)``.
        ``"exact"`` splits the exact exit mass ``r[i](k) - r[i](k+1)`` in
        proportion to ``dLambda_ij(k)``; the two agree to first order in the
        increments, and the exact form makes the state probabilities sum to 1.
    """
    if bundle.scale != "clock_reset":
        raise ValidationError("convolution estimators need clock-reset hazards")
    structure = bundle.structure
    if not structure.is_tree:
        raise NotTree("convolution estimators need a tree-like transition structure")
    if K < 2:
        raise ValidationError("K must be >= 2")
    t_max = bundle.last_time if t_max is None else float(t_max)
    if not t_max > 0:
        raise ValidationError("t_max must be positive")
    if discretization not in ("exact", "linear"):
        raise ValidationError("discretization must be 'exact' or 'linear'")
    beyond = t_max > bundle.last_time
    if beyond:
        warnings.warn(f"t_max={t_max:g} exceeds the last hazard knot "
                      f"{bundle.last_time:g}; hazards held flat", HorizonBeyondData)
    grid = np.arange(K + 1) * (t_max / K)
    lam = {k: _grid_cumhaz(bundle, k, grid) for k in structure.trans_ids}
    q, r = {}, {}
    for s in range(1, structure.n_states + 1):
        out = structure.outbound(s)
        lam_s = sum((lam[k] for k in out), np.zeros(K + 1))
        r[s] = np.exp(-lam_s)
        d_s = np.diff(lam_s)
        exit_mass = r[s][:-1] * -np.expm1(-d_s)
        for k in out:
            d_k = np.diff(lam[k])
            if discretization == "linear":
                q[k] = r[s][:-1] * d_k
            else:
                with np.errstate(invalid="ignore", divide="ignore"):
                    q[k] = np.where(d_s > 0, exit_mass * d_k / d_s, 0.0)
    return Kernels(structure, K, t_max / K, q, r, beyond, lam)


def _shifted(c, n):
    out = np.zeros(n)
    m = min(len(c), n - 1)
    out[1:m + 1] = c[:m]
    return out


def _finish(probs, initial_state, kernels, method):
    lo, hi = probs.min(), probs.max()
    if lo < -CLIP_TOL or hi > 1 + CLIP_TOL:
        warnings.warn(f"occupation probabilities outside [0, 1] by more than {CLIP_TOL:g} "
                      f"before clipping (range [{lo:.3g}, {hi:.3g}])", ClippingWarning)
    return OccupancyGrid(initial_state, kernels.delta_t, kernels.K, np.clip(probs, 0.0, 1.0),
                         kernels.structure, method)


def probtrans_direct(kernels: Kernels, initial_state=None) -> OccupancyGrid:
    """Occupation probabilities by direct evaluation of the convolution sums."""
    structure = kernels.structure
    K = kernels.K
    start = structure.roots[0] if initial_state is None else structure.state_number(initial_state)
    probs = np.zeros((structure.n_states, K + 1))
    probs[start - 1] = kernels.r[start]
    arrival = {}
    for n in structure.reachable(start)[1:]:
        (k_in,) = structure.inbound(n)
        parent = structure.from_state(k_in)
        if parent == start:
            arrival[n] = kernels.q[k_in]
        else:
            arrival[n] = _shifted(np.convolve(kernels.q[k_in], arrival[parent])[:K], K)
        probs[n - 1] = _shifted(np.convolve(kernels.r[n], arrival[n])[:K + 1], K + 1)
    return _finish(probs, start, kernels, "direct")


def probtrans_fft(kernels: Kernels, initial_state=None) -> OccupancyGrid:
    """Occupation probabilities through the convolution theorem.

    Each convolution is a pointwise product of zero-padded real FFTs (padded
    to a fast length of at least ``2K + 2``, so circular and linear
    convolution agree on the first ``K + 1`` terms). The spectrum of each
    state's arrival kernel is memoized, so shared path prefixes are
    transformed once.
    """
    structure = kernels.structure
    K = kernels.K
    size = sp_fft.next_fast_len(2 * K + 2, real=True)
    start = structure.roots[0] if initial_state is None else structure.state_number(initial_state)
    probs = np.zeros((structure.n_states, K + 1))
    probs[start - 1] = kernels.r[start]
    spectrum = {}
    for n in structure.reachable(start)[1:]:
        (k_in,) = structure.inbound(n)
        parent = structure.from_state(k_in)
        if parent == start:
            arrival = kernels.q[k_in]
        else:
            conv = sp_fft.irfft(sp_fft.rfft(kernels.q[k_in], size) * spectrum[parent], size)
            arrival = _shifted(conv[:K], K)
        spectrum[n] = sp_fft.rfft(arrival, size)
        conv = sp_fft.irfft(sp_fft.rfft(kernels.r[n], size) * spectrum[n], size)
        probs[n - 1] = _shifted(conv[:K + 1], K + 1)
    return _finish(probs, start, kernels, "fft")


def aalen_johansen(bundle: HazardBundle, initial_state=None):
    """Product integral ``prod (I + dA(u))`` over the jump times of a clock-forward bundle.

    Returns ``(times, probs)``: ``times`` starts with 0 and ``probs[m]`` is the
    state distribution just after ``times[m]``.
    """
    if bundle.scale != "clock_forward":
        raise ValidationError("Aalen-Johansen needs clock-forward hazards")
    if bundle.interpolation != "step":
        raise ValidationError("Aalen-Johansen needs step cumulative hazards")
    structure = bundle.structure
    if not structure.is_acyclic:
        raise ValidationError("transition structure must be acyclic")
    start = structure.roots[0] if initial_state is None else structure.state_number(initial_state)
    S = structure.n_states
    all_t = np.unique(np.concatenate([bundle.times[k][1:] for k in structure.trans_ids]))
    dA = np.zeros((all_t.size, S, S))
    for k in structure.trans_ids:
        a, b = structure.transitions[k - 1]
        t, h = bundle.times[k], bundle.cumhaz[k]
        pos = np.searchsorted(all_t, t[1:])
        dA[pos, a - 1, b - 1] += np.diff(h)
    out_sum = dA.sum(axis=2)
    diag = 1.0 - out_sum
    if np.any(diag < -1e-12):
        m, s = np.argwhere(diag < -1e-12)[0]
        raise NegativeDiagonal(f"total hazard increment {out_sum[m, s]:.4g} > 1 in state "
                               f"{s + 1} at t={all_t[m]:g}")
    p = np.zeros(S)
    p[start - 1] = 1.0
    probs = np.empty((all_t.size + 1, S))
    probs[0] = p
    for m in range(all_t.size):
        move = p[:, None] * dA[m]
        p = p - move.sum(axis=1) + move.sum(axis=0)
        probs[m + 1] = p
    return np.r_[0.0, all_t], probs


def probtrans_aj(bundle: HazardBundle, initial_state=None, K: int = DEFAULT_K,
                 t_max: float | None = None) -> OccupancyGrid:
    """Aalen-Johansen occupation probabilities resampled onto a uniform grid."""
    times, probs = aalen_johansen(bundle, initial_state)
    t_max = bundle.last_time if t_max is None else float(t_max)
    grid = np.arange(K + 1) * (t_max / K)
    idx = np.searchsorted(times, grid, side="right") - 1
    start = bundle.structure.roots[0] if initial_state is None else \
        bundle.structure.state_number(initial_state)
    return OccupancyGrid(start, t_max / K, K, probs[idx].T.copy(), bundle.structure, "aj")


# ---------------------------------------------------------------------------
# Simulation estimator
# ---------------------------------------------------------------------------

def _invert(bundle: HazardBundle, k: int, target: np.ndarray) -> np.ndarray:
    """Smallest time at which the cumulative hazard of `k` reaches `target`."""
    t, h = bundle.times[k], bundle.cumhaz[k]
    idx = np.searchsorted(h, target, side="left")
    out = np.full(target.shape, np.inf)
    ok = idx < h.size
    if bundle.interpolation == "step":
        out[ok] = t[idx[ok]]
    else:
        i = idx[ok]
        i0 = np.maximum(i - 1, 0)
        span = h[i] - h[i0]
        frac = np.divide(target[ok] - h[i0], span, out=np.zeros_like(span), where=span > 0)
        out[ok] = t[i0] + frac * (t[i] - t[i0])
    return out


def _simulate_block(bundle, start, n, seed, block, grid):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))
    structure = bundle.structure
    S = structure.n_states
    counts = np.zeros((S, grid.size + 1), dtype=np.int64)
    state = np.full(n, start)
    now = np.zeros(n)
    active = np.ones(n, dtype=bool)
    forward = bundle.scale == "clock_forward"
    while active.any():
        for s in range(1, S + 1):
            sel = np.flatnonzero(active & (state == s))
            if sel.size == 0:
                continue
            t0 = now[sel]
            out = structure.outbound(s)
            best = np.full(sel.size, np.inf)
            dest = np.full(sel.size, s)
            for k in out:
                e = rng.standard_exponential(sel.size)
                if forward:
                    cand = _invert(bundle, k, bundle.evaluate(k, t0) + e)
                else:
                    cand = t0 + _invert(bundle, k, e)
                win = cand < best
                best[win] = cand[win]
                dest[win] = structure.to_state(k)
            lo = np.searchsorted(grid, t0, side="left")
            hi = np.searchsorted(grid, best, side="left")
            np.add.at(counts[s - 1], lo, 1)
            np.add.at(counts[s - 1], hi, -1)
            moved = np.isfinite(best)
            now[sel] = best
            state[sel] = dest
            active[sel[~moved]] = False
    return counts


def sample_paths(bundle: HazardBundle, n_paths: int, initial_state=None, seed: int = 0,
                 K: int = DEFAULT_K, t_max: float | None = None, n_jobs: int = 1,
                 block_size: int = BLOCK_SIZE) -> OccupancyGrid:
    """Occupation probabilities estimated from simulated trajectories.

    Competing sojourns are drawn by inverting each cumulative hazard at an
    Exp(1) variate and the earliest wins. Paths are simulated in blocks of
    `block_size`, block ``b`` using a Philox stream keyed by ``(seed, b)``;
    the result depends on the seed and block size but not on `n_jobs`.
    """
    structure = bundle.structure
    if not structure.is_acyclic:
        raise ValidationError("transition structure must be acyclic")
    start = structure.roots[0] if initial_state is None else structure.state_number(initial_state)
    t_max = bundle.last_time if t_max is None else float(t_max)
    grid = np.arange(K + 1) * (t_max / K)
    sizes = [block_size] * (n_paths // block_size)
    if n_paths % block_size:
        sizes.append(n_paths % block_size)
    if n_jobs == 1:
        parts = [_simulate_block(bundle, start, m, seed, b, grid) for b, m in enumerate(sizes)]
    else:
        parts = Parallel(n_jobs=n_jobs)(delayed(_simulate_block)(bundle, start, m, seed, b, grid)
                                        for b, m in enumerate(sizes))
    counts = np.sum(parts, axis=0)
    probs = np.cumsum(counts, axis=1)[:, :K + 1] / n_paths
    return OccupancyGrid(start, t_max / K, K, probs, structure, "sample")
