"""Log-likelihoods, regularisation penalties and Kullback-Leibler divergence.

All functions are pure.  Logarithm arguments are clamped below at
``Tolerances.log_clamp`` so that a positive count on a vanishing model
probability contributes a large negative value instead of ``-inf``; terms
with zero empirical weight contribute exactly 0 (the ``0 * ln 0 = 0``
convention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DEFAULT_TOLERANCES,
    CategoricalDistribution,
    CountSeries,
    Trajectory,
    TrajectorySet,
    TransitionKernel,
    embed_memory,
    zstate_tuple,
)
from .errors import DataError, ImpossibleObservationError

_CLAMP = DEFAULT_TOLERANCES.log_clamp

PENALTY_KINDS = ("none", "ridge_to_target", "structured_jump")


@dataclass(frozen=True)
class PenaltyConfig:
    """Regularisation settings for kernel estimation.

    ``ridge_to_target`` penalises squared deviation of every kernel entry
    from ``lambda2`` times the stay-in-place indicator; ``structured_jump``
    penalises squared entries that move more than ``jump_threshold``
    categories in one step (ordered categories, memoryless kernels only).
    """

    kind: str = "none"
    lambda1: float = 0.0
    lambda2: float = 0.0
    jump_threshold: int = 1

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise DataError(f"unknown penalty kind {self.kind!r}; use one of {PENALTY_KINDS}")
        if self.lambda1 < 0:
            raise DataError("lambda1 must be non-negative")
        if not 0.0 <= self.lambda2 <= 1.0:
            raise DataError("lambda2 must lie in [0, 1]")
        if self.jump_threshold < 1:
            raise DataError("jump_threshold must be a positive integer")


NO_PENALTY = PenaltyConfig()


@dataclass(frozen=True)
class SigmaSet:
    """Admissible Z-states per time point for one (possibly gapped) trajectory.

    ``sets[i]`` lists, as tuples with the newest category first, every
    Z-state at time ``start + i`` that does not contradict the observations.
    """

    start: int
    sets: tuple

    def __len__(self) -> int:
        return len(self.sets)

    def at(self, t: int):
        return self.sets[t - self.start]


def _probs(p) -> np.ndarray:
    return p.probs if isinstance(p, CategoricalDistribution) else np.asarray(p, float)


def _clamped_log(values: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(values, _CLAMP))


def _step_matrix(kernel: TransitionKernel) -> np.ndarray:
    if kernel.memory == 0:
        return kernel.entries
    return embed_memory(kernel).matrix


def cs_log_likelihood(
    counts: CountSeries, initial, kernel: TransitionKernel
) -> float:
    """Log-likelihood of repeated cross-sectional counts under the model.

    Equals ``sum_t sum_k n_kt ln p_kt`` where the model trend ``p_t`` is the
    initial distribution propagated ``t`` steps (and marginalised onto the
    newest coordinate for memory kernels).  Missing time points contribute 0.
    """
    q = _probs(initial)
    if counts.n_categories != kernel.n_categories:
        raise DataError("counts and kernel dimensions differ")
    if q.size != kernel.n_conditions:
        raise DataError("initial state dimension does not match the kernel")
    step = _step_matrix(kernel)
    n = kernel.n_categories
    total = 0.0
    q = q.copy()
    for t in range(counts.horizon):
        row = counts.counts[t]
        if row.sum() > 0:
            p_t = q.reshape(-1, n).sum(axis=0)
            mask = row > 0
            total += float(row[mask] @ _clamped_log(p_t[mask]))
        if t + 1 < counts.horizon:
            q = step @ q
    return total


def trajectory_likelihood(
    traj: Trajectory, p0, kernel: TransitionKernel
) -> float:
    """Probability of one observed trajectory under a memoryless model.

    Gaps are bridged by matrix powers of the kernel.
    """
    if kernel.memory != 0:
        raise DataError("trajectory_likelihood requires memory 0; see memory_trajectory_likelihood")
    p0 = _probs(p0)
    if p0.size != kernel.n_categories:
        raise DataError("distribution and kernel dimensions differ")
    start = propagate_vector(p0, kernel.entries, int(traj.times[0]))
    value = float(start[traj.states[0]])
    powers = {}
    for s in range(1, len(traj)):
        gap = int(traj.times[s] - traj.times[s - 1])
        if gap not in powers:
            powers[gap] = np.linalg.matrix_power(kernel.entries, gap)
        value *= float(powers[gap][traj.states[s], traj.states[s - 1]])
    return value


def propagate_vector(p: np.ndarray, matrix: np.ndarray, t: int) -> np.ndarray:
    """Apply ``matrix`` to ``p`` ``t`` times (plain repeated multiplication)."""
    out = p
    for _ in range(t):
        out = matrix @ out
    return out


def long_log_likelihood(theta: TrajectorySet, initial, kernel: TransitionKernel) -> float:
    """Summed log-likelihood of a trajectory set (any memory order).

    Raises
    ------
    ImpossibleObservationError
        If some trajectory has probability exactly zero, e.g. because it
        crosses a structurally zero kernel entry.
    """
    total = 0.0
    for i, traj in enumerate(theta):
        if kernel.memory == 0:
            value = trajectory_likelihood(traj, initial, kernel)
        else:
            value = memory_trajectory_likelihood(traj, initial, kernel)
        if value == 0.0:
            raise ImpossibleObservationError(
                f"trajectory {i} is impossible under the model (likelihood 0)",
                trajectory_index=i,
            )
        total += float(np.log(max(value, _CLAMP)))
    return total


def sigma_sets(traj: Trajectory, memory: int, n_categories: int) -> SigmaSet:
    """Admissible Z-state sets for every time point spanned by a trajectory.

    A Z-state at time ``t`` is admissible when each coordinate matches the
    observed category at its time, or that time was not observed (including
    all times before the trajectory starts).
    """
    if memory < 1:
        raise DataError("sigma_sets requires memory >= 1")
    masks, start = _sigma_masks(traj, memory, n_categories)
    sets = []
    for row in masks:
        sets.append(
            tuple(
                zstate_tuple(z, n_categories, memory)
                for z in np.nonzero(row)[0]
            )
        )
    return SigmaSet(start=start, sets=tuple(sets))


def _sigma_masks(traj: Trajectory, memory: int, n_categories: int):
    """Boolean admissibility table of shape (span, N**(memory+1))."""
    start = int(traj.times[0])
    end = int(traj.times[-1])
    span = end - start + 1
    z = n_categories**(memory + 1)
    digits = np.empty((memory + 1, z), dtype=np.int64)
    idx = np.arange(z)
    for j in range(memory + 1):
        digits[j] = idx % n_categories
        idx = idx // n_categories
    observed = dict(zip(traj.times.tolist(), traj.states.tolist()))
    masks = np.ones((span, z), dtype=bool)
    for offset in range(span):
        t = start + offset
        for j in range(memory + 1):
            k = observed.get(t - j)
            if k is not None:
                masks[offset] &= digits[j] == k
    return masks, start


def memory_trajectory_likelihood(
    traj: Trajectory, initial, kernel: TransitionKernel
) -> float:
    """Probability of one trajectory under a memory model.

    Sums, over every Z-state path compatible with the observations, the
    product of embedded-kernel entries weighted by the initial Z-state
    distribution (propagated to the trajectory's first time point).
    """
    if kernel.memory < 1:
        raise DataError("memory_trajectory_likelihood requires memory >= 1")
    q0 = _probs(initial)
    if q0.size != kernel.n_conditions:
        raise DataError("initial state dimension does not match the kernel")
    zeta = embed_memory(kernel).matrix
    masks, start = _sigma_masks(traj, kernel.memory, kernel.n_categories)
    v = propagate_vector(q0, zeta, start) * masks[0]
    for offset in range(1, masks.shape[0]):
        v = (zeta @ v) * masks[offset]
    return float(v.sum())


def anonymised_log_likelihood(
    counts: CountSeries, p0, kernel: TransitionKernel
) -> float:
    """Log-likelihood for a cohort observed as per-period category counts.

    The first period is scored against ``p0``; each later period against the
    kernel applied to the previous period's *observed* distribution.
    Requires a gap-free series with the same cohort size at every period.
    """
    if kernel.memory != 0:
        raise DataError("anonymised data require a memoryless kernel")
    p0 = _probs(p0)
    if counts.n_categories != kernel.n_categories or p0.size != kernel.n_categories:
        raise DataError("counts, distribution and kernel dimensions differ")
    totals = counts.totals
    if np.any(totals == 0):
        missing = np.nonzero(totals == 0)[0].tolist()
        raise DataError(f"anonymised series has missing time points {missing}")
    if np.any(totals != totals[0]):
        raise DataError("anonymised series must have the same cohort size at every time")
    freq = counts.frequencies()
    total = _weighted_log_term(counts.counts[0], p0)
    for t in range(1, counts.horizon):
        predicted = kernel.entries @ freq[t - 1]
        total += _weighted_log_term(counts.counts[t], predicted)
    return total


def _weighted_log_term(weights: np.ndarray, probs: np.ndarray) -> float:
    mask = weights > 0
    if not np.any(mask):
        return 0.0
    return float(weights[mask] @ _clamped_log(probs[mask]))


def penalty(kernel: TransitionKernel, config: PenaltyConfig) -> float:
    """Regularisation penalty of a kernel under the given configuration."""
    if config.kind == "none":
        return 0.0
    entries = kernel.entries
    if config.kind == "ridge_to_target":
        target = config.lambda2 * _stay_indicator(kernel)
        return float(config.lambda1 * np.sum((entries - target) ** 2))
    if kernel.memory != 0:
        raise DataError("structured_jump penalty supports memoryless kernels only")
    mask = _jump_mask(kernel.n_categories, config.jump_threshold)
    return float(config.lambda1 * np.sum((entries * mask) ** 2))


def _stay_indicator(kernel: TransitionKernel) -> np.ndarray:
    """Indicator of staying in place: next category equals the newest condition coordinate."""
    return _stay_indicator_arrays(kernel.n_categories, kernel.memory)


def _stay_indicator_arrays(n: int, memory: int) -> np.ndarray:
    newest = np.arange(n**(memory + 1)) % n
    return (np.arange(n)[:, None] == newest[None, :]).astype(float)


def _jump_mask(n: int, threshold: int) -> np.ndarray:
    k = np.arange(n)
    return (np.abs(k[:, None] - k[None, :]) > threshold).astype(float)


def kl_divergence(p_obs, p_model) -> float:
    """Kullback-Leibler divergence of the observed from the model distribution.

    Uses the ``0 * ln(0/x) = 0`` convention; the model probability is clamped
    below so the result stays finite.
    """
    obs = _probs(p_obs)
    model = _probs(p_model)
    if obs.shape != model.shape:
        raise DataError("distributions must have equal dimensions")
    mask = obs > 0
    value = float(obs[mask] @ (np.log(obs[mask]) - _clamped_log(model[mask])))
    return max(value, 0.0)
