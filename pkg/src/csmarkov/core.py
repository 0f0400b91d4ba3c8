"""Domain types and deterministic operations on categorical Markov dynamics.

The state of a process with memory ``m`` is a composite "Z-state", the tuple
of the ``m + 1`` most recent categories ``(x_t, x_{t-1}, ..., x_{t-m})``.
Z-states are stored flattened with the most recent coordinate varying
fastest::

    index(xi) = sum_j xi[j] * N**j

so ``xi[0]`` (the newest category) is the least significant digit.  Every
table in this package (kernel conditions, embedded matrices, joint initial
states) uses this convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances used by constructors and fixed-point solvers."""

    distribution_sum: float = 1e-9
    kernel_column_sum: float = 1e-9
    steady_state_residual: float = 1e-10
    steady_state_max_iterations: int = 100000
    uniqueness_probe: float = 1e-8
    log_clamp: float = 1e-300


DEFAULT_TOLERANCES = Tolerances()


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def zstate_index(xi, n_categories: int) -> int:
    """Flatten a Z-state tuple (newest category first) to its integer index."""
    idx = 0
    for j, x in enumerate(xi):
        if not 0 <= x < n_categories:
            raise DataError(f"category {x} out of range [0, {n_categories})")
        idx += int(x) * n_categories**j
    return idx


def zstate_tuple(index: int, n_categories: int, memory: int) -> tuple[int, ...]:
    """Inverse of :func:`zstate_index` for a memory-``memory`` Z-state."""
    coords = []
    for _ in range(memory + 1):
        coords.append(index % n_categories)
        index //= n_categories
    return tuple(coords)


@dataclass(frozen=True)
class CategoricalDistribution:
    """Probability vector over a finite set of categories.

    Entries must lie in [0, 1] and sum to one within the configured
    tolerance.  Instances are immutable and safe to share between tasks.
    """

    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=float)
        if arr.ndim != 1 or arr.size < 1:
            raise DataError("probability vector must be one-dimensional and non-empty")
        if np.any(arr < -1e-12) or np.any(arr > 1 + 1e-12):
            raise DataError("probability entries must lie in [0, 1]")
        if abs(arr.sum() - 1.0) > DEFAULT_TOLERANCES.distribution_sum:
            raise DataError(f"probabilities sum to {arr.sum()!r}, not 1")
        object.__setattr__(self, "probs", _frozen_array(np.clip(arr, 0.0, 1.0)))

    @property
    def n_categories(self) -> int:
        return self.probs.size

    def __len__(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class TransitionKernel:
    """Column-stochastic conditional probability table with finite memory.

    ``entries[k, c]`` is the probability of the next category ``k`` given the
    condition Z-state with flattened index ``c`` (see module docstring).  For
    ``memory == 0`` this is the ordinary transition matrix with ``entries[k, l]``
    the probability of moving from category ``l`` to ``k``.
    """

    entries: np.ndarray
    memory: int = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=float)
        if arr.ndim != 2:
            raise DataError("kernel entries must be a 2-d table")
        n = arr.shape[0]
        if n < 1:
            raise DataError("kernel needs at least one category")
        memory = self.memory
        if memory is None:
            memory = 0
            cond = n
            while cond < arr.shape[1]:
                cond *= n
                memory += 1
        if arr.shape[1] != n**(memory + 1):
            raise DataError(
                f"kernel with N={n}, memory={memory} needs {n**(memory + 1)} "
                f"condition columns, got {arr.shape[1]}"
            )
        if np.any(arr < 0) or np.any(arr > 1):
            raise DataError("kernel entries must lie in [0, 1]")
        colsums = arr.sum(axis=0)
        bad = np.abs(colsums - 1.0) > DEFAULT_TOLERANCES.kernel_column_sum
        if np.any(bad):
            raise DataError(
                f"kernel columns {np.nonzero(bad)[0].tolist()} do not sum to 1"
            )
        object.__setattr__(self, "entries", _frozen_array(arr))
        object.__setattr__(self, "memory", int(memory))

    @property
    def n_categories(self) -> int:
        return self.entries.shape[0]

    @property
    def n_conditions(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def identity(cls, n_categories: int) -> "TransitionKernel":
        return cls(np.eye(n_categories), memory=0)

    @classmethod
    def uniform(cls, n_categories: int, memory: int = 0) -> "TransitionKernel":
        shape = (n_categories, n_categories**(memory + 1))
        return cls(np.full(shape, 1.0 / n_categories), memory=memory)

    def condition(self, xi) -> np.ndarray:
        """Next-state distribution for a condition given as tuple or flat index."""
        idx = xi if np.isscalar(xi) else zstate_index(xi, self.n_categories)
        return self.entries[:, int(idx)].copy()


@dataclass(frozen=True)
class EmbeddedKernel:
    """Memoryless representation of a memory kernel on the Z-state space.

    ``matrix[z_new, z_old]`` moves a distribution over Z-states one step.  By
    construction the entry vanishes unless the newest ``memory`` coordinates
    of ``z_old`` equal the oldest ``memory`` coordinates of ``z_new``.
    """

    base: TransitionKernel
    matrix: np.ndarray

    def __post_init__(self):
        z = self.base.n_conditions
        arr = np.asarray(self.matrix, dtype=float)
        if arr.shape != (z, z):
            raise DataError(f"embedded matrix must be {z} x {z}")
        colsums = arr.sum(axis=0)
        if np.any(np.abs(colsums - 1.0) > DEFAULT_TOLERANCES.kernel_column_sum):
            raise DataError("embedded matrix columns must sum to 1")
        object.__setattr__(self, "matrix", _frozen_array(arr))

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_categories(self) -> int:
        return self.base.n_categories


@dataclass(frozen=True)
class CountSeries:
    """Per-time-point category counts; an all-zero row marks a missing survey."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError("counts must be a T x N table")
        if np.any(arr < 0):
            raise DataError("counts must be non-negative")
        if not np.issubdtype(arr.dtype, np.integer):
            rounded = np.rint(np.asarray(arr, dtype=float))
            if np.any(np.abs(arr - rounded) > 0):
                raise DataError("counts must be integers")
            arr = rounded.astype(np.int64)
        object.__setattr__(self, "counts", _frozen_array(arr, dtype=np.int64))

    @property
    def n_categories(self) -> int:
        return self.counts.shape[1]

    @property
    def horizon(self) -> int:
        return self.counts.shape[0]

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def missing(self) -> np.ndarray:
        """Boolean mask of time points with no observations."""
        return self.totals == 0

    @property
    def observed_times(self) -> np.ndarray:
        return np.nonzero(~self.missing)[0]

    def frequencies(self) -> np.ndarray:
        """Empirical distributions per time point (rows of zeros where missing)."""
        totals = self.totals.astype(float)
        safe = np.where(totals > 0, totals, 1.0)
        return self.counts / safe[:, None]


@dataclass(frozen=True)
class Trajectory:
    """One individual's observation record: strictly increasing times, categories."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        states = np.asarray(self.states, dtype=np.int64)
        if times.ndim != 1 or times.shape != states.shape or times.size < 1:
            raise DataError("trajectory needs equal-length, non-empty time/state vectors")
        if np.any(times < 0):
            raise DataError("trajectory times must be non-negative")
        if np.any(np.diff(times) <= 0):
            raise DataError("trajectory times must be strictly increasing")
        object.__setattr__(self, "times", _frozen_array(times, dtype=np.int64))
        object.__setattr__(self, "states", _frozen_array(states, dtype=np.int64))

    def __len__(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class TrajectorySet:
    """Set of independent trajectories over a common category space."""

    n_categories: int
    trajectories: tuple

    def __post_init__(self):
        if self.n_categories < 1:
            raise DataError("n_categories must be positive")
        trajs = tuple(
            t if isinstance(t, Trajectory) else Trajectory(*t)
            for t in self.trajectories
        )
        for i, t in enumerate(trajs):
            if np.any(t.states >= self.n_categories):
                raise DataError(f"trajectory {i} has categories out of range")
        object.__setattr__(self, "trajectories", trajs)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def horizon(self) -> int:
        """One past the latest observed time (0 for an empty set)."""
        if not self.trajectories:
            return 0
        return 1 + max(int(t.times[-1]) for t in self.trajectories)


def dof_formula(n_categories: int, memory: int) -> int:
    z = n_categories**(memory + 1)
    return (z - 1) + z * (n_categories - 1)


@dataclass(frozen=True)
class CsmFit:
    """Fitted model parameters plus the maximised log-likelihood and DOF.

    ``initial`` is a distribution over the ``N**(memory+1)`` Z-states; for a
    memoryless fit it is simply the initial category distribution.
    """

    initial: CategoricalDistribution
    kernel: TransitionKernel
    log_likelihood: float
    dof: int
    penalty_config: object = None

    def __post_init__(self):
        z = self.kernel.n_conditions
        if self.initial.n_categories != z:
            raise DataError(
                f"initial state has {self.initial.n_categories} entries, kernel expects {z}"
            )
        expected = dof_formula(self.kernel.n_categories, self.kernel.memory)
        if self.dof != expected:
            raise DataError(f"dof {self.dof} does not match formula value {expected}")

    @property
    def n_categories(self) -> int:
        return self.kernel.n_categories

    @property
    def memory(self) -> int:
        return self.kernel.memory

    def z_trend(self, horizon: int) -> np.ndarray:
        """Z-state distributions for t = 0, ..., horizon-1 under the fit."""
        step = (
            self.kernel.entries
            if self.kernel.memory == 0
            else embed_memory(self.kernel).matrix
        )
        out = np.empty((horizon, self.initial.n_categories))
        q = self.initial.probs.copy()
        for t in range(horizon):
            out[t] = q
            q = step @ q
        return out

    def trend(self, horizon: int) -> np.ndarray:
        """Category distributions for t = 0, ..., horizon-1 under the fit."""
        zt = self.z_trend(horizon)
        n = self.n_categories
        return zt.reshape(horizon, -1, n).sum(axis=1)


def _check_memoryless(kernel: TransitionKernel, op: str):
    if kernel.memory != 0:
        raise DataError(f"{op} requires a memoryless kernel; embed memory first")


def propagate(
    p0: CategoricalDistribution, kernel: TransitionKernel, t: int
) -> CategoricalDistribution:
    """Advance a distribution ``t`` steps: returns the kernel's t-th power times p0.

    Parameters
    ----------
    p0 : CategoricalDistribution
        Starting distribution; dimension must match the kernel.
    kernel : TransitionKernel
        Memoryless (memory=0) transition table.
    t : int
        Number of steps, >= 0.  ``t=0`` returns ``p0`` unchanged.
    """
    _check_memoryless(kernel, "propagate")
    if p0.n_categories != kernel.n_categories:
        raise DataError("distribution and kernel dimensions differ")
    if t < 0:
        raise DataError("t must be non-negative")
    p = p0.probs.copy()
    for _ in range(int(t)):
        p = kernel.entries @ p
    return CategoricalDistribution(p)


def steady_state(
    kernel, tolerances: Tolerances = DEFAULT_TOLERANCES
) -> CategoricalDistribution:
    """Fixed point of a column-stochastic matrix by power iteration.

    Accepts a memoryless :class:`TransitionKernel` or an
    :class:`EmbeddedKernel`.  Iteration starts from the uniform distribution;
    two further probes started from distinct simplex vertices detect
    non-uniqueness, and period-2 oscillation is reported as non-convergence.

    Raises
    ------
    NumericalError
        If iteration fails to converge (periodic chain) or the probe runs
        disagree (fixed point not unique).
    """
    if isinstance(kernel, EmbeddedKernel):
        matrix = kernel.matrix
    else:
        _check_memoryless(kernel, "steady_state")
        matrix = kernel.entries
    n = matrix.shape[0]

    def _iterate(start: np.ndarray) -> np.ndarray:
        p = start
        prev2 = None
        for _ in range(tolerances.steady_state_max_iterations):
            nxt = matrix @ p
            if np.abs(nxt - p).sum() < tolerances.steady_state_residual:
                return nxt
            if prev2 is not None and np.abs(nxt - prev2).sum() < 1e-14:
                raise NumericalError(
                    "power iteration oscillates; kernel appears periodic"
                )
            prev2 = p
            p = nxt
        raise NumericalError(
            "power iteration did not converge within "
            f"{tolerances.steady_state_max_iterations} iterations"
        )

    fixed = _iterate(np.full(n, 1.0 / n))
    if n > 1:
        e0 = np.zeros(n)
        e0[0] = 1.0
        e1 = np.zeros(n)
        e1[1] = 1.0
        probe_a = _iterate(e0)
        probe_b = _iterate(e1)
        spread = max(
            np.abs(probe_a - probe_b).max(),
            np.abs(probe_a - fixed).max(),
        )
        if spread > tolerances.uniqueness_probe:
            raise NumericalError("fixed point is not unique (reducible kernel)")
    fixed = np.clip(fixed, 0.0, None)
    return CategoricalDistribution(fixed / fixed.sum())


def embed_memory(kernel: TransitionKernel) -> EmbeddedKernel:
    """Lift a memory kernel to its column-stochastic matrix over Z-states.

    The embedded entry for new state ``(k, xi[0], ..., xi[m-1])`` given old
    state ``xi`` equals ``entries[k, xi]``; all other positions are exactly 0.
    """
    if kernel.memory < 1:
        raise DataError("embed_memory requires memory >= 1")
    n = kernel.n_categories
    z = kernel.n_conditions
    matrix = np.zeros((z, z))
    rows, cols = _embedding_indices(n, kernel.memory)
    matrix[rows, cols] = kernel.entries.T.ravel()
    return EmbeddedKernel(base=kernel, matrix=matrix)


def _embedding_indices(n: int, memory: int):
    """(row, col) positions of the structural non-zeros of the embedding.

    Ordered so that position ``i`` corresponds to ``entries.T.ravel()[i]``,
    i.e. condition-major, next-category-minor.
    """
    z = n**(memory + 1)
    old = np.arange(z)
    head = old % n**memory  # newest `memory` coordinates survive
    cols = np.repeat(old, n)
    ks = np.tile(np.arange(n), z)
    rows = ks + np.repeat(head, n) * n
    return rows, cols


def reduce_distribution(q, n_categories: int) -> CategoricalDistribution:
    """Marginalise a Z-state distribution onto its most recent coordinate."""
    arr = q.probs if isinstance(q, CategoricalDistribution) else np.asarray(q, float)
    size = arr.size
    if n_categories < 1:
        raise DataError("n_categories must be positive")
    if n_categories == 1:
        if size != 1:
            raise DataError(f"distribution of size {size} is not a power of N=1")
        return CategoricalDistribution(arr)
    power = n_categories
    while power < size:
        power *= n_categories
    if power != size:
        raise DataError(
            f"distribution of size {size} is not a power of N={n_categories}"
        )
    reduced = arr.reshape(-1, n_categories).sum(axis=0)
    return CategoricalDistribution(reduced)


def category_flow(
    p: CategoricalDistribution, kernel: TransitionKernel, steps: int
) -> np.ndarray:
    """Signed change of each category's share after ``steps`` transitions.

    Returns the vector with components ``sum_l ((pi^steps)_kl - delta_kl) p_l``;
    the entries sum to zero (probability is conserved).
    """
    _check_memoryless(kernel, "category_flow")
    if p.n_categories != kernel.n_categories:
        raise DataError("distribution and kernel dimensions differ")
    if steps < 1:
        raise DataError("steps must be positive")
    power = np.linalg.matrix_power(kernel.entries, int(steps))
    return (power - np.eye(kernel.n_categories)) @ p.probs
