"""Internal machinery for the fitting engine: unconstrained parameterisation
and log-likelihood terms with hand-derived reverse-mode gradients.

Parameters live in an unconstrained space: one softmax block for the initial
Z-state distribution and one per kernel condition column, each with its last
logit pinned to zero.  Gradients are propagated through the propagation
recursions by adjoint (reverse) accumulation, so a value-and-gradient
evaluation costs a small constant times the value alone.
"""

from __future__ import annotations

import numpy as np

from .core import DEFAULT_TOLERANCES, _embedding_indices
from .likelihood import PenaltyConfig, _jump_mask, _sigma_masks, _stay_indicator_arrays

_CLAMP = DEFAULT_TOLERANCES.log_clamp
_PACK_SMOOTH = 1e-12


class SimplexParameterisation:
    """Bijection between probability blocks and a flat unconstrained vector."""

    def __init__(self, n_categories: int, memory: int):
        self.n = n_categories
        self.z = n_categories**(memory + 1)
        self.memory = memory
        self.n_free = (self.z - 1) + self.z * (self.n - 1)

    @staticmethod
    def _softmax_rows(logits: np.ndarray) -> np.ndarray:
        padded = np.concatenate([logits, np.zeros((logits.shape[0], 1))], axis=1)
        padded -= padded.max(axis=1, keepdims=True)
        e = np.exp(padded)
        return e / e.sum(axis=1, keepdims=True)

    def unpack(self, x: np.ndarray):
        """Return (initial distribution, kernel table) for a parameter vector."""
        q0 = self._softmax_rows(x[: self.z - 1][None, :])[0]
        cols = self._softmax_rows(x[self.z - 1 :].reshape(self.z, self.n - 1))
        return q0, cols.T.copy()

    def pack(self, q0: np.ndarray, pi: np.ndarray) -> np.ndarray:
        """Logits reproducing the given (smoothed) probabilities."""

        def block(p):
            p = np.asarray(p, float) + _PACK_SMOOTH
            p = p / p.sum()
            return np.log(p[:-1]) - np.log(p[-1])

        parts = [block(q0)]
        parts.extend(block(pi[:, c]) for c in range(self.z))
        return np.concatenate(parts)

    def chain(self, q0, pi, dq0, dpi) -> np.ndarray:
        """Map gradients in probability space to the unconstrained vector."""
        out = np.empty(self.n_free)
        inner = float(dq0 @ q0)
        out[: self.z - 1] = q0[:-1] * (dq0[:-1] - inner)
        cols = pi.T
        g = dpi.T
        inner_cols = np.sum(g * cols, axis=1, keepdims=True)
        out[self.z - 1 :] = (cols[:, :-1] * (g[:, :-1] - inner_cols)).ravel()
        return out


def build_step_matrix(pi: np.ndarray, n: int, memory: int) -> np.ndarray:
    """Dense one-step matrix on Z-states (the kernel itself when memory is 0)."""
    if memory == 0:
        return pi
    z = pi.shape[1]
    zeta = np.zeros((z, z))
    rows, cols = _embedding_indices(n, memory)
    zeta[rows, cols] = pi.T.ravel()
    return zeta


def step_grad_to_pi(dzeta: np.ndarray, n: int, memory: int) -> np.ndarray:
    """Collect the gradient on structural positions of the embedding back onto the kernel."""
    if memory == 0:
        return dzeta
    rows, cols = _embedding_indices(n, memory)
    return dzeta[rows, cols].reshape(-1, n).T.copy()


def _safe_ratio(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """weights / values where a positive weight meets an unclamped value, else 0."""
    out = np.zeros_like(values, dtype=float)
    mask = (weights > 0) & (values > _CLAMP)
    out[mask] = weights[mask] / values[mask]
    return out


def _clamped_log(values: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(values, _CLAMP))


class CsTerm:
    """Cross-sectional log-likelihood with adjoint gradients."""

    def __init__(self, counts, n: int, memory: int):
        self.weights = np.asarray(counts.counts, dtype=float)
        observed = np.nonzero(self.weights.sum(axis=1) > 0)[0]
        self.horizon = int(observed[-1]) + 1 if observed.size else 0
        self.n = n
        self.z = n**(memory + 1)

    def value_and_grad(self, q0, pi, zeta):
        n, z, T = self.n, self.z, self.horizon
        dstep = np.zeros((z, z))
        if T == 0:
            return 0.0, np.zeros(z), dstep, 0
        qs = np.empty((T, z))
        qs[0] = q0
        for t in range(1, T):
            qs[t] = zeta @ qs[t - 1]
        value = 0.0
        rs = np.empty((T, n))
        for t in range(T):
            p_t = qs[t].reshape(-1, n).sum(axis=0)
            w = self.weights[t]
            mask = w > 0
            if np.any(mask):
                value += float(w[mask] @ _clamped_log(p_t[mask]))
            rs[t] = _safe_ratio(w, p_t)
        reps = z // n
        a = np.tile(rs[T - 1], reps)
        for t in range(T - 2, -1, -1):
            dstep += np.outer(a, qs[t])
            a = np.tile(rs[t], reps) + zeta.T @ a
        return value, a, dstep, T


class AnonymisedTerm:
    """Anonymised-cohort log-likelihood (memoryless only)."""

    def __init__(self, counts):
        self.weights = np.asarray(counts.counts, dtype=float)
        totals = self.weights.sum(axis=1)
        self.freq = self.weights / np.where(totals > 0, totals, 1.0)[:, None]

    def value_and_grad(self, p0, pi):
        w0 = self.weights[0]
        value = float(w0[w0 > 0] @ _clamped_log(p0[w0 > 0]))
        dp0 = _safe_ratio(w0, p0)
        dpi = np.zeros_like(pi)
        for t in range(1, self.weights.shape[0]):
            predicted = pi @ self.freq[t - 1]
            w = self.weights[t]
            mask = w > 0
            value += float(w[mask] @ _clamped_log(predicted[mask]))
            r = _safe_ratio(w, predicted)
            dpi += np.outer(r, self.freq[t - 1])
        return value, dp0, dpi


class LongitudinalTerm:
    """Trajectory-set log-likelihood, compressed into sufficient statistics.

    Memoryless kernels reduce to weighted initial-state and gap-grouped
    transition terms.  Memory kernels split gap-free trajectories into a
    short "head" segment (summed over unobserved pre-history) plus sliding
    (memory+2)-windows counted once; anything with gaps or a late start runs
    through a masked forward/backward pass on the Z-state space.
    """

    def __init__(self, theta, n: int, memory: int):
        self.n = n
        self.memory = memory
        self.z = n**(memory + 1)
        unique = {}
        for traj in theta:
            key = (traj.times.tobytes(), traj.states.tobytes())
            if key in unique:
                unique[key][1] += 1.0
            else:
                unique[key] = [traj, 1.0]
        if memory == 0:
            self._build_memoryless(unique.values())
        else:
            self._build_memory(unique.values())

    # -- memoryless sufficient statistics ---------------------------------
    def _build_memoryless(self, groups):
        n = self.n
        init = {}
        trans = {}
        for traj, w in groups:
            t0 = int(traj.times[0])
            vec = init.setdefault(t0, np.zeros(n))
            vec[traj.states[0]] += w
            gaps = np.diff(traj.times)
            for s in range(1, len(traj)):
                mat = trans.setdefault(int(gaps[s - 1]), np.zeros((n, n)))
                mat[traj.states[s], traj.states[s - 1]] += w
        self.init_groups = sorted(init.items())
        self.trans_groups = sorted(trans.items())
        self.generic = []
        self.window_counts = None

    # -- memory sufficient statistics --------------------------------------
    def _build_memory(self, groups):
        n, m = self.n, self.memory
        powvec = n ** np.arange(m + 1)
        window_counts = np.zeros((n, self.z))
        heads = {}
        generic = []
        for traj, w in groups:
            contiguous = int(traj.times[0]) == 0 and bool(
                np.all(np.diff(traj.times) == 1)
            )
            if contiguous and len(traj) >= m + 1:
                states = np.asarray(traj.states)
                heads_key = tuple(states[: m + 1].tolist())
                heads[heads_key] = heads.get(heads_key, 0.0) + w
                if len(traj) >= m + 2:
                    windows = np.lib.stride_tricks.sliding_window_view(states, m + 2)
                    conds = windows[:, m::-1] @ powvec
                    np.add.at(window_counts, (windows[:, m + 1], conds), w)
            else:
                generic.append((traj, w))
        from .core import Trajectory

        times = np.arange(m + 1)
        for head, w in sorted(heads.items()):
            generic.append((Trajectory(times, np.array(head)), w))
        self.window_counts = window_counts if window_counts.sum() else None
        self.generic = [
            (_sigma_masks(traj, m, n)[0], int(traj.times[0]), w)
            for traj, w in generic
        ]
        self.init_groups = []
        self.trans_groups = []

    # -- evaluation ---------------------------------------------------------
    def value_and_grad(self, q0, pi, zeta):
        if self.memory == 0:
            return self._memoryless_value_and_grad(q0, pi)
        return self._memory_value_and_grad(q0, pi, zeta)

    def _memoryless_value_and_grad(self, p0, pi):
        n = self.n
        value = 0.0
        dp0 = np.zeros(n)
        dpi = np.zeros_like(pi)
        max_power = 0
        for t0, _ in self.init_groups:
            max_power = max(max_power, t0)
        for gap, _ in self.trans_groups:
            max_power = max(max_power, gap)
        powers = [np.eye(n)]
        for _ in range(max_power):
            powers.append(pi @ powers[-1])
        for t0, weights in self.init_groups:
            e = powers[t0] @ p0
            mask = weights > 0
            value += float(weights[mask] @ _clamped_log(e[mask]))
            r = _safe_ratio(weights, e)
            if t0 == 0:
                dp0 += r
            else:
                dp0 += powers[t0].T @ r
                for j in range(t0):
                    dpi += np.outer(powers[j].T @ r, powers[t0 - 1 - j] @ p0)
        for gap, wmat in self.trans_groups:
            mat = powers[gap]
            mask = wmat > 0
            value += float(np.sum(wmat[mask] * _clamped_log(mat[mask])))
            g = _safe_ratio(wmat, mat)
            if gap == 1:
                dpi += g
            else:
                for j in range(gap):
                    dpi += powers[j].T @ g @ powers[gap - 1 - j].T
        return value, dp0, dpi, None

    def _memory_value_and_grad(self, q0, pi, zeta):
        z = self.z
        value = 0.0
        dzeta = np.zeros((z, z))
        dq0 = np.zeros(z)
        if self.window_counts is not None:
            c = self.window_counts
            mask = c > 0
            value += float(np.sum(c[mask] * _clamped_log(pi[mask])))
            dpi_windows = _safe_ratio(c, pi)
        else:
            dpi_windows = np.zeros_like(pi)
        max_t0 = max((t0 for _, t0, _ in self.generic), default=0)
        q_chain = np.empty((max_t0 + 1, z))
        q_chain[0] = q0
        for t in range(1, max_t0 + 1):
            q_chain[t] = zeta @ q_chain[t - 1]
        dq_chain = np.zeros((max_t0 + 1, z))
        for masks, t0, w in self.generic:
            steps = masks.shape[0]
            vs = np.empty((steps, z))
            vs[0] = q_chain[t0] * masks[0]
            for t in range(1, steps):
                vs[t] = (zeta @ vs[t - 1]) * masks[t]
            prob = float(vs[-1].sum())
            value += w * float(np.log(max(prob, _CLAMP)))
            if prob <= _CLAMP:
                continue
            g = np.full(z, w / prob)
            for t in range(steps - 1, 0, -1):
                u = masks[t] * g
                dzeta += np.outer(u, vs[t - 1])
                g = zeta.T @ u
            dq_chain[t0] += masks[0] * g
        for t in range(max_t0, 0, -1):
            dzeta += np.outer(dq_chain[t], q_chain[t - 1])
            dq_chain[t - 1] += zeta.T @ dq_chain[t]
        dq0 += dq_chain[0]
        dpi = step_grad_to_pi(dzeta, self.n, self.memory) + dpi_windows
        return value, dq0, dpi, None


class PenaltyTerm:
    """Quadratic penalty and its kernel gradient."""

    def __init__(self, config: PenaltyConfig, n: int, memory: int):
        self.config = config
        if config.kind == "ridge_to_target":
            self.target = config.lambda2 * _stay_indicator_arrays(n, memory)
        elif config.kind == "structured_jump":
            self.mask = _jump_mask(n, config.jump_threshold)

    def value_and_grad(self, pi):
        cfg = self.config
        if cfg.kind == "none" or cfg.lambda1 == 0.0:
            return 0.0, np.zeros_like(pi)
        if cfg.kind == "ridge_to_target":
            diff = pi - self.target
            return float(cfg.lambda1 * np.sum(diff**2)), 2.0 * cfg.lambda1 * diff
        masked = pi * self.mask
        return float(cfg.lambda1 * np.sum(masked**2)), 2.0 * cfg.lambda1 * masked


class CompositeObjective:
    """Penalised log-likelihood over the unconstrained parameter vector."""

    def __init__(
        self,
        n: int,
        memory: int,
        cs_term: CsTerm | None = None,
        long_term: LongitudinalTerm | None = None,
        anon_term: AnonymisedTerm | None = None,
        penalty_term: PenaltyTerm | None = None,
    ):
        self.param = SimplexParameterisation(n, memory)
        self.n = n
        self.memory = memory
        self.cs_term = cs_term
        self.long_term = long_term
        self.anon_term = anon_term
        self.penalty_term = penalty_term

    def _needs_step(self) -> bool:
        return self.cs_term is not None or (
            self.long_term is not None and self.memory > 0
        )

    def value_and_grad_probs(self, q0, pi):
        """(penalised value, dq0, dpi) at probability-space parameters."""
        zeta = (
            build_step_matrix(pi, self.n, self.memory) if self._needs_step() else pi
        )
        value = 0.0
        dq0 = np.zeros_like(q0)
        dpi = np.zeros_like(pi)
        if self.cs_term is not None:
            v, g0, gp, _ = self.cs_term.value_and_grad(q0, pi, zeta)
            value += v
            dq0 += g0
            dpi += step_grad_to_pi(gp, self.n, self.memory) if self.memory else gp
        if self.long_term is not None:
            v, g0, gp, _ = self.long_term.value_and_grad(q0, pi, zeta)
            value += v
            dq0 += g0
            dpi += gp
        if self.anon_term is not None:
            v, g0, gp = self.anon_term.value_and_grad(q0, pi)
            value += v
            dq0 += g0
            dpi += gp
        if self.penalty_term is not None:
            v, gp = self.penalty_term.value_and_grad(pi)
            value -= v
            dpi -= gp
        return value, dq0, dpi

    def negative_value_and_grad(self, x: np.ndarray):
        """Objective for scipy minimisers: minus penalised log-likelihood."""
        q0, pi = self.param.unpack(x)
        value, dq0, dpi = self.value_and_grad_probs(q0, pi)
        grad = self.param.chain(q0, pi, dq0, dpi)
        return -value, -grad
