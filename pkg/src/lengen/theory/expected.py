"""Population (expected) losses and gradients, their Monte-Carlo counterparts,
and per-position test losses.

With s_r = <theta, x_r>, u_r = <v, x_r> and Gaussian inputs, E[u_r u_q] =
|v|^2 delta, E[u_r s_q] = <v, theta> delta and E[s_r s_q] = delta. Every
expected squared error therefore collapses to a weighted sum over (i, r)
pairs, weighted by how often position i is supervised while position r
carries a nonzero input. Those counts live in a weight matrix M.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .task import APEState, RPEState, TheoryTask, offset_matrix, rpe_kernel


# ---------------------------------------------------------------- supervision layouts


def aug_windows(task: TheoryTask) -> np.ndarray:
    """(n, n) bool: row s is the seen window circularly shifted by s positions."""
    n = task.n
    out = np.zeros((n, n), dtype=bool)
    for s in range(n):
        out[s, (s + np.arange(task.n1)) % n] = True
    return out


def supervision_weights(task: TheoryTask, kind: str = "window") -> np.ndarray:
    """M[i, r]: number of training layouts in which i is supervised and r is nonzero."""
    if kind == "window":
        m = np.zeros(task.n)
        m[: task.n1] = 1.0
        return np.outer(m, m)
    if kind == "aug":
        win = aug_windows(task).astype(float)
        return win.T @ win
    raise ValueError(f"unknown layout {kind!r}")


def _moments(v, task):
    return float(v @ v), float(v @ task.theta)


def _weighted_loss(K, C, M, nv2, g):
    return float((M * (nv2 * K * K - 2 * g * K * C + C * C)).sum())


# ---------------------------------------------------------------- APE


def expected_loss_ape(state: APEState, task: TheoryTask, weights=None) -> float:
    M = supervision_weights(task) if weights is None else weights
    nv2, g = _moments(state.v, task)
    return _weighted_loss(state.gram(), task.target_matrix(), M, nv2, g)


def expected_grad_ape(state: APEState, task: TheoryTask, weights=None):
    """(dL/dP, dL/dv) of the expected loss; rows outside the supervised support are exactly 0."""
    M = supervision_weights(task) if weights is None else weights
    nv2, g = _moments(state.v, task)
    A, C = state.gram(), task.target_matrix()
    G = M * (2 * nv2 * A - 2 * g * C)
    dP = (G + G.T) @ state.P
    dv = 2 * (M * A * A).sum() * state.v - 2 * (M * A * C).sum() * task.theta
    return dP, dv


def expected_grad_aug(state: APEState, task: TheoryTask) -> np.ndarray:
    """Closed-form gradient of the shift-augmented loss for v aligned with theta.

    Windows have length n1 = 2w + 1; summed over every shift the result is

      dL/dp_k = 4 sum_{|r|<=2w} (2w+1-|r|) (p_k.p_{k+r}) p_{k+r}
                - 4(2w+1) alpha p_k - 8 w beta (p_{k+1} + p_{k-1})
    """
    n, w = task.n, task.w
    if task.m > 1:
        raise ValueError("closed form covers a single neighbour coefficient")
    if task.n1 != 2 * w + 1:
        raise ValueError("closed form needs the window length n1 = 2w + 1")
    if 4 * w + 1 > n:
        raise ValueError("closed form needs 4w + 1 <= n (offsets would alias on the ring)")
    P = state.P
    out = np.zeros_like(P)
    for r in range(-2 * w, 2 * w + 1):
        Pr = np.roll(P, -r, axis=0)  # row k holds p_{k+r}
        out += 4 * (2 * w + 1 - abs(r)) * (P * Pr).sum(1, keepdims=True) * Pr
    out -= 4 * (2 * w + 1) * task.alpha * P
    out -= 8 * w * task.beta * (np.roll(P, -1, axis=0) + np.roll(P, 1, axis=0))
    return out


# ---------------------------------------------------------------- RPE


def _offset_onehot(n: int, circular: bool) -> np.ndarray:
    idx = (offset_matrix(n, circular) + n - 1).ravel()
    out = np.zeros((n * n, 2 * n - 1))
    out[np.arange(n * n), idx] = 1.0
    return out


def expected_loss_rpe(state: RPEState, task: TheoryTask, weights=None) -> float:
    M = supervision_weights(task) if weights is None else weights
    nv2, g = _moments(state.v, task)
    return _weighted_loss(rpe_kernel(state), task.target_matrix(), M, nv2, g)


def expected_grad_rpe(state: RPEState, task: TheoryTask, weights=None):
    """(dL/da, dL/dv). Offsets never seen together in training get exactly 0."""
    M = supervision_weights(task) if weights is None else weights
    n = task.n
    nv2, g = _moments(state.v, task)
    K, C = rpe_kernel(state), task.target_matrix()
    G = M * (2 * nv2 * K - 2 * g * C)
    idx = (offset_matrix(n, state.circular) + n - 1).ravel()
    da = np.bincount(idx, weights=G.ravel(), minlength=2 * n - 1)
    dv = 2 * (M * K * K).sum() * state.v - 2 * (M * K * C).sum() * task.theta
    return da, dv


# ---------------------------------------------------------------- Monte-Carlo


@dataclass
class MCGradient:
    mean: np.ndarray  # flattened gradient estimate
    se: np.ndarray  # per-component standard error
    proj_mean: np.ndarray | None = None  # projections on the given directions
    proj_se: np.ndarray | None = None
    samples: int = 0


def flatten_grad(*parts) -> np.ndarray:
    return np.concatenate([np.ravel(p) for p in parts])


def _draw_layout(task, kind, N, rng):
    """Input-nonzero mask, supervised mask and loss weight for N sampled sequences."""
    if kind == "window":
        m = np.zeros((N, task.n), dtype=bool)
        m[:, : task.n1] = True
        return m, m, 1.0
    if kind == "aug":
        win = aug_windows(task)
        m = win[rng.integers(task.n, size=N)]
        return m, m, float(task.n)  # uniform shift times n = sum over all shifts
    raise ValueError(f"unknown layout {kind!r}")


def _per_sample_grads(state, task, kind, N, rng):
    n = task.n
    x = rng.standard_normal((N, n, task.d))
    live, sup, weight = _draw_layout(task, kind, N, rng)
    x *= live[..., None]
    s = x @ task.theta
    u = x @ state.v
    C = task.target_matrix()
    K = state.gram() if isinstance(state, APEState) else rpe_kernel(state)
    e = (u @ K.T - s @ C.T) * sup
    G = 2 * weight * e[:, :, None] * u[:, None, :]
    dv = 2 * weight * ((e @ K)[:, :, None] * x).sum(1)
    if isinstance(state, APEState):
        dP = (G + G.transpose(0, 2, 1)) @ state.P
        return np.concatenate([dP.reshape(N, -1), dv], axis=1)
    da = G.reshape(N, -1) @ _offset_onehot(n, state.circular)
    return np.concatenate([da, dv], axis=1)


def mc_gradient(state, task: TheoryTask, kind: str = "window", samples: int = 100_000, rng=None,
                directions: np.ndarray | None = None, chunk: int | None = None) -> MCGradient:
    """Sampled-loss gradient averaged over ``samples`` draws, flattened as (P, v) or (a, v).

    ``directions`` (k, dim) additionally yields projected means with their own
    standard errors, which is what a z-test on a few random directions needs.
    """
    rng = np.random.default_rng() if rng is None else rng
    if chunk is None:
        chunk = max(1, 2_000_000 // (task.n * max(task.n, task.d)))
    tot = sq = None
    ptot = psq = None
    done = 0
    while done < samples:
        N = min(chunk, samples - done)
        g = _per_sample_grads(state, task, kind, N, rng)
        tot = g.sum(0) if tot is None else tot + g.sum(0)
        sq = (g * g).sum(0) if sq is None else sq + (g * g).sum(0)
        if directions is not None:
            pr = g @ directions.T
            ptot = pr.sum(0) if ptot is None else ptot + pr.sum(0)
            psq = (pr * pr).sum(0) if psq is None else psq + (pr * pr).sum(0)
        done += N

    def finish(t, q):
        mean = t / samples
        var = np.maximum(q / samples - mean * mean, 0.0) * samples / max(samples - 1, 1)
        return mean, np.sqrt(var / samples)

    mean, se = finish(tot, sq)
    out = MCGradient(mean, se, samples=samples)
    if directions is not None:
        out.proj_mean, out.proj_se = finish(ptot, psq)
    return out


# ---------------------------------------------------------------- test losses


def position_test_loss(state, task: TheoryTask, mode: str = "analytic", samples: int = 5000, rng=None,
                       return_se: bool = False):
    """Expected squared error at every position on fully populated inputs."""
    K = state.gram() if isinstance(state, APEState) else rpe_kernel(state)
    C = task.target_matrix()
    if mode == "analytic":
        nv2, g = _moments(state.v, task)
        out = (nv2 * K * K - 2 * g * K * C + C * C).sum(1)
        return (out, np.zeros_like(out)) if return_se else out
    if mode != "monte_carlo":
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng() if rng is None else rng
    chunk = max(1, 2_000_000 // (task.n * task.d))
    tot = np.zeros(task.n)
    sq = np.zeros(task.n)
    done = 0
    while done < samples:
        N = min(chunk, samples - done)
        x = rng.standard_normal((N, task.n, task.d))
        err = (x @ state.v) @ K.T - (x @ task.theta) @ C.T
        err *= err
        tot += err.sum(0)
        sq += (err * err).sum(0)
        done += N
    mean = tot / samples
    se = np.sqrt(np.maximum(sq / samples - mean * mean, 0.0) / max(samples - 1, 1))
    return (mean, se) if return_se else mean


def gram_test_loss(A: np.ndarray, task: TheoryTask) -> float:
    """Per-position test loss of a translation-invariant gram (ring vector A_0..A_{n//2}), v = theta."""
    ring = unfold_ring(A, task.n)
    target = np.zeros(task.n)
    target[0] = task.alpha
    for k, b in enumerate(task.betas, start=1):
        target[k % task.n] += b
        target[-k % task.n] += b
    return float(((ring - target) ** 2).sum())


def unfold_ring(A: np.ndarray, n: int) -> np.ndarray:
    """Full ring vector c_0..c_{n-1} from the half vector A_0..A_{n//2} (c_j = A_min(j, n-j))."""
    j = np.arange(n)
    return np.asarray(A)[np.minimum(j, n - j)]
