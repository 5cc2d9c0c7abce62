"""Gradient-flow dynamics of the positional gram matrix and population SGD runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import expected as ex
from .task import APEState, RPEState, TheoryTask

log = logging.getLogger(__name__)

BLOWUP = 1e12


@dataclass
class FlowConfig:
    dt: float | None = None  # defaults to 1e-3 / alpha
    steps: int = 5000
    eta: float = 0.01
    epsilon: float | None = None  # defaults to 1e-4 * eta * alpha
    batch: int = 0  # > 0 switches SGD to sampled gradients
    seed: int = 0

    def resolved(self, alpha: float) -> "FlowConfig":
        dt = 1e-3 / alpha if self.dt is None else self.dt
        eps = 1e-4 * self.eta * alpha if self.epsilon is None else self.epsilon
        if dt <= 0 or self.eta <= 0:
            raise ValueError("dt and eta must be positive")
        if eps < 0:
            raise ValueError("epsilon must be non-negative")
        return FlowConfig(dt, self.steps, self.eta, eps, self.batch, self.seed)


@dataclass
class GramSeries:
    """Translation-invariant gram values A_0 .. A_{n//2} with their trajectory."""

    A: np.ndarray
    t: float = 0.0
    times: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @classmethod
    def initial(cls, n: int, a0: float, off: float) -> "GramSeries":
        A = np.full(n // 2 + 1, float(off))
        A[0] = a0
        return cls(A)

    def trajectory(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.times), np.asarray(self.history)


def closed_form_A0(a0_init: float, alpha: float, t) -> np.ndarray | float:
    """Logistic solution of the diagonal gram entry without augmentation width or neighbours."""
    if a0_init <= 0:
        raise ValueError("initial diagonal must be positive")
    return alpha / (1.0 + (alpha / a0_init - 1.0) * np.exp(-8.0 * alpha * np.asarray(t)))


def gram_rhs(A: np.ndarray, task: TheoryTask) -> np.ndarray:
    """dA_j/dt for j = 0 .. n//2 under the shift-augmented flow.

    dA_j/dt = 8(2w+1)(alpha - A_0) A_j
              - 8 sum_{r=1}^{2w} (2w+1-r) A_r (A_{j-r} + A_{j+r})
              + 16 w beta (A_{j+1} + A_{j-1})
    with indices folded on the ring.
    """
    n, w = task.n, task.w
    ring = ex.unfold_ring(A, n)
    j = np.arange(len(A))
    out = 8 * (2 * w + 1) * (task.alpha - A[0]) * A
    for r in range(1, 2 * w + 1):
        out -= 8 * (2 * w + 1 - r) * ring[r % n] * (ring[(j - r) % n] + ring[(j + r) % n])
    out += 16 * w * task.beta * (ring[(j + 1) % n] + ring[(j - 1) % n])
    return out


def _rk4(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def flow_integrate(init: GramSeries, task: TheoryTask, flow: FlowConfig, record_every: int = 1) -> GramSeries:
    """Fixed-step RK4 integration of :func:`gram_rhs`; raises on blow-up."""
    if task.m > 1:
        raise ValueError("the gram flow covers a single neighbour coefficient")
    fc = flow.resolved(task.alpha)
    A = np.array(init.A, dtype=float)
    if len(A) != task.n // 2 + 1:
        raise ValueError(f"expected {task.n // 2 + 1} gram values, got {len(A)}")
    out = GramSeries(A.copy(), init.t, [init.t], [A.copy()])
    t = init.t
    for step in range(1, fc.steps + 1):
        A = _rk4(lambda y: gram_rhs(y, task), A, fc.dt)
        t += fc.dt
        if not np.all(np.isfinite(A)) or np.abs(A).max() > BLOWUP:
            raise FloatingPointError(f"gram flow blew up at t={t:.6g}")
        if step % record_every == 0 or step == fc.steps:
            out.times.append(t)
            out.history.append(A.copy())
    out.A, out.t = A, t
    return out


def case1_offdiag(a_init: np.ndarray, alpha: float, t) -> np.ndarray:
    """Closed-form trajectory of every gram value when w = 0 and beta = 0: A_j scales with A_0."""
    a_init = np.asarray(a_init, dtype=float)
    ratio = closed_form_A0(a_init[0], alpha, t) / a_init[0]
    return np.multiply.outer(ratio, a_init)


# ---------------------------------------------------------------- explicit positional vectors


def circulant_positions(ring: np.ndarray, d: int, rng) -> np.ndarray:
    """Vectors p_0..p_{n-1} in R^d whose gram is the circulant built from ``ring``.

    Uses the real Fourier factorisation of the circulant, then a random
    isometric embedding into R^d, so p_k . p_{k+j} = ring[j] exactly (up to rounding).
    """
    ring = np.asarray(ring, dtype=float)
    n = len(ring)
    if d < n:
        raise ValueError("need d >= n for an exact embedding")
    lam = np.fft.fft(ring).real
    if lam.min() < -1e-12:
        raise ValueError("ring vector is not positive semi-definite")
    lam = np.maximum(lam, 0.0)
    k = np.arange(n)
    cols = []
    for f in range(n // 2 + 1):
        ang = 2 * np.pi * f * k / n
        if f == 0 or 2 * f == n:
            cols.append(np.sqrt(lam[f] / n) * np.cos(ang))
        else:
            cols.append(np.sqrt(2 * lam[f] / n) * np.cos(ang))
            cols.append(np.sqrt(2 * lam[f] / n) * np.sin(ang))
    P0 = np.stack(cols, axis=1)
    Q, _ = np.linalg.qr(rng.standard_normal((d, P0.shape[1])))
    return P0 @ Q.T


def gram_spread(P: np.ndarray) -> float:
    """max over j of the spread of p_k . p_{k+j} across k."""
    A = P @ P.T
    n = len(A)
    worst = 0.0
    for j in range(n):
        diag = A[np.arange(n), (np.arange(n) + j) % n]
        worst = max(worst, float(diag.max() - diag.min()))
    return worst


def p_flow_integrate(P: np.ndarray, task: TheoryTask, flow: FlowConfig, check_every: int = 1):
    """RK4 on dp_k/dt = -grad_k - eps p_k with the closed-form augmented gradient.

    Returns (final P, largest gram spread seen along the way).
    """
    fc = flow.resolved(task.alpha)
    theta = task.theta

    def rhs(Y):
        return -ex.expected_grad_aug(APEState(Y, theta), task) - fc.epsilon * Y

    worst = gram_spread(P)
    for step in range(1, fc.steps + 1):
        P = _rk4(rhs, P, fc.dt)
        if not np.all(np.isfinite(P)) or np.abs(P).max() > BLOWUP:
            raise FloatingPointError(f"positional flow blew up at step {step}")
        if step % check_every == 0 or step == fc.steps:
            worst = max(worst, gram_spread(P))
    return P, worst


# ---------------------------------------------------------------- population SGD


@dataclass
class TrainResult:
    kind: str
    state: object
    losses: list  # (step, expected training loss)
    test_loss: np.ndarray


def init_state(kind: str, task: TheoryTask, rng, rpe_std: float = 0.01):
    if kind in ("ape", "ape_aug"):
        P = rng.standard_normal((task.n, task.d)) / np.sqrt(task.d)
        return APEState(P, task.theta.copy())
    if kind == "rpe":
        v = rng.standard_normal(task.d)
        return RPEState(rpe_std * rng.standard_normal(2 * task.n - 1), v / np.linalg.norm(v))
    raise ValueError(f"unknown model kind {kind!r}")


def _layout(kind):
    return "aug" if kind == "ape_aug" else "window"


def sgd_population_train(kind: str, task: TheoryTask, flow: FlowConfig, state=None, train_v: bool | None = None,
                         freeze_a: bool = False, log_every: int = 0, test_mode: str = "analytic",
                         test_samples: int = 5000) -> TrainResult:
    """Iterate p <- p - eta * grad - eps * p with expected (or sampled) gradients.

    APE variants keep v = theta unless ``train_v``; RPE trains a and v jointly
    (``freeze_a`` holds a fixed) and finishes by moving the scale of v into a,
    so the returned v is the unit vector with <v, theta> >= 0.
    """
    fc = flow.resolved(task.alpha)
    if fc.epsilon > 1e-2 * fc.eta * task.alpha:
        log.warning("weight decay %.3g is not small against eta*alpha=%.3g", fc.epsilon, fc.eta * task.alpha)
    rng = np.random.default_rng(fc.seed)
    state = init_state(kind, task, rng) if state is None else state.copy()
    train_v = (kind == "rpe") if train_v is None else train_v
    M = ex.supervision_weights(task, _layout(kind))
    eta, eps = fc.eta, fc.epsilon
    losses = []

    def loss():
        if kind == "rpe":
            return ex.expected_loss_rpe(state, task, M)
        return ex.expected_loss_ape(state, task, M)

    for step in range(1, fc.steps + 1):
        if fc.batch > 0:
            g = ex.mc_gradient(state, task, _layout(kind), fc.batch, rng).mean
            gw, gv = g[: -task.d], g[-task.d :]
            if kind != "rpe":
                gw = gw.reshape(task.n, task.d)
        elif kind == "rpe":
            gw, gv = ex.expected_grad_rpe(state, task, M)
        else:
            gw, gv = ex.expected_grad_ape(state, task, M)
        if kind == "rpe":
            if not freeze_a:
                state.a = state.a - eta * gw - eps * state.a
        else:
            state.P = state.P - eta * gw - eps * state.P
        if train_v:
            state.v = state.v - eta * gv - eps * state.v
        if log_every and (step % log_every == 0 or step == fc.steps):
            cur = loss()
            if not np.isfinite(cur) or cur > BLOWUP:
                raise FloatingPointError(f"{kind} training diverged at step {step}")
            losses.append((step, cur))
    if kind == "rpe":
        s = np.linalg.norm(state.v) * np.sign(state.v @ task.theta or 1.0)
        if s != 0:
            state.a, state.v = state.a * s, state.v / s
    weights = state.a if kind == "rpe" else state.P
    if not np.all(np.isfinite(weights)):
        raise FloatingPointError(f"{kind} training diverged")
    test = ex.position_test_loss(state, task, test_mode, test_samples, rng)
    return TrainResult(kind, state, losses, test)
