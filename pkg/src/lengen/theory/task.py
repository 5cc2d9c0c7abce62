"""Synthetic ring regression task and the factored linear-attention predictors.

Positions are 0-based on a ring of length ``n``. The seen window is positions
``0 .. n1-1``; everything else is zero-padded during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TheoryTask:
    n: int = 51
    n1: int = 10
    d: int = 200
    alpha: float = 2.0
    betas: tuple = (0.5,)
    theta: np.ndarray | None = None
    w: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not 1 <= self.n1 <= self.n:
            raise ValueError("need 1 <= n1 <= n")
        if self.w < 0:
            raise ValueError("w must be non-negative")
        if self.theta is None:
            self.theta = np.zeros(self.d)
            self.theta[0] = 1.0
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.d,):
            raise ValueError(f"theta must have shape ({self.d},)")
        if abs(np.linalg.norm(self.theta) - 1.0) > 1e-12:
            raise ValueError("theta must be a unit vector")

    @classmethod
    def random(cls, rng, **kw) -> "TheoryTask":
        d = kw.get("d", cls.d)
        th = rng.standard_normal(d)
        return cls(theta=th / np.linalg.norm(th), **kw)

    @property
    def m(self) -> int:
        return len(self.betas)

    @property
    def beta(self) -> float:
        return self.betas[0] if self.betas else 0.0

    def target_matrix(self) -> np.ndarray:
        """C with y = C s, s_r = <theta, x_r>, neighbours taken on the ring."""
        n = self.n
        C = np.zeros((n, n))
        idx = np.arange(n)
        C[idx, idx] += self.alpha
        for k, b in enumerate(self.betas, start=1):
            C[idx, (idx - k) % n] += b
            C[idx, (idx + k) % n] += b
        return C

    def to_dict(self) -> dict:
        return {"n": self.n, "n1": self.n1, "d": self.d, "alpha": self.alpha,
                "betas": list(self.betas), "w": self.w}


@dataclass
class APEState:
    P: np.ndarray  # (n, d) positional vectors
    v: np.ndarray  # (d,)

    def gram(self) -> np.ndarray:
        return self.P @ self.P.T

    def copy(self) -> "APEState":
        return APEState(self.P.copy(), self.v.copy())


@dataclass
class RPEState:
    a: np.ndarray  # (2n - 1,) scalar per offset -(n-1) .. n-1
    v: np.ndarray
    circular: bool = True

    @property
    def n(self) -> int:
        return (len(self.a) + 1) // 2

    def at(self, offset: int) -> float:
        return float(self.a[offset + self.n - 1])

    def copy(self) -> "RPEState":
        return RPEState(self.a.copy(), self.v.copy(), self.circular)


def offset_matrix(n: int, circular: bool = True) -> np.ndarray:
    """Offset i - r for every (i, r); on the ring it is wrapped into [-n//2, n - 1 - n//2]."""
    i = np.arange(n)[:, None]
    r = np.arange(n)[None, :]
    off = i - r
    if circular:
        off = (off + n // 2) % n - n // 2
    return off


def rpe_kernel(state: RPEState) -> np.ndarray:
    n = state.n
    return state.a[offset_matrix(n, state.circular) + n - 1]


def window_mask(task: TheoryTask) -> np.ndarray:
    m = np.zeros(task.n, dtype=bool)
    m[: task.n1] = True
    return m


def sample_task(task: TheoryTask, mode: str = "seen_padded", rng=None, batch: int | None = None):
    """Draw x (n, d) or (batch, n, d) and its targets y.

    ``seen_padded`` keeps Gaussian inputs on the seen window only; ``full``
    fills every position.
    """
    rng = np.random.default_rng() if rng is None else rng
    shape = (task.n, task.d) if batch is None else (batch, task.n, task.d)
    x = rng.standard_normal(shape)
    if mode == "seen_padded":
        x[..., task.n1 :, :] = 0.0
    elif mode != "full":
        raise ValueError(f"unknown sampling mode {mode!r}")
    s = x @ task.theta
    y = s @ task.target_matrix().T
    return x, y


def ape_predict(state: APEState, x: np.ndarray) -> np.ndarray:
    u = x @ state.v
    return u @ state.gram().T


def rpe_predict(state: RPEState, x: np.ndarray) -> np.ndarray:
    u = x @ state.v
    return u @ rpe_kernel(state).T
