"""Digit-level arithmetic: schoolbook oracles, parallel carry-handle algorithms,
carry-complexity metrics and dependency-position maps.

Numbers are little-endian digit tuples (index 0 is the least significant digit).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Digits = tuple[int, ...]


def to_digits(n: int) -> Digits:
    if n < 0:
        raise ValueError("negative numbers are not supported")
    if n == 0:
        return (0,)
    out = []
    while n:
        n, r = divmod(n, 10)
        out.append(r)
    return tuple(out)


def value(d: Sequence[int]) -> int:
    return int("".join(str(x) for x in reversed(d))) if len(d) else 0


def canonical(d: Sequence[int]) -> Digits:
    """Strip most-significant zeros; the empty or all-zero vector becomes (0,)."""
    d = list(d)
    for x in d:
        if not 0 <= x <= 9:
            raise ValueError(f"digit out of range: {x}")
    while len(d) > 1 and d[-1] == 0:
        d.pop()
    return tuple(d) if d else (0,)


def is_canonical(d: Sequence[int]) -> bool:
    return len(d) >= 1 and all(0 <= x <= 9 for x in d) and (len(d) == 1 or d[-1] != 0)


def zero_extend(d: Sequence[int], n: int) -> list[int]:
    return list(d) + [0] * (n - len(d))


# ---------------------------------------------------------------- oracles


def school_add(a: Sequence[int], b: Sequence[int]) -> Digits:
    n = max(len(a), len(b))
    a, b = zero_extend(a, n), zero_extend(b, n)
    out, carry = [], 0
    for x, y in zip(a, b):
        carry, r = divmod(x + y + carry, 10)
        out.append(r)
    if carry:
        out.append(carry)
    return canonical(out)


def school_mul(a: Sequence[int], b: Sequence[int]) -> Digits:
    acc = [0] * (len(a) + len(b))
    for i, x in enumerate(a):
        carry = 0
        for j, y in enumerate(b):
            carry, acc[i + j] = divmod(acc[i + j] + x * y + carry, 10)
        k = i + len(b)
        while carry:
            carry, acc[k] = divmod(acc[k] + carry, 10)
            k += 1
    return canonical(acc)


# ---------------------------------------------------------------- parallel algorithms


def parallel_add(a: Sequence[int], b: Sequence[int], l: int | None = None) -> tuple[Digits, int]:
    """Parallel carry-handle addition.

    Digit-wise sums first, then whole-array carry passes until every slot is
    below 10. Each pass moves one unit of carry one position up in parallel;
    a slot left at 10 by an incoming carry is resolved in the next pass.

    Returns the sum and the number of passes executed.
    """
    if l is None:
        l = max(len(a), len(b))
    if len(a) > l or len(b) > l:
        raise ValueError("operand longer than l")
    s = np.zeros(l + 1, dtype=np.int64)
    s[:l] = np.add(zero_extend(a, l), zero_extend(b, l))
    passes = 0
    while (s >= 10).any():
        carry = s[:-1] // 10
        s %= 10
        s[1:] += carry
        passes += 1
    return canonical(s.tolist()), passes


def parallel_add_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """:func:`parallel_add` over rows of (N, L) little-endian digit arrays.

    Returns (N, L + 1) sum digits and the per-row pass count. Slots never
    exceed 19, so every carry is 0 or 1 and small integer types suffice.
    """
    a = np.asarray(a)
    N, L = a.shape
    s = np.zeros((N, L + 1), dtype=np.int8)
    np.add(a, b, out=s[:, :L], casting="unsafe")
    passes = np.zeros(N, dtype=np.int64)
    over = s >= 10
    while over.any():
        passes += _row_any(over)
        step = over.view(np.int8).ravel()
        flat = s.ravel()
        flat -= np.int8(10) * step
        # the top slot never reaches 10, so shifting the flat buffer cannot leak across rows
        flat[1:] += step[:-1]
        over = s >= 10
    return s, passes


def _row_any(m: np.ndarray) -> np.ndarray:
    # column-wise OR is much faster than any(axis=1) on narrow, tall arrays
    out = m[:, 0].copy()
    for j in range(1, m.shape[1]):
        out |= m[:, j]
    return out


def school_add_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Ripple-carry :func:`school_add` over rows; (N, L + 1) digits."""
    a = np.asarray(a)
    N, L = a.shape
    out = np.zeros((N, L + 1), dtype=np.int8)
    carry = np.zeros(N, dtype=np.int8)
    for i in range(L):
        t = a[:, i] + b[:, i] + carry
        carry = (t >= 10).astype(np.int8)
        out[:, i] = t - 10 * carry
    out[:, L] = carry
    return out


def _mul_carry_pass(m: np.ndarray, l1: int) -> np.ndarray:
    # digit k of slot j travels to slot j + k; the top order keeps its full quotient
    # so no value is lost when a slot exceeds 10**(l1 + 1)
    new = m % 10
    for k in range(1, l1 + 1):
        part = m[..., :-k] // 10**k
        if k < l1:
            part = part % 10
        new[..., k:] += part
    return new


def parallel_mul(a: Sequence[int], b: Sequence[int]) -> tuple[Digits, int]:
    """Parallel carry-handle multiplication.

    ``a`` is the (short) multiplier and ``b`` the multiplicand. Every slot first
    holds value(a) * b_i, then carry passes route the k-th decimal digit of each
    slot k positions up (k = 1..len(a)) until all slots are single digits.
    """
    l1, l2 = len(a), len(b)
    m = np.zeros(l1 + l2, dtype=np.int64)
    m[:l2] = value(a) * np.asarray(b, dtype=np.int64)
    passes = 0
    while (m >= 10).any():
        m = _mul_carry_pass(m, l1)
        passes += 1
    return canonical(m.tolist()), passes


# ---------------------------------------------------------------- complexity


@dataclass
class ComplexityReport:
    cascade_length: int = 0
    dependency_levels: int = 0
    per_position_chain: list[int] = field(default_factory=list)


def cascade_complexity(a: Sequence[int], b: Sequence[int], count_generator: bool = True) -> ComplexityReport:
    """Longest carry cascade of a + b.

    A position whose digit sum is at least 10 starts a chain; every following
    position summing to exactly 9 extends it. With ``count_generator`` the
    generating position counts as 1 (the default), otherwise only the 9-run is
    counted.
    """
    n = max(len(a), len(b))
    s = np.add(zero_extend(a, n), zero_extend(b, n))
    chains = [0] * n
    for i in range(n):
        if s[i] >= 10:
            run = 0
            j = i + 1
            while j < n and s[j] == 9:
                run += 1
                j += 1
            chains[i] = run + (1 if count_generator else 0)
    return ComplexityReport(cascade_length=max(chains, default=0), per_position_chain=chains)


def mul_complexity(a: Sequence[int], b: Sequence[int]) -> ComplexityReport:
    """Dependency levels of a * b: the pass count of :func:`parallel_mul`.

    ``per_position_chain[i]`` is the last pass after which slot i changed.
    """
    l1, l2 = len(a), len(b)
    m = np.zeros(l1 + l2, dtype=np.int64)
    m[:l2] = value(a) * np.asarray(b, dtype=np.int64)
    settled = np.zeros(l1 + l2, dtype=np.int64)
    passes = 0
    while (m >= 10).any():
        new = _mul_carry_pass(m, l1)
        passes += 1
        settled[new != m] = passes
        m = new
    return ComplexityReport(dependency_levels=passes, per_position_chain=settled.tolist())


def digits_matrix(values: Sequence[Sequence[int]], width: int) -> np.ndarray:
    out = np.zeros((len(values), width), dtype=np.int64)
    for r, d in enumerate(values):
        out[r, : len(d)] = d
    return out


def cascade_lengths(a: np.ndarray, b: np.ndarray, count_generator: bool = True) -> np.ndarray:
    """Vectorised :func:`cascade_complexity` over rows of (N, L) little-endian digit arrays."""
    s = np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64)
    N, L = s.shape
    nine_run = np.zeros(N, dtype=np.int64)  # run of 9-sums starting at i + 1
    best = np.zeros(N, dtype=np.int64)
    bonus = 1 if count_generator else 0
    for i in range(L - 1, -1, -1):
        chain = np.where(s[:, i] >= 10, nine_run + bonus, 0)
        np.maximum(best, chain, out=best)
        nine_run = np.where(s[:, i] == 9, nine_run + 1, 0)
    return best


def mul_levels(multiplier: np.ndarray, b: np.ndarray, multiplier_len: int) -> np.ndarray:
    """Vectorised dependency levels for rows (multiplier value, multiplicand digits)."""
    b = np.asarray(b, dtype=np.int64)
    N, L = b.shape
    m = np.zeros((N, multiplier_len + L), dtype=np.int64)
    m[:, :L] = np.asarray(multiplier, dtype=np.int64)[:, None] * b
    levels = np.zeros(N, dtype=np.int64)
    active = (m >= 10).any(axis=1)
    while active.any():
        levels += active
        m[active] = _mul_carry_pass(m[active], multiplier_len)
        active = (m >= 10).any(axis=1)
    return levels


# ---------------------------------------------------------------- dependency maps


def sigma(i: int, l: int) -> tuple[int, ...]:
    """1-based input positions needed for output digit i of an l-digit sum."""
    if not 1 <= i <= l:
        raise ValueError(f"position {i} outside 1..{l}")
    return tuple(range(1, i + 1)) + tuple(range(l + 2, i + l + 2))


def sigma_rel(i: int, d: int, l: int) -> tuple[int, ...]:
    """Relative offsets attended when training cascades are bounded by d.

    The list does not depend on i; i only has to be large enough (d <= i).
    """
    if d > i:
        raise ValueError("d must not exceed i")
    return tuple(range(-d, 1)) + tuple(range(l - d + 1, l + 2))
