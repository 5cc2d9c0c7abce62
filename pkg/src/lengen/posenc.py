"""Positional-encoding policies.

A scheme maps a (query i, key j) pair to a slot id in a learnable table whose
vector is added to the key before the attention score is taken. APE instead
adds one vector per absolute position to the token embedding.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NONE = -1


@dataclass
class PEScheme:
    """variant: one of ``nope``, ``ape``, ``rpe``, ``upe``, ``sigrpe``.

    ``max_offset`` bounds relative offsets (clamped beyond). ``uniform_positions``
    lists the UPE key positions sharing one vector each. ``circular`` computes
    RPE offsets on a ring of the sequence length.
    """

    variant: str = "rpe"
    max_len: int = 64
    max_offset: int = 16
    uniform_positions: Sequence[int] = field(default_factory=tuple)
    circular: bool = False
    per_layer: bool = False

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in ("nope", "ape", "rpe", "upe", "sigrpe"):
            raise ValueError(f"unknown PE variant {self.variant!r}")
        self.uniform_positions = tuple(int(p) for p in self.uniform_positions)

    @property
    def pairwise(self) -> bool:
        return self.variant in ("rpe", "upe", "sigrpe")

    @property
    def needs_meta(self) -> bool:
        return self.variant == "sigrpe"

    @property
    def n_slots(self) -> int:
        rel = 2 * self.max_offset + 1
        if self.variant == "rpe":
            return rel
        if self.variant == "upe":
            return rel + len(self.uniform_positions)
        if self.variant == "sigrpe":
            return 4 * rel  # ordered pair of operands x significance difference
        return 0

    def slot_label(self, s: int) -> str:
        rel = 2 * self.max_offset + 1
        if self.variant == "upe" and s >= rel:
            return f"c{s - rel + 1}"
        if self.variant == "sigrpe":
            pair, off = divmod(s, rel)
            return f"{'AB'[pair // 2]}{'AB'[pair % 2]}{off - self.max_offset:+d}"
        return f"{s - self.max_offset:+d}"

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "max_len": self.max_len,
            "max_offset": self.max_offset,
            "uniform_positions": list(self.uniform_positions),
            "circular": self.circular,
            "per_layer": self.per_layer,
        }


def rpe_for_add(l: int, **kw) -> PEScheme:
    return PEScheme("rpe", max_len=2 * l + 1, max_offset=2 * l + 1, **kw)


def upe_for_mul(l: int, multiplier_len: int, **kw) -> PEScheme:
    return PEScheme(
        "upe",
        max_len=l + multiplier_len + 1,
        max_offset=l + multiplier_len + 1,
        uniform_positions=tuple(range(multiplier_len)),
        **kw,
    )


def _rel_slot(scheme: PEScheme, i: int, j: int, T: int | None) -> int:
    off = i - j
    if scheme.circular and T:
        off = (off + T // 2) % T - T // 2
    return int(np.clip(off, -scheme.max_offset, scheme.max_offset)) + scheme.max_offset


def pairwise_slot(scheme: PEScheme, i: int, j: int, meta: dict | None = None, T: int | None = None) -> int:
    """Slot id for query i attending key j, or -1 when no pairwise vector applies."""
    v = scheme.variant
    if v in ("nope", "ape"):
        return NONE
    if v == "rpe":
        return _rel_slot(scheme, i, j, T)
    if v == "upe":
        if j in scheme.uniform_positions:
            return 2 * scheme.max_offset + 1 + scheme.uniform_positions.index(j)
        return _rel_slot(scheme, i, j, T)
    # sigrpe: only digit-digit pairs, indexed by significance difference
    sig = meta["significance"] if "significance" in meta else _block_significance(meta, T)
    spans = meta["spans"]
    oi, oj = _operand_of(spans, i), _operand_of(spans, j)
    if oi < 0 or oj < 0:
        return NONE
    rel = 2 * scheme.max_offset + 1
    off = int(np.clip(sig[i] - sig[j], -scheme.max_offset, scheme.max_offset))
    return (2 * oi + oj) * rel + off + scheme.max_offset


def _operand_of(spans, p: int) -> int:
    for k, (lo, hi) in enumerate(spans):
        if lo <= p < hi:
            return k
    return -1


def _block_significance(meta: dict, T: int | None) -> list[int]:
    T = T if T is not None else max(hi for _, hi in meta["spans"])
    sig = [0] * T
    for lo, hi in meta["spans"]:
        for p in range(lo, hi):
            sig[p] = hi - p
    return sig


def slot_matrix(scheme: PEScheme, T: int, meta: dict | None = None) -> np.ndarray:
    """(T, T) int array of slot ids (query rows, key columns), -1 for none."""
    if not scheme.pairwise:
        return np.full((T, T), NONE, dtype=np.int64)
    if scheme.variant == "sigrpe":
        return np.array([[pairwise_slot(scheme, i, j, meta, T) for j in range(T)] for i in range(T)], dtype=np.int64)
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    off = i - j
    if scheme.circular:
        off = (off + T // 2) % T - T // 2
    S = np.clip(off, -scheme.max_offset, scheme.max_offset) + scheme.max_offset
    if scheme.variant == "upe":
        for k, p in enumerate(scheme.uniform_positions):
            if p < T:
                S[:, p] = 2 * scheme.max_offset + 1 + k
    return S.astype(np.int64)


def batch_slots(scheme: PEScheme, T: int, metas: Sequence[dict] | None = None) -> np.ndarray:
    """Slot ids for a batch: (T, T) when shared, (B, T, T) for meta-dependent schemes."""
    if scheme.needs_meta:
        return np.stack([slot_matrix(scheme, T, m) for m in metas])
    return slot_matrix(scheme, T)


def gather_slots(table: np.ndarray, slots: np.ndarray) -> np.ndarray:
    """Vectors for every (i, j): table[slot], zero where the slot is -1."""
    out = table[np.maximum(slots, 0)]
    out[slots < 0] = 0.0
    return out


def export_positional_map(tables: Sequence[np.ndarray], scheme: PEScheme, prefix) -> list[str]:
    """Write one CSV per layer: rows are slots (labelled), columns vector components."""
    paths = []
    for layer, table in enumerate(tables):
        path = f"{prefix}_layer{layer}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "label"] + [f"c{k}" for k in range(table.shape[1])])
            for s, row in enumerate(table):
                w.writerow([s, scheme.slot_label(s)] + [repr(float(x)) for x in row])
        paths.append(path)
    return paths
