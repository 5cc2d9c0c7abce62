"""Tokenised datasets for the addition / multiplication length-generalisation tasks.

Addition, l = 20, "123 + 4095":

    input : PAD*17 1 2 3 + PAD*16 4 0 9 5
    target: IGN*21         PAD*16 4 2 1 8

Multiplication keeps the multiplier unpadded and supervises the last
``l + multiplier_len`` positions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator, Literal, Sequence

import numpy as np

from . import arith
from .arith import Digits

log = logging.getLogger(__name__)

N_TEXT_TOKENS = 26
DEFAULT_REJECTION_BUDGET = 10**6


class Vocab:
    """Dense token table; digit d has id d."""

    def __init__(self, n_text: int = N_TEXT_TOKENS):
        self.tokens = [str(d) for d in range(10)] + ["+", "*", "<pad>", "_"]
        self.tokens += [f"T{k}" for k in range(1, n_text + 1)]
        self.id = {t: i for i, t in enumerate(self.tokens)}
        self.PLUS = self.id["+"]
        self.TIMES = self.id["*"]
        self.PAD = self.id["<pad>"]
        self.IGNORE = self.id["_"]
        self.first_text = self.id["T1"]
        self.n_text = n_text

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def text_ids(self) -> np.ndarray:
        return np.arange(self.first_text, self.first_text + self.n_text)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


VOCAB = Vocab()


@dataclass
class Sample:
    input_ids: np.ndarray
    target_ids: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_ids = np.asarray(self.input_ids, dtype=np.int64)
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not len(self.input_ids) == len(self.target_ids) == len(self.mask):
            raise ValueError("input, target and mask lengths differ")

    def __len__(self):
        return len(self.input_ids)

    def to_record(self) -> dict:
        return {
            "input_ids": self.input_ids.tolist(),
            "target_ids": self.target_ids.tolist(),
            "mask": [bool(m) for m in self.mask],
            "meta": self.meta,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Sample":
        return cls(rec["input_ids"], rec["target_ids"], rec["mask"], rec.get("meta", {}))


@dataclass
class DomainSpec:
    l: int
    l_s: int
    operation: Literal["add", "mul"] = "add"
    multiplier_len: int = 1

    def __post_init__(self):
        if not 1 <= self.l_s < self.l:
            raise ValueError(f"need 1 <= l_s < l, got l_s={self.l_s}, l={self.l}")
        if self.operation not in ("add", "mul"):
            raise ValueError(f"unknown operation {self.operation!r}")


@dataclass
class SamplerSpec:
    kind: Literal["uniform", "complexity_uniform", "mixture"] = "uniform"
    mixture_p: float = 0.5
    seed: int = 0
    rejection_budget: int = DEFAULT_REJECTION_BUDGET

    def __post_init__(self):
        if self.kind not in ("uniform", "complexity_uniform", "mixture"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not 0.0 <= self.mixture_p <= 1.0:
            raise ValueError("mixture_p must lie in [0, 1]")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SamplerSpec":
        """Parse the CLI form ``uniform | cuniform | mix:p``."""
        if text == "uniform":
            return cls("uniform", seed=seed)
        if text in ("cuniform", "complexity_uniform"):
            return cls("complexity_uniform", seed=seed)
        if text.startswith("mix"):
            p = float(text.split(":", 1)[1]) if ":" in text else 0.5
            return cls("mixture", mixture_p=p, seed=seed)
        raise ValueError(f"unknown sampler {text!r}")


@dataclass
class TextNoiseSpec:
    max_tokens: int = 20
    max_len: int | None = None


class ComplexityBudgetExceeded(RuntimeError):
    pass


# ---------------------------------------------------------------- encoding


def _big_endian(d: Digits) -> list[int]:
    return list(reversed(d))


def encode_add(a: Digits, b: Digits, l: int, vocab: Vocab = VOCAB, l_s: int | None = None) -> Sample:
    if len(a) > l or len(b) > l:
        raise ValueError(f"operand longer than l={l}")
    total = arith.school_add(a, b)
    if len(total) > l:
        raise OverflowError(f"sum needs {len(total)} digits, format holds {l}")
    P = vocab.PAD
    inp = [P] * (l - len(a)) + _big_endian(a) + [vocab.PLUS] + [P] * (l - len(b)) + _big_endian(b)
    tgt = [vocab.IGNORE] * (l + 1) + [P] * (l - len(total)) + _big_endian(total)
    mask = [False] * (l + 1) + [True] * l
    meta = {
        "op": "add",
        "l": l,
        "l_s": l_s,
        "len_a": len(a),
        "len_b": len(b),
        "complexity": arith.cascade_complexity(a, b).cascade_length,
        "spans": [[0, l], [l + 1, 2 * l + 1]],
    }
    return Sample(inp, tgt, mask, meta)


def encode_mul(a: Digits, b: Digits, l: int, vocab: Vocab = VOCAB, l_s: int | None = None) -> Sample:
    """``a`` is the unpadded multiplier, ``b`` the multiplicand padded to l."""
    if len(b) > l:
        raise ValueError(f"multiplicand longer than l={l}")
    la = len(a)
    prod = arith.school_mul(a, b)
    width = l + la
    P = vocab.PAD
    inp = _big_endian(a) + [vocab.TIMES] + [P] * (l - len(b)) + _big_endian(b)
    n_ign = len(inp) - width
    tgt = [vocab.IGNORE] * n_ign + [P] * (width - len(prod)) + _big_endian(prod)
    mask = [False] * n_ign + [True] * width
    meta = {
        "op": "mul",
        "l": l,
        "l_s": l_s,
        "len_a": la,
        "len_b": len(b),
        "complexity": arith.mul_complexity(a, b).dependency_levels,
        "spans": [[0, la], [la + 1, la + 1 + l]],
    }
    return Sample(inp, tgt, mask, meta)


def encode(spec: DomainSpec, a: Digits, b: Digits, vocab: Vocab = VOCAB) -> Sample:
    if spec.operation == "add":
        return encode_add(a, b, spec.l, vocab, spec.l_s)
    return encode_mul(a, b, spec.l, vocab, spec.l_s)


def decode_answer(sample: Sample, ids: Sequence[int] | None = None, vocab: Vocab = VOCAB) -> Digits:
    """Read the supervised region (of ``ids``, default the target) back into digits."""
    ids = sample.target_ids if ids is None else np.asarray(ids)
    region = [int(t) for t in ids[sample.mask] if t != vocab.PAD]
    if any(t > 9 for t in region):
        raise ValueError("non-digit token in answer region")
    return arith.canonical(list(reversed(region)))


# ---------------------------------------------------------------- sampling


def random_digits(rng: np.random.Generator, n_digits: int) -> Digits:
    """Uniform integer in [0, 10**n_digits) as canonical digits."""
    return arith.canonical(rng.integers(0, 10, n_digits).tolist())


def random_multiplier(rng: np.random.Generator, n_digits: int) -> Digits:
    """Uniform integer with exactly n_digits digits (1..9 for a single digit)."""
    d = rng.integers(0, 10, n_digits)
    d[-1] = rng.integers(1, 10)
    return tuple(int(x) for x in d)


def _fits(spec: DomainSpec, a: Digits, b: Digits) -> bool:
    return spec.operation != "add" or len(arith.school_add(a, b)) <= spec.l


def sample_pair(spec: DomainSpec, region: str, rng: np.random.Generator) -> tuple[Digits, Digits]:
    """Uniform operand pair from the seen, unseen or full domain.

    For multiplication the region constrains the multiplicand only. Addition
    pairs whose sum does not fit in l digits are redrawn.
    """
    if region not in ("seen", "unseen", "all"):
        raise ValueError(f"unknown region {region!r}")
    while True:
        if spec.operation == "add":
            n = spec.l_s if region == "seen" else spec.l
            a, b = random_digits(rng, n), random_digits(rng, n)
            if region == "unseen" and max(len(a), len(b)) <= spec.l_s:
                continue
        else:
            a = random_multiplier(rng, spec.multiplier_len)
            n = spec.l_s if region == "seen" else spec.l
            b = random_digits(rng, n)
            if region == "unseen" and len(b) <= spec.l_s:
                continue
        if _fits(spec, a, b):
            return a, b


def sample_length_pair(spec: DomainSpec, n_digits: int, rng: np.random.Generator) -> tuple[Digits, Digits]:
    """Uniform pair with operands below 10**n_digits (the multiplicand only, for mul)."""
    while True:
        if spec.operation == "add":
            a, b = random_digits(rng, n_digits), random_digits(rng, n_digits)
        else:
            a, b = random_multiplier(rng, spec.multiplier_len), random_digits(rng, n_digits)
        if _fits(spec, a, b):
            return a, b


def achievable_complexities(spec: DomainSpec) -> list[int]:
    """Complexity values reachable inside the seen domain."""
    if spec.operation == "add":
        return list(range(spec.l_s + 1))
    # dependency levels have no simple closed bound; enumerate when cheap
    la, ls = spec.multiplier_len, spec.l_s
    lo, hi = (1 if la == 1 else 10 ** (la - 1)), 10**la
    if (hi - lo) * 10**ls <= 2 * 10**6:
        mult = np.repeat(np.arange(lo, hi), 10**ls)
        vals = np.tile(np.arange(10**ls), hi - lo)
    else:
        rng = np.random.default_rng(0)
        mult = rng.integers(lo, hi, 10**6)
        vals = rng.integers(0, 10**ls, 10**6)
    digits = (vals[:, None] // 10 ** np.arange(ls)) % 10
    return sorted(set(arith.mul_levels(mult, digits, la).tolist()))


def sample_by_complexity(
    spec: DomainSpec,
    target: int,
    rng: np.random.Generator,
    budget: int = DEFAULT_REJECTION_BUDGET,
    chunk: int = 4096,
) -> tuple[Digits, Digits]:
    """Rejection-sample a seen-domain pair whose complexity equals ``target``."""
    drawn = 0
    la, ls = spec.multiplier_len, spec.l_s
    while drawn < budget:
        n = min(chunk, budget - drawn)
        drawn += n
        if spec.operation == "add":
            A = rng.integers(0, 10, (n, ls))
            B = rng.integers(0, 10, (n, ls))
            c = arith.cascade_lengths(A, B)
        else:
            A = rng.integers(0, 10, (n, la))
            A[:, -1] = rng.integers(1, 10, n)
            B = rng.integers(0, 10, (n, ls))
            mult = (A * 10 ** np.arange(la)).sum(axis=1)
            c = arith.mul_levels(mult, B, la)
        for k in np.flatnonzero(c == target):
            a, b = arith.canonical(A[k].tolist()), arith.canonical(B[k].tolist())
            if _fits(spec, a, b):
                return a, b
    raise ComplexityBudgetExceeded(f"no pair with complexity {target} in {budget} draws (l_s={ls})")


def augment_zero_shift(pair: tuple[Digits, Digits], shift: int, l: int) -> tuple[Digits, Digits]:
    """Multiply both operands by 10**shift (zeros appended on the right)."""
    if shift < 0:
        raise ValueError("shift must be non-negative")
    a, b = pair
    if len(a) + shift > l or len(b) + shift > l:
        raise ValueError(f"shifted operand exceeds l={l}")
    return (
        arith.canonical((0,) * shift + tuple(a)),
        arith.canonical((0,) * shift + tuple(b)),
    )


def interleave_text(
    sample: Sample, noise: TextNoiseSpec, rng: np.random.Generator, vocab: Vocab = VOCAB
) -> Sample:
    """Insert 0..max_tokens random text tokens before, between and after the operands.

    Layout: ``text A OP text B text``. Targets stay attached to the token they
    were attached to; text tokens are unsupervised. ``meta["spans"]`` is
    rewritten to the new operand blocks and ``meta["significance"]`` gives, for
    every position, the digit significance (1 = least significant) or 0.
    """
    spans = sample.meta["spans"]
    (a0, a1), (b0, b1) = spans
    gaps = rng.integers(0, noise.max_tokens + 1, 3)
    text = [rng.choice(vocab.text_ids(), g) for g in gaps]

    def piece(lo, hi):
        return sample.input_ids[lo:hi], sample.target_ids[lo:hi], sample.mask[lo:hi]

    def filler(tokens):
        n = len(tokens)
        return tokens, np.full(n, vocab.IGNORE), np.zeros(n, dtype=bool)

    parts = [filler(text[0]), piece(a0, b0), filler(text[1]), piece(b0, b1), filler(text[2])]
    inp = np.concatenate([p[0] for p in parts]).astype(np.int64)
    tgt = np.concatenate([p[1] for p in parts]).astype(np.int64)
    mask = np.concatenate([p[2] for p in parts])
    if noise.max_len is not None and len(inp) > noise.max_len:
        raise ValueError(f"interleaved sequence length {len(inp)} exceeds {noise.max_len}")

    na, nb = a1 - a0, b1 - b0
    new_a0 = int(gaps[0])
    new_b0 = new_a0 + (b0 - a0) + int(gaps[1])
    sig = np.zeros(len(inp), dtype=np.int64)
    sig[new_a0 : new_a0 + na] = np.arange(na, 0, -1)
    sig[new_b0 : new_b0 + nb] = np.arange(nb, 0, -1)
    meta = dict(sample.meta)
    meta["spans"] = [[new_a0, new_a0 + na], [new_b0, new_b0 + nb]]
    meta["significance"] = sig.tolist()
    meta["text_gaps"] = [int(g) for g in gaps]
    return Sample(inp, tgt, mask, meta)


def _shift_choices(spec: DomainSpec, a: Digits, b: Digits) -> list[int]:
    if spec.operation == "add":
        room = spec.l - max(len(a), len(b), len(arith.school_add(a, b)))
    else:
        room = spec.l - len(b)
    return list(range(room + 1))


def augmented_pairs(spec: DomainSpec, pair: tuple[Digits, Digits]) -> list[tuple[Digits, Digits]]:
    """Every feasible zero-shift of ``pair`` (shift 0 included).

    For multiplication only the multiplicand is shifted.
    """
    a, b = pair
    out = []
    for s in _shift_choices(spec, a, b):
        if spec.operation == "add":
            out.append(augment_zero_shift(pair, s, spec.l))
        else:
            out.append((a, arith.canonical((0,) * s + tuple(b))))
    return out


def draw_pair(spec: DomainSpec, sampler: SamplerSpec, rng: np.random.Generator, levels: list[int] | None = None):
    kind = sampler.kind
    if kind == "mixture":
        kind = "complexity_uniform" if rng.random() < sampler.mixture_p else "uniform"
    if kind == "uniform":
        return sample_pair(spec, "seen", rng)
    levels = levels if levels is not None else achievable_complexities(spec)
    target = int(rng.choice(levels))
    return sample_by_complexity(spec, target, rng, sampler.rejection_budget)


def dataset_stream(
    spec: DomainSpec,
    sampler: SamplerSpec,
    count: int,
    rng: np.random.Generator | None = None,
    vocab: Vocab = VOCAB,
) -> Iterator[Sample]:
    """Lazily yield ``count`` encoded training samples from the seen domain."""
    rng = rng if rng is not None else np.random.default_rng(sampler.seed)
    levels = achievable_complexities(spec) if sampler.kind != "uniform" else None
    for _ in range(count):
        a, b = draw_pair(spec, sampler, rng, levels)
        yield encode(spec, a, b, vocab)


def length_dataset(spec: DomainSpec, n_digits: int, count: int, rng: np.random.Generator, vocab: Vocab = VOCAB) -> list[Sample]:
    return [encode(spec, *sample_length_pair(spec, n_digits, rng), vocab) for _ in range(count)]


# ---------------------------------------------------------------- files


def write_dataset(path, samples, vocab: Vocab = VOCAB, header_extra: dict | None = None) -> int:
    """Newline-delimited JSON: one header record with the token table, then samples."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        header = {"header": True, "format": "lengen-dataset", "version": 1, "tokens": vocab.tokens}
        if header_extra:
            header.update(header_extra)
        fh.write(json.dumps(header) + "\n")
        for s in samples:
            fh.write(json.dumps(s.to_record()) + "\n")
            n += 1
    return n


def read_dataset(path, vocab: Vocab = VOCAB) -> tuple[dict, list[Sample]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if not header.get("header"):
            raise ValueError(f"{path}: missing header record")
        if header["tokens"] != vocab.tokens:
            raise ValueError(f"{path}: token table does not match vocabulary")
        samples = [Sample.from_record(json.loads(line)) for line in fh if line.strip()]
    return header, samples


def spec_dict(spec: DomainSpec) -> dict:
    return asdict(spec)
