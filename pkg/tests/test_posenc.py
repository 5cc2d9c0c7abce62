import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lengen import arith, datagen, posenc
from lengen.posenc import NONE, PEScheme


@given(st.integers(2, 30), st.integers(1, 40))
def test_rpe_slots_depend_only_on_offset(T, max_offset):
    sch = PEScheme("rpe", max_len=T, max_offset=max_offset)
    S = posenc.slot_matrix(sch, T)
    i, j = np.indices((T, T))
    expect = np.clip(i - j, -max_offset, max_offset) + max_offset
    assert np.array_equal(S, expect)
    assert S.max() < sch.n_slots


def test_rpe_circular_wraps():
    sch = PEScheme("rpe", max_len=8, max_offset=8, circular=True)
    S = posenc.slot_matrix(sch, 8)
    assert S[0, 7] == S[1, 0]  # offset -7 wraps to +1
    assert posenc.pairwise_slot(sch, 0, 7, T=8) == S[0, 7]


@given(st.integers(1, 3), st.integers(3, 12))
def test_upe_uniform_columns(la, l):
    sch = posenc.upe_for_mul(l, la)
    T = l + la + 1
    S = posenc.slot_matrix(sch, T)
    for k in range(la):
        assert np.all(S[:, k] == S[0, k])
        assert sch.slot_label(S[0, k]) == f"c{k + 1}"
    rest = S[:, la:]
    assert rest.max() < 2 * sch.max_offset + 1


def test_non_pairwise_variants_have_no_slots():
    for v in ("nope", "ape"):
        sch = PEScheme(v)
        assert not sch.pairwise and sch.n_slots == 0
        assert np.all(posenc.slot_matrix(sch, 5) == NONE)
    with pytest.raises(ValueError):
        PEScheme("bogus")


def test_significance_slots():
    s = datagen.encode_add(arith.to_digits(12), arith.to_digits(345), 3)
    sch = PEScheme("sigrpe", max_len=7, max_offset=3)
    S = posenc.slot_matrix(sch, 7, s.meta)
    assert np.all(S[3, :] == NONE) and np.all(S[:, 3] == NONE)  # operator token
    # units digit of a (pos 2) vs units digit of b (pos 6): same significance, cross pair
    assert sch.slot_label(S[2, 6]) == "AB+0"
    assert sch.slot_label(S[6, 4]) == "BB-2"
    assert S[2, 6] != S[6, 2]


def test_gather_slots_zeroes_missing():
    table = np.arange(6.0).reshape(3, 2)
    slots = np.array([[0, -1], [2, 1]])
    out = posenc.gather_slots(table, slots)
    assert out[0, 1].tolist() == [0.0, 0.0] and out[1, 0].tolist() == [4.0, 5.0]


def test_export_positional_map(tmp_path):
    sch = PEScheme("rpe", max_len=4, max_offset=2)
    table = np.random.default_rng(0).standard_normal((sch.n_slots, 3))
    paths = posenc.export_positional_map([table, table * 2], sch, tmp_path / "pm")
    assert len(paths) == 2
    with open(paths[1]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["slot", "label", "c0", "c1", "c2"]
    assert rows[1][1] == "-2" and rows[3][1] == "+0"
    assert float(rows[2][3]) == table[1, 1] * 2
