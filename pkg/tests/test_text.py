import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avtts.text import (DEFAULT_INVENTORY, LETTER_NAMES, PAD_ID, SIL, UNK_ID, g2p, load_lexicon, normalize,
                        pad_batch, parse_lexicon)

SIL_ID = DEFAULT_INVENTORY.encode([SIL])[0]


def symbols(text, lexicon=None):
    return DEFAULT_INVENTORY.decode(g2p(text, lexicon).ids)


def test_reserved_ids():
    assert PAD_ID == 0 and UNK_ID == 1 and SIL_ID == 2
    assert DEFAULT_INVENTORY.symbols[0] != "AA1"


def test_inventory_is_bijective():
    syms = DEFAULT_INVENTORY.symbols[3:]
    assert len(set(syms)) == len(syms)
    assert DEFAULT_INVENTORY.decode(DEFAULT_INVENTORY.encode(syms)) == list(syms)


def test_unknown_symbol_maps_to_unk():
    assert DEFAULT_INVENTORY.encode(["QQ9"]) == [UNK_ID]


def test_cat_uses_bundled_lexicon():
    assert symbols("cat") == ["K", "AE1", "T"]


def test_repeated_word_has_one_silence_between():
    assert symbols("cat cat") == ["K", "AE1", "T", SIL, "K", "AE1", "T"]


def test_punctuation_becomes_silence_without_doubling():
    assert symbols("cat, cat") == ["K", "AE1", "T", SIL, "K", "AE1", "T"]
    assert symbols("cat.") == ["K", "AE1", "T"]


@pytest.mark.parametrize("text", ["", "   ", "!!!", ",.;"])
def test_empty_text_rejected(text):
    with pytest.raises(ValueError, match="no speakable content"):
        g2p(text)


def test_oov_falls_back_to_letter_names():
    lexicon = {"CAT": ["K", "AE1", "T"]}
    assert symbols("xq", lexicon) == LETTER_NAMES["X"].split() + LETTER_NAMES["Q"].split()


def test_case_insensitive():
    assert g2p("Cat").ids == g2p("cAT").ids


def test_normalize_lowercases_and_marks_pauses():
    assert normalize("Hello, World!") == ["hello", SIL, "world"]


def test_parse_lexicon_skips_comments_and_keeps_first_pronunciation():
    lex = parse_lexicon(["# comment", "CAT  K AE1 T", "CAT(1) K AA1 T", "", "DOG D AO1 G"])
    assert lex == {"CAT": ["K", "AE1", "T"], "DOG": ["D", "AO1", "G"]}


def test_load_lexicon_from_file(tmp_path):
    path = tmp_path / "lex.txt"
    path.write_text("ZORP Z AO1 R P\n", encoding="utf-8")
    assert symbols("zorp", load_lexicon(path)) == ["Z", "AO1", "R", "P"]


def test_bundled_lexicon_symbols_are_in_inventory():
    lex = load_lexicon()
    assert len(lex) > 100_000
    used = {p for pron in lex.values() for p in pron}
    assert used <= set(DEFAULT_INVENTORY.symbols)


def test_pad_batch_examples():
    ids, mask = pad_batch([[5, 7]], max_len=4)
    np.testing.assert_array_equal(ids, [[5, 7, 0, 0]])
    np.testing.assert_array_equal(mask, [[1, 1, 0, 0]])
    ids, mask = pad_batch([[3, 4], [5, 6]])
    np.testing.assert_array_equal(ids, [[3, 4], [5, 6]])
    assert mask.all()
    ids, _ = pad_batch([[3, 4], [5, 6, 7, 8, 9]])
    assert ids.shape == (2, 5)


def test_pad_batch_rejects_empty_and_short_max_len():
    with pytest.raises(ValueError):
        pad_batch([])
    with pytest.raises(ValueError):
        pad_batch([[3, 4, 5]], max_len=2)


@given(st.lists(st.lists(st.integers(3, 70), min_size=1, max_size=12), min_size=1, max_size=6))
def test_padding_preserves_prefix_and_mask(rows):
    ids, mask = pad_batch(rows)
    for i, row in enumerate(rows):
        assert list(ids[i, :len(row)]) == row
        assert (mask[i] == (ids[i] != PAD_ID)).all()
        assert not ids[i, len(row):].any()


@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz ,.", min_size=1, max_size=40))
def test_g2p_never_emits_pad_and_no_double_silence(text):
    try:
        seq = g2p(text)
    except ValueError:
        assert not any(c.isalpha() for c in text)
        return
    assert PAD_ID not in seq.ids
    assert seq.ids[0] != SIL_ID and seq.ids[-1] != SIL_ID
    assert all(not (a == b == SIL_ID) for a, b in zip(seq.ids, seq.ids[1:]))
    assert len(seq.mask) == len(seq.ids)
