import pytest
from hypothesis import given, strategies as st

from embrec.errors import FormatError
from embrec.text import (OOV_ID, PAD, PAD_ID, OOV, Vocabulary, aspect_token, aspect_tokens, build_vocab, encode,
                         load_vocab, save_vocab, tokenize)


def test_tokenize_examples():
    assert tokenize("Apple iPhone-11, 64GB!") == ["apple", "iphone", "11", "64gb"]
    assert tokenize("") == []
    assert tokenize("___---") == []


def test_tokenize_non_ascii_letters_are_separators():
    assert tokenize("Café Crème") == ["caf", "cr", "me"]


@given(st.text())
def test_tokenize_is_idempotent_and_clean(text):
    toks = tokenize(text)
    assert tokenize(" ".join(toks)) == toks
    assert all(t and t.isascii() and t.isalnum() and t == t.lower() for t in toks)


def test_build_vocab_ordering():
    v = build_vocab(["a", "b", "a", "a"], max_size=10)
    assert v.tokens == (PAD, OOV, "a", "b")
    assert v.lookup("a") == 2 and v.lookup("b") == 3


def test_build_vocab_tie_break_is_lexicographic():
    v = build_vocab(["b", "a"] * 3, max_size=3)
    assert v.tokens == (PAD, OOV, "a")


def test_build_vocab_min_frequency():
    v = build_vocab(["a", "a", "a", "b"], max_size=10, min_frequency=2)
    assert "b" not in v.index
    assert v.lookup("b") == OOV_ID


def test_build_vocab_rejects_tiny_max_size():
    with pytest.raises(ValueError):
        build_vocab(["a"], max_size=1)


def test_build_vocab_is_deterministic():
    stream = "z y x y z z q".split()
    assert build_vocab(stream, 5).tokens == build_vocab(list(stream), 5).tokens


def test_encode_examples():
    v = build_vocab(["a"], 10)
    assert encode(v, ["a", "zzz"]) == [2, 1]
    assert encode(v, []) == []


@given(st.lists(st.sampled_from("abcdefgh"), max_size=40), st.lists(st.text(max_size=3), max_size=20))
def test_encode_bounds_and_round_trip(stream, probe):
    v = build_vocab(stream, 6)
    ids = encode(v, probe)
    assert all(0 <= i < len(v) for i in ids)
    in_vocab = list(range(len(v)))
    assert encode(v, v.decode(in_vocab)) == in_vocab


def test_reserved_ids():
    v = build_vocab([], 2)
    assert v.tokens == (PAD, OOV)
    assert (PAD_ID, OOV_ID) == (0, 1)


def test_aspect_tokens_keep_pairs_as_units():
    assert aspect_token("Brand:Apple") == "brand:apple"
    assert aspect_token("Screen Size: 6.1 in") == "screen_size:6_1_in"
    assert aspect_token("!!:??") is None
    assert aspect_tokens(["Color:Red", "::", "Storage:64GB"]) == ["color:red", "storage:64gb"]


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab("the cat sat on the mat the end".split(), 6, 1)
    p = tmp_path / "v.txt"
    save_vocab(v, p)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("#") and lines[1:3] == [PAD, OOV]
    w = load_vocab(p)
    assert w == v and w.index == v.index


def test_vocab_file_needs_header(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text(f"{PAD}\n{OOV}\n")
    with pytest.raises(FormatError):
        load_vocab(p)


def test_vocabulary_requires_reserved_prefix():
    with pytest.raises(FormatError):
        Vocabulary(("a", "b"), 2)
