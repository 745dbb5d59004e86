import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcasr.tokenizer import BASE_SIZE, Vocabulary, bpe_train

CORPUS = ["the cat sat on the mat", "a cat and a hat", "that is that"]


def test_single_candidate_pair():
    v = bpe_train(["aaaa"], BASE_SIZE + 1)
    assert v.merges == [(b"a", b"a")]
    assert len(v.pieces) == BASE_SIZE + 1


def test_hand_counted_merge():
    v = bpe_train(["abab abab"], BASE_SIZE + 1)
    assert v.merges == [(b"a", b"b")]


def test_tie_break_is_lexicographic():
    # "ab" and "cd" both occur twice; (a, b) sorts first
    v = bpe_train(["ab cd ab cd"], BASE_SIZE + 1)
    assert v.merges[0] in {(b" ", b"a"), (b"a", b"b")}
    assert v.merges[0] == min({(b" ", b"a"), (b"a", b"b"), (b" ", b"c"), (b"c", b"d")})


def test_blank_is_last_and_never_emitted():
    v = bpe_train(CORPUS, 300)
    assert v.blank_id == len(v.pieces) == v.size - 1
    for text in CORPUS:
        assert v.blank_id not in v.encode(text)


def test_decode_rejects_blank_and_unknown():
    v = bpe_train(CORPUS, 260)
    with pytest.raises(ValueError, match="blank"):
        v.decode([v.blank_id])
    with pytest.raises(ValueError):
        v.decode([v.blank_id + 5])
    assert v.decode([]) == ""


def test_errors():
    with pytest.raises(ValueError, match="empty"):
        bpe_train([], 256)
    with pytest.raises(ValueError, match="empty"):
        bpe_train([""], 256)
    with pytest.raises(ValueError):
        bpe_train(CORPUS, 100)


def test_training_is_deterministic(tmp_path):
    a, b = bpe_train(CORPUS, 280), bpe_train(CORPUS, 280)
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_file_round_trip(tmp_path):
    v = bpe_train(CORPUS, 280)
    v.save(tmp_path / "v.json")
    w = Vocabulary.load(tmp_path / "v.json")
    assert w.pieces == v.pieces and w.merges == v.merges
    assert w.encode("the hat") == v.encode("the hat")


def test_word_pieces_concatenate():
    v = bpe_train(CORPUS, 320)
    assert v.encode_words(["the", "cat"]) == v.encode("the") + v.encode("cat")
    assert v.starts_word(v.encode("cat")[0])


def test_stops_when_nothing_left_to_merge():
    v = bpe_train(["ab"], 10_000)
    assert len(v.pieces) < 300
    assert v.encode("ab") == [v.pieces.index(b" ab")]


_VOCAB = bpe_train(CORPUS + ["héllo wörld ☃", "ünïcode  spaces\ttab"], 330)


@settings(max_examples=1000, deadline=None)
@given(st.text(max_size=40))
def test_round_trip_and_no_blank(text):
    ids = _VOCAB.encode(text)
    assert _VOCAB.blank_id not in ids
    assert _VOCAB.decode(ids) == text
