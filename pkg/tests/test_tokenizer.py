import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinylm.tokenizer import EOT_MARKER, Tokenizer, load_tokenizer

DATA = Path(__file__).parent / "data"


def test_vocab_invariants(tok):
    assert tok.vocab_size == 50257
    assert tok.eot_id == 50256
    assert tok.decode([tok.eot_id]) == EOT_MARKER


def test_reference_encodings(tok):
    # ids generated once by an independent GPT-2 tokenizer run, frozen here
    ref = json.loads((DATA / "gpt2_reference_encodings.json").read_text())
    for text, ids in ref.items():
        assert tok.encode(text) == ids, f"mismatch for {text!r}"


def test_empty_and_simple(tok):
    assert tok.encode("") == []
    assert tok.decode([]) == ""
    assert tok.decode(tok.encode("hello world")) == "hello world"
    assert tok.decode(tok.encode("Sensor data")) == "Sensor data"


def test_ascii_never_expands(tok):
    text = "a" * 1024
    assert len(tok.encode(text)) <= 1024
    text2 = "".join(chr(33 + (i % 90)) for i in range(1024))
    assert len(tok.encode(text2)) <= 1024


def test_eot_marker_round_trip(tok):
    text = f"doc one{EOT_MARKER}doc two"
    ids = tok.encode(text)
    assert ids.count(tok.eot_id) == 1
    assert tok.decode(ids) == text
    assert tok.encode(EOT_MARKER) == [tok.eot_id]


def test_eot_never_emitted_without_marker(tok):
    for text in ["endoftext", "<|end|>", "<| endoftext |>", "50256"]:
        assert tok.eot_id not in tok.encode(text)


def test_bounded_ids(tok):
    for text in ["hello", "ünïcödé", "数字 123", "\n\t x"]:
        assert all(0 <= i < 50257 for i in tok.encode(text))


def test_decode_out_of_range(tok):
    with pytest.raises(ValueError, match="out of range"):
        tok.decode([50257])
    with pytest.raises(ValueError, match="out of range"):
        tok.decode([-1])


def test_every_id_decodes_nonempty(tok):
    # spot-check the full range cheaply: ends plus a stride over the middle
    ids = list(range(0, 50257, 257)) + [0, 50255, 50256]
    for i in ids:
        assert len(tok.decoder[int(i)]) > 0


@settings(max_examples=1000, deadline=None)
@given(st.text(max_size=80))
def test_round_trip_property(tok, s):
    assert tok.decode(tok.encode(s)) == s


def test_determinism(tok):
    text = "Proximity: [2, 10, 23] and some ünicode"
    first = tok.encode(text)
    fresh = load_tokenizer()
    assert fresh.encode(text) == first == tok.encode(text)


def test_load_missing_asset(tmp_path):
    with pytest.raises(FileNotFoundError, match="asset not found"):
        load_tokenizer(merges_asset=tmp_path / "nope.txt")


def test_load_vocab_size_mismatch(tmp_path):
    vocab_path = tmp_path / "small_vocab.json"
    vocab_path.write_text(json.dumps({f"t{i}": i for i in range(10)}))
    with pytest.raises(ValueError, match="vocab size mismatch"):
        load_tokenizer(vocab_asset=vocab_path)


def test_load_malformed_vocab(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError, match="malformed vocab"):
        load_tokenizer(vocab_asset=bad)


def test_load_malformed_merges(tmp_path):
    bad = tmp_path / "bad_merges.txt"
    bad.write_text("#version: 0.2\na b c d\n")
    with pytest.raises(ValueError, match="malformed merges"):
        load_tokenizer(merges_asset=bad)
