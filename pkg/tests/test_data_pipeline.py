import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinylm import data
from tinylm.shards import (
    HEADER_SIZE,
    MIN_SHARD_SIZE,
    SHARD_MAGIC,
    ShardWriter,
    iter_documents,
    read_shard,
    read_stream,
    shard_paths,
    write_shard,
)


class FakeTok:
    """Word-per-token stub: deterministic counts for shard arithmetic."""

    eot_id = 50256

    def encode(self, text):
        return [hash(word) % 50000 for word in text.split()]


# ---------------------------------------------------------------------------
# normalize_series

def test_normalize_endpoints():
    assert data.normalize_series([0.0], 0.0, 10.0).tolist() == [0]
    assert data.normalize_series([10.0], 0.0, 10.0).tolist() == [100]


def test_normalize_midpoint():
    assert data.normalize_series([5.0], 0.0, 10.0).tolist() == [50]


def test_normalize_proximity_range():
    # hand-computed round(100*v/255) for a 0..255 sensor range
    assert data.normalize_series([2, 10, 23], 0, 255).tolist() == [1, 4, 9]


def test_normalize_degenerate_range():
    assert data.normalize_series([7.0, 7.0], 7.0, 7.0).tolist() == [0, 0]


def test_normalize_clamps():
    assert data.normalize_series([-5.0, 15.0], 0.0, 10.0).tolist() == [0, 100]


def test_normalize_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        data.normalize_series([float("nan")], 0.0, 1.0)
    with pytest.raises(ValueError):
        data.normalize_series([1.0], 5.0, 2.0)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20),
    st.floats(-1e6, 1e6),
    st.floats(0.0, 1e6),
)
def test_normalize_bounds_and_monotone(values, lo, span):
    hi = lo + span
    out = data.normalize_series(values, lo, hi)
    assert np.all(out >= 0) and np.all(out <= 100)
    order = np.argsort(values)
    assert np.all(np.diff(out[order]) >= 0)


# ---------------------------------------------------------------------------
# transform_table

def _gesture_table():
    return data.SensorTable(
        columns=[
            data.SensorColumn("Proximity", "", np.array([2.0, 10.0, 23.0])),
            data.SensorColumn("Red", "", np.array([244.0, 243.0, 20.0])),
            data.SensorColumn("Blue", "", np.array([255.0, 255.0, 255.0])),
            data.SensorColumn("Green", "", np.array([200.0, 201.0, 45.0])),
        ]
    )


def test_transform_single_column_shape():
    table = data.SensorTable(
        columns=[data.SensorColumn("Proximity", "", np.array([42.0]))]
    )
    tmpl = data.PromptTemplateConfig(context_text="Context line.", column_order=["Proximity"])
    docs = data.transform_table(table, tmpl, {"Proximity": (0, 100)})
    assert docs == ["Context line.\nProximity: [42]"]


def test_transform_gesture_layout():
    tmpl = data.PromptTemplateConfig(
        context_text="Readings normalized to 0-100.",
        column_order=["Proximity", "Red", "Blue", "Green"],
    )
    ranges = {name: (0.0, 255.0) for name in tmpl.column_order}
    docs = data.transform_table(_gesture_table(), tmpl, ranges)
    assert len(docs) == 1
    lines = docs[0].split("\n")
    assert lines[1].startswith("Proximity: [")
    assert lines[2].startswith("Red: [")
    assert lines[3].startswith("Blue: [")
    assert lines[4].startswith("Green: [")
    assert lines[1] == "Proximity: [1, 4, 9]"


def test_transform_row_groups():
    table = data.SensorTable(
        columns=[data.SensorColumn("a", "", np.arange(6, dtype=float))]
    )
    tmpl = data.PromptTemplateConfig(context_text="ctx", column_order=["a"])
    docs = data.transform_table(table, tmpl, {"a": (0, 5)}, rows_per_group=2)
    assert len(docs) == 3


def test_transform_empty_table():
    table = data.SensorTable(columns=[data.SensorColumn("a", "", np.array([]))])
    tmpl = data.PromptTemplateConfig(context_text="c", column_order=["a"])
    with pytest.raises(ValueError, match="empty table"):
        data.transform_table(table, tmpl, {"a": (0, 1)})


def test_transform_missing_range():
    tmpl = data.PromptTemplateConfig(context_text="c", column_order=["Proximity"])
    with pytest.raises(ValueError, match="no normalization range"):
        data.transform_table(_gesture_table(), tmpl, {})


def test_transform_missing_column():
    tmpl = data.PromptTemplateConfig(context_text="c", column_order=["Nope"])
    with pytest.raises(KeyError):
        data.transform_table(_gesture_table(), tmpl, {"Nope": (0, 1)})


def test_clean_text():
    assert data.clean_text("a   b\t c\x00\x07") == "a b c"
    assert data.clean_text("  line one  \n  line   two  ") == "line one\nline two"


def test_sensor_table_validation():
    with pytest.raises(ValueError, match="unequal"):
        data.SensorTable(
            columns=[
                data.SensorColumn("a", "", np.array([1.0])),
                data.SensorColumn("b", "", np.array([1.0, 2.0])),
            ]
        )
    with pytest.raises(ValueError, match="non-decreasing"):
        data.SensorTable(
            columns=[data.SensorColumn("a", "", np.array([1.0, 2.0]))],
            timestamps=np.array([2.0, 1.0]),
        )


def test_sensor_table_from_csv(tmp_path):
    csv_path = tmp_path / "t.csv"
    csv_path.write_text("ts,prox,label\n1,10,Tap\n2,20,Hold\n")
    table = data.SensorTable.from_csv(csv_path, timestamp_column="ts")
    assert [c.name for c in table.columns] == ["prox"]
    assert table.timestamps is not None and table.timestamps.tolist() == [1.0, 2.0]


# ---------------------------------------------------------------------------
# shard files

def test_shard_file_bit_layout(tmp_path):
    tokens = np.array([1, 2, 50256], dtype=np.uint16)
    shard = write_shard(tmp_path / "shard_000000.bin", tokens)
    raw = shard.path.read_bytes()
    assert raw[:8] == SHARD_MAGIC
    version, reserved, count = struct.unpack("<IIQ", raw[8:24])
    assert (version, reserved, count) == (1, 0, 3)
    assert raw[24:] == tokens.astype("<u2").tobytes()
    assert len(raw) == HEADER_SIZE + 2 * shard.token_count


def test_shard_roundtrip_and_validation(tmp_path):
    tokens = np.arange(1000, dtype=np.uint16)
    shard = write_shard(tmp_path / "shard_000000.bin", tokens)
    assert np.array_equal(read_shard(shard.path), tokens)
    # truncation detected
    raw = shard.path.read_bytes()
    shard.path.write_bytes(raw[:-10])
    with pytest.raises(ValueError, match="expected file size"):
        read_shard(shard.path)


def test_shard_writer_rolls_at_limit(tmp_path):
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 50257, size=600_000).astype(np.uint16)
    with ShardWriter(tmp_path, MIN_SHARD_SIZE) as writer:
        for start in range(0, tokens.size, 1234):
            writer.append(tokens[start : start + 1234])
    shards = writer.shards
    assert len(shards) == 2
    assert shards[0].token_count == MIN_SHARD_SIZE // 2  # non-final shard exactly full
    assert shards[1].token_count == tokens.size - MIN_SHARD_SIZE // 2
    assert np.array_equal(read_stream(tmp_path), tokens)  # concatenation lossless


def test_shard_writer_rejects_small_limit(tmp_path):
    with pytest.raises(ValueError, match="shard_size_limit"):
        ShardWriter(tmp_path, 1024)


# ---------------------------------------------------------------------------
# tokenize_corpus

def test_tokenize_corpus_counts(tmp_path):
    docs = ["w0 w1 w2 w3 w4 w5 w6 w7 w8 w9"] * 3  # 10 tokens each under FakeTok
    shards = data.tokenize_corpus(docs, FakeTok(), MIN_SHARD_SIZE, tmp_path)
    assert len(shards) == 1
    assert shards[0].token_count == 33  # 30 + 3 eot separators
    stream = read_stream(tmp_path)
    assert int((stream == FakeTok.eot_id).sum()) == 3  # one eot per document
    assert stream[10] == FakeTok.eot_id


def test_tokenize_corpus_empty(tmp_path):
    assert data.tokenize_corpus([], FakeTok(), MIN_SHARD_SIZE, tmp_path) == []


def test_tokenize_corpus_spans_shards(tmp_path):
    # 700k one-token docs: stream must split and reconcatenate losslessly
    docs = ["w"] * 350_000
    shards = data.tokenize_corpus(docs, FakeTok(), MIN_SHARD_SIZE, tmp_path)
    assert len(shards) == 2
    stream = read_stream(tmp_path)
    assert stream.size == 700_000
    assert int((stream == FakeTok.eot_id).sum()) == 350_000


def test_iter_documents_across_boundaries(tmp_path):
    eot = 50256
    docs = [np.array([i % 50000, i % 50000, eot], dtype=np.uint16) for i in range(200_000)]
    with ShardWriter(tmp_path, MIN_SHARD_SIZE) as writer:
        for doc in docs:
            writer.append(doc)
    assert len(writer.shards) >= 2
    seen = list(iter_documents(shard_paths(tmp_path), eot))
    assert len(seen) == 200_000
    assert all(d[-1] == eot for d in seen)
    assert np.array_equal(seen[123456], docs[123456])


def test_iter_text_documents(tmp_path):
    path = tmp_path / "docs.txt"
    path.write_text("doc one line a\ndoc one line b\n\n\ndoc two\n")
    assert list(data.iter_text_documents(path)) == ["doc one line a\ndoc one line b", "doc two"]


# ---------------------------------------------------------------------------
# mixing

def _write_source(directory, n_docs, doc_len, base, eot=50256, seed=0):
    rng = np.random.default_rng(seed)
    with ShardWriter(directory, MIN_SHARD_SIZE) as writer:
        for _ in range(n_docs):
            body = rng.integers(base, base + 100, size=doc_len - 1)
            writer.append(np.append(body, eot).astype(np.uint16))
    return writer.shards


def test_mix_identity(tmp_path):
    src = tmp_path / "src"
    _write_source(src, 50, 10, base=0)
    original = read_stream(src)
    spec = data.MixSpec(sources=[(src, 1.0)], seed=1)
    result = data.mix_shards(spec, tmp_path / "out", eot_id=50256)
    assert np.array_equal(read_stream(tmp_path / "out"), original)
    assert result.total_tokens == original.size


def test_mix_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _write_source(a, 200, 12, base=0, seed=1)
    _write_source(b, 200, 8, base=200, seed=2)
    for out_name in ("out1", "out2"):
        spec = data.MixSpec(sources=[(a, 0.4), (b, 0.6)], seed=77)
        data.mix_shards(spec, tmp_path / out_name, eot_id=50256)
    files1 = sorted((tmp_path / "out1").glob("*.bin"))
    files2 = sorted((tmp_path / "out2").glob("*.bin"))
    assert [f.name for f in files1] == [f.name for f in files2]
    for f1, f2 in zip(files1, files2):
        assert f1.read_bytes() == f2.read_bytes()


def test_mix_shares_converge(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _write_source(a, 4000, 10, base=0, seed=1)
    _write_source(b, 4000, 10, base=200, seed=2)
    spec = data.MixSpec(sources=[(a, 0.3), (b, 0.7)], seed=5, target_tokens=30_000)
    result = data.mix_shards(spec, tmp_path / "out", eot_id=50256)
    shares = result.realized_shares()
    assert abs(shares[str(a)] - 0.3) < 0.05
    assert abs(shares[str(b)] - 0.7) < 0.05


def test_mix_chi_square_over_seeds(tmp_path):
    scipy_stats = pytest.importorskip("scipy.stats")
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for directory, seed in ((a, 1), (b, 2), (c, 3)):
        _write_source(directory, 3000, 10, base=0, seed=seed)
    ratios = (0.2, 0.3, 0.5)
    total_chi2 = 0.0
    seeds = range(10)
    for seed in seeds:
        spec = data.MixSpec(
            sources=[(a, ratios[0]), (b, ratios[1]), (c, ratios[2])],
            seed=seed,
            target_tokens=20_000,
        )
        result = data.mix_shards(spec, tmp_path / f"out{seed}", eot_id=50256)
        counts = np.array([result.source_tokens[str(d)] / 10 for d in (a, b, c)])
        n = counts.sum()
        expected = n * np.array(ratios)
        total_chi2 += float(((counts - expected) ** 2 / expected).sum())
    p_value = 1.0 - scipy_stats.chi2.cdf(total_chi2, df=len(seeds) * 2)
    assert p_value > 0.001


def test_mix_exhausted_source_renormalizes(tmp_path, caplog):
    a, b = tmp_path / "a", tmp_path / "b"
    _write_source(a, 5, 10, base=0)  # tiny: exhausts quickly
    _write_source(b, 500, 10, base=200)
    spec = data.MixSpec(sources=[(a, 0.5), (b, 0.5)], seed=3)
    with caplog.at_level("WARNING"):
        result = data.mix_shards(spec, tmp_path / "out", eot_id=50256)
    assert result.total_tokens == 5050  # everything drained
    assert any("exhausted" in rec.message for rec in caplog.records)


def test_mix_validation(tmp_path):
    with pytest.raises(ValueError, match="sum to 1"):
        data.MixSpec(sources=[("x", 0.5), ("y", 0.6)])
    with pytest.raises(ValueError, match="at least one source"):
        data.MixSpec(sources=[])
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ValueError, match="empty source"):
        data.mix_shards(data.MixSpec(sources=[(empty, 1.0)]), tmp_path / "out", 50256)


# ---------------------------------------------------------------------------
# splitting

def test_split_band_and_partition(tmp_path):
    src = tmp_path / "src"
    _write_source(src, 10_000, 10, base=0)
    train, val = data.split_dataset(
        src, 0.98, seed=11, train_dir=tmp_path / "train", val_dir=tmp_path / "val", eot_id=50256
    )
    train_stream = read_stream(tmp_path / "train")
    val_stream = read_stream(tmp_path / "val")
    n_train_docs = int((train_stream == 50256).sum())
    n_val_docs = int((val_stream == 50256).sum())
    assert n_train_docs + n_val_docs == 10_000
    assert 9750 <= n_train_docs <= 9850  # hash-uniformity band for 98:2
    # multiset of documents preserved
    src_docs = sorted(tuple(d) for d in iter_documents(shard_paths(src), 50256))
    out_docs = sorted(
        [tuple(d) for d in iter_documents(shard_paths(tmp_path / "train"), 50256)]
        + [tuple(d) for d in iter_documents(shard_paths(tmp_path / "val"), 50256)]
    )
    assert src_docs == out_docs


def test_split_two_docs_partition(tmp_path):
    src = tmp_path / "src"
    _write_source(src, 2, 10, base=0)
    union_sizes = set()
    one_each = False
    for seed in range(12):
        train, val = data.split_dataset(
            src,
            0.5,
            seed=seed,
            train_dir=tmp_path / f"t{seed}",
            val_dir=tmp_path / f"v{seed}",
            eot_id=50256,
        )
        n_t = sum(s.token_count for s in train)
        n_v = sum(s.token_count for s in val)
        union_sizes.add(n_t + n_v)
        if n_t == n_v == 10:
            one_each = True
    assert union_sizes == {20}
    assert one_each


def test_split_deterministic(tmp_path):
    src = tmp_path / "src"
    _write_source(src, 100, 10, base=0)
    for tag in ("x", "y"):
        data.split_dataset(
            src, 0.8, seed=9, train_dir=tmp_path / f"train{tag}", val_dir=tmp_path / f"val{tag}",
            eot_id=50256,
        )
    a = read_stream(tmp_path / "trainx")
    b = read_stream(tmp_path / "trainy")
    assert np.array_equal(a, b)


def test_split_validation(tmp_path):
    src = tmp_path / "src"
    _write_source(src, 3, 10, base=0)
    with pytest.raises(ValueError, match="train_ratio"):
        data.split_dataset(src, 1.5, 0, tmp_path / "t", tmp_path / "v", 50256)
    empty = tmp_path / "none"
    empty.mkdir()
    with pytest.raises(ValueError, match="empty input"):
        data.split_dataset(empty, 0.9, 0, tmp_path / "t2", tmp_path / "v2", 50256)
