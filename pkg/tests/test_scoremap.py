import numpy as np
import pytest

from tlkit.errors import AnnotationError, ConfigError, CropError, DegenerateCellError, FormatError
from tlkit.scoremap import (
    HEADER,
    CropBox,
    DenseScoreMap,
    SparseScoreMap,
    align_crop,
    annotate,
    decode_file,
    densify,
    encode_file,
    load_scoremap_dir,
    read_manifest,
    sparsify_topk,
    uniform_annotator,
    write_manifest,
    write_scoremap,
)
from tlkit.synth import DatasetConfig, Shape, SynthSample, oracle_annotator

U = 2.0**-11


def random_map(rng, h, w, k, source=(64, 64), alpha=0.5):
    return DenseScoreMap(rng.dirichlet(np.full(k, alpha), size=(h, w)), source)


def test_uniform_annotator():
    dense = annotate(uniform_annotator(7, (3, 5), (30, 50)), object())
    assert dense.scores.shape == (3, 5, 7)
    np.testing.assert_array_equal(dense.scores, 1 / 7)


def test_annotation_error_on_bad_cell():
    def bad(image):
        s = np.full((2, 2, 3), 1 / 3)
        s[1, 0] = [0.5, 0.5, 0.5]
        return DenseScoreMap(s, (8, 8))

    with pytest.raises(AnnotationError):
        annotate(bad, None)


def test_oracle_annotator_one_shape():
    cfg = DatasetConfig()
    sq = Shape(cfg.class_of("square", "red"), "square", (24.0, 24.0), 32.0)  # covers [8, 40)
    sample = SynthSample(np.zeros((3, 64, 64), np.float32), sq.class_id, [sq], 0)
    dense = annotate(oracle_annotator(cfg), sample)
    inside = np.zeros((16, 16), bool)
    inside[2:10, 2:10] = True
    np.testing.assert_array_equal(dense.scores[inside][:, sq.class_id], 1.0)
    np.testing.assert_array_equal(dense.scores[~inside][:, sq.class_id], 0.0)
    np.testing.assert_array_equal(dense.scores[~inside][:, cfg.background_class], 1.0)


def test_topk_selection():
    dense = DenseScoreMap(np.array([[[0.5, 0.3, 0.1, 0.1]]]), (4, 4))
    sp = sparsify_topk(dense, 2)
    np.testing.assert_array_equal(sp.class_ids[0, 0], [0, 1])
    np.testing.assert_array_equal(sp.probs[0, 0], np.array([0.5, 0.3], np.float16))


def test_topk_ties_prefer_smaller_id():
    dense = DenseScoreMap(np.array([[[0.2, 0.3, 0.3, 0.2]]]), (4, 4))
    sp = sparsify_topk(dense, 3)
    np.testing.assert_array_equal(sp.class_ids[0, 0], [1, 2, 0])


def test_topk_bounds():
    dense = DenseScoreMap(np.full((1, 1, 3), 1 / 3), (4, 4))
    for k in (0, 4):
        with pytest.raises(ConfigError):
            sparsify_topk(dense, k)


def test_k_equals_num_classes_is_lossless_up_to_fp16():
    rng = np.random.default_rng(0)
    dense = random_map(rng, 4, 4, 6)
    sp = sparsify_topk(dense, 6)
    back = np.zeros_like(dense.scores)
    np.put_along_axis(back, sp.class_ids.astype(np.intp), sp.probs.astype(np.float64), axis=-1)
    np.testing.assert_array_equal(back, dense.scores.astype(np.float16).astype(np.float64))
    restored = densify(sp).scores
    # renormalizing fp16 values that summed to 1 +- a few ulps
    np.testing.assert_allclose(restored, dense.scores, rtol=0, atol=4 * U)


def test_fp16_rounding_is_nearest_even():
    # 1 + 2^-11 is halfway between fp16 neighbours 1 and 1 + 2^-10; ties go to even (1)
    dense = DenseScoreMap(np.array([[[1 + U, 0.0]]]) / (1 + U), (1, 1))
    sp = sparsify_topk(dense, 1)
    vals = np.array([1 + U, 1 + 3 * U])
    assert list(vals.astype(np.float16).astype(np.float64)) == [1.0, 1 + 4 * U]
    assert sp.probs.dtype == np.float16


def test_sparsify_round_trip_error_bound():
    rng = np.random.default_rng(1)
    for k in (1, 3, 5):
        dense = random_map(rng, 8, 8, 12, alpha=0.3)
        sp = sparsify_topk(dense, k)
        stored = sp.probs.astype(np.float64)
        exact = np.take_along_axis(dense.scores, sp.class_ids.astype(np.intp), axis=-1)
        # binary16 rounding of each kept probability
        assert np.all(np.abs(stored - exact) <= np.maximum(np.abs(exact), 2.0**-14) * U)
        # densify matches exact renormalization over the kept classes
        ref = exact / exact.sum(axis=-1, keepdims=True)
        got = np.take_along_axis(densify(sp).scores, sp.class_ids.astype(np.intp), axis=-1)
        assert np.abs(got - ref).max() <= U


def test_densify_examples():
    sp = SparseScoreMap(np.array([[[3]]], np.uint16), np.array([[[0.5]]], np.float16), 5, (8, 8))
    np.testing.assert_array_equal(densify(sp).scores[0, 0], [0, 0, 0, 1.0, 0])
    sp = SparseScoreMap(np.array([[[0, 1]]], np.uint16), np.array([[[0.5, 0.3]]], np.float16), 3, (8, 8))
    out = densify(sp).scores[0, 0]
    assert out[0] == pytest.approx(0.625, abs=1e-3) and out[1] == pytest.approx(0.375, abs=1e-3)
    # exact with respect to the stored fp16 values
    p = np.float16(0.3).astype(np.float64)
    assert out[1] == p / (0.5 + p)


def test_densify_degenerate():
    sp = SparseScoreMap(np.array([[[0, 1]]], np.uint16), np.zeros((1, 1, 2), np.float16), 3, (8, 8))
    with pytest.raises(DegenerateCellError):
        densify(sp)


def test_argmax_preserved():
    rng = np.random.default_rng(2)
    dense = random_map(rng, 6, 6, 10, alpha=0.4)
    for k in range(1, 11):
        got = densify(sparsify_topk(dense, k)).scores.argmax(axis=-1)
        np.testing.assert_array_equal(got, dense.scores.argmax(axis=-1))


def test_codec_round_trip():
    rng = np.random.default_rng(3)
    for k in (1, 5):
        sp = sparsify_topk(random_map(rng, 5, 7, 11, source=(50, 70)), k)
        blob = encode_file(sp)
        assert decode_file(blob) == sp
        assert encode_file(decode_file(blob)) == blob


def test_codec_header_layout():
    sp = sparsify_topk(DenseScoreMap(np.full((2, 3, 4), 0.25), (20, 30)), 2)
    blob = encode_file(sp)
    assert blob[:4] == b"TLSM"
    assert HEADER.size == 19
    assert HEADER.unpack_from(blob) == (b"TLSM", 1, 4, 2, 3, 2, 20, 30)
    # first record: class 0 (tie -> smaller id), prob 0.25 as binary16
    assert blob[19:23] == np.uint16(0).tobytes() + np.float16(0.25).tobytes()


def test_codec_size_for_imagenet_shape():
    dense = DenseScoreMap(np.full((18, 18, 1000), 1e-3), (224, 224))
    blob = encode_file(sparsify_topk(dense, 5))
    assert len(blob) == HEADER.size + 6480


def test_codec_errors():
    sp = sparsify_topk(random_map(np.random.default_rng(4), 3, 3, 6), 3)
    blob = encode_file(sp)
    with pytest.raises(FormatError) as exc:
        decode_file(b"XXXX" + blob[4:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError) as exc:
        decode_file(blob[:10])
    assert exc.value.offset == 10
    with pytest.raises(FormatError) as exc:
        decode_file(blob[:-1])
    assert exc.value.offset == len(blob) - 1
    with pytest.raises(FormatError) as exc:
        decode_file(blob + b"\0\0")
    assert exc.value.offset == len(blob)
    # duplicate class id in the second cell
    bad = bytearray(blob)
    cell = HEADER.size + 1 * 3 * 4
    bad[cell + 4 : cell + 6] = bad[cell : cell + 2]
    with pytest.raises(FormatError) as exc:
        decode_file(bytes(bad))
    assert exc.value.offset == cell
    # class id out of range
    bad = bytearray(blob)
    bad[HEADER.size : HEADER.size + 2] = np.uint16(6).tobytes()
    with pytest.raises(FormatError) as exc:
        decode_file(bytes(bad))
    assert exc.value.offset == HEADER.size


def test_encode_rejects_unsorted():
    sp = SparseScoreMap(np.array([[[0, 1]]], np.uint16), np.array([[[0.2, 0.6]]], np.float16), 3, (4, 4))
    with pytest.raises(FormatError):
        encode_file(sp)


def test_manifest_and_directory(tmp_path):
    rng = np.random.default_rng(5)
    maps = {i: sparsify_topk(random_map(rng, 2, 2, 4), 2) for i in (3, 8)}
    rows = []
    for sid, sp in maps.items():
        write_scoremap(tmp_path / f"{sid}.tlsm", sp)
        rows.append((sid, f"{sid}.tlsm", sid % 4))
    write_manifest(tmp_path / "manifest.tsv", rows)
    assert (tmp_path / "manifest.tsv").read_text() == "3\t3.tlsm\t3\n8\t8.tlsm\t0\n"
    assert read_manifest(tmp_path / "manifest.tsv") == rows
    loaded = load_scoremap_dir(tmp_path)
    assert set(loaded) == {3, 8} and all(loaded[k] == maps[k] for k in maps)


def test_align_identity():
    rng = np.random.default_rng(6)
    dense = random_map(rng, 4, 4, 5, source=(64, 64))
    out = align_crop(dense, CropBox(0, 0, 64, 64), 4)
    np.testing.assert_allclose(out, dense.scores.reshape(16, 5), rtol=0, atol=1e-12)


def test_align_constant_map():
    dense = DenseScoreMap(np.tile([0.1, 0.6, 0.3], (5, 7, 1)), (50, 70))
    rng = np.random.default_rng(7)
    for _ in range(20):
        x0, y0 = rng.uniform(0, 60), rng.uniform(0, 40)
        box = CropBox(x0, y0, rng.uniform(x0 + 1, 70), rng.uniform(y0 + 1, 50), bool(rng.integers(2)))
        out = align_crop(dense, box, int(rng.integers(1, 6)))
        np.testing.assert_allclose(out, np.tile([0.1, 0.6, 0.3], (len(out), 1)), rtol=0, atol=1e-12)


def test_align_midpoint_of_four_cells():
    scores = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.5, 0.5], [0.0, 1.0]]])
    dense = DenseScoreMap(scores, (2, 2))
    # box [0.5, 1.5]^2 with g = 1 samples its centre (1, 1), the midpoint of all four cell centres
    out = align_crop(dense, CropBox(0.5, 0.5, 1.5, 1.5), 1)
    mean = scores.reshape(4, 2).mean(axis=0)
    np.testing.assert_allclose(out[0], mean / mean.sum(), rtol=0, atol=1e-15)


def test_align_rows_are_distributions():
    rng = np.random.default_rng(8)
    dense = random_map(rng, 16, 16, 9)
    out = align_crop(dense, CropBox(3.2, 10.1, 51.7, 60.0), 4)
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-6)


def test_align_flip_equivariance():
    rng = np.random.default_rng(9)
    dense = random_map(rng, 8, 8, 4)
    box = CropBox(5.0, 7.5, 40.0, 50.0)
    plain = align_crop(dense, box, 4).reshape(4, 4, 4)
    flipped = align_crop(dense, CropBox(5.0, 7.5, 40.0, 50.0, True), 4).reshape(4, 4, 4)
    np.testing.assert_array_equal(flipped, plain[:, ::-1])


def test_align_translation_on_periodic_map():
    rng = np.random.default_rng(10)
    # period 4 along columns; 16 columns over 64 pixels, so one cell = 4 pixels
    tile = rng.dirichlet(np.ones(3), size=(8, 4))
    dense = DenseScoreMap(np.tile(tile, (1, 4, 1)), (32, 64))
    box = CropBox(16.0, 4.0, 48.0, 28.0)  # 8 columns wide, g = 8 gives one map cell per output cell
    a = align_crop(dense, box, 8).reshape(8, 8, 3)
    b = align_crop(dense, CropBox(20.0, 4.0, 52.0, 28.0), 8).reshape(8, 8, 3)
    np.testing.assert_allclose(b[:, :-1], a[:, 1:], rtol=0, atol=1e-12)
    # the new last column is old column 8, which equals column 4 by periodicity
    np.testing.assert_allclose(b[:, -1], a[:, 4], rtol=0, atol=1e-12)


def test_align_errors():
    dense = DenseScoreMap(np.full((4, 4, 2), 0.5), (16, 16))
    with pytest.raises(CropError):
        align_crop(dense, CropBox(3, 3, 3, 8), 2)
    with pytest.raises(CropError):
        CropBox(0, 0, 20, 8).validate(16, 16)
