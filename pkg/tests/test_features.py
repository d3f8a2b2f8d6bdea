import math

import numpy as np
import pytest

from histograph.features import (
    FeatureMatrix, GlcmParams, assemble_features, crowdedness_features,
    extract_default_features, glcm_features, load_external_features,
    morphology_features, read_feature_csv, write_feature_csv,
)
from histograph.raster import EntityTable, Image, LabelMap, entity_table_from_labels

from oracles import crowdedness_oracle, glcm_features_oracle


def single_entity(mask: np.ndarray) -> tuple[LabelMap, EntityTable]:
    labels = LabelMap(mask.astype(np.int32))
    return labels, entity_table_from_labels(labels)


def feature(fm: FeatureMatrix, row: int, name: str) -> float:
    return float(fm.values[row, fm.names.index(name)])


def test_morphology_filled_square():
    mask = np.zeros((14, 14), dtype=np.int32)
    mask[2:12, 2:12] = 1
    labels, table = single_entity(mask)
    fm = morphology_features(labels, table)
    assert feature(fm, 0, "area") == 100
    assert feature(fm, 0, "euler_number") == 1
    assert feature(fm, 0, "solidity") == 1.0
    assert feature(fm, 0, "ellipticity") == 1.0
    assert feature(fm, 0, "eccentricity") == 0.0
    assert feature(fm, 0, "perimeter") == pytest.approx(36.0)
    assert feature(fm, 0, "convex_perimeter") == pytest.approx(36.0)
    assert feature(fm, 0, "roughness") == pytest.approx(1.0)


def test_morphology_disk_radius_20():
    rr, cc = np.mgrid[0:50, 0:50]
    mask = ((rr - 25) ** 2 + (cc - 25) ** 2 <= 20 ** 2).astype(np.int32)
    labels, table = single_entity(mask)
    fm = morphology_features(labels, table)
    assert 0.9 <= feature(fm, 0, "shape_factor") <= 1.05
    assert abs(feature(fm, 0, "equivalent_diameter") - 40.0) <= 0.02 * 40.0
    assert 0.95 <= feature(fm, 0, "roundness") <= 1.05


def test_morphology_square_annulus_euler_zero():
    mask = np.zeros((16, 16), dtype=np.int32)
    mask[3:13, 3:13] = 1
    mask[6:10, 6:10] = 0
    labels, table = single_entity(mask)
    fm = morphology_features(labels, table)
    assert feature(fm, 0, "euler_number") == 0.0


def test_morphology_single_pixel_fallbacks():
    mask = np.zeros((5, 5), dtype=np.int32)
    mask[2, 2] = 1
    labels, table = single_entity(mask)
    fm = morphology_features(labels, table)
    assert feature(fm, 0, "eccentricity") == 0.0
    assert feature(fm, 0, "orientation") == 0.0
    assert np.all(np.isfinite(fm.values))


def test_morphology_translation_invariant():
    rng = np.random.default_rng(23)
    blob = (rng.random((9, 11)) < 0.6).astype(np.int32)
    blob[4, 5] = 1
    base = np.zeros((30, 30), dtype=np.int32)
    base[3 : 3 + 9, 2 : 2 + 11] = blob
    moved = np.zeros((30, 30), dtype=np.int32)
    moved[15 : 15 + 9, 12 : 12 + 11] = blob

    def cleanup(arr):
        # keep only the largest 8-connected component so both copies match
        from scipy import ndimage
        lab, n = ndimage.label(arr, structure=np.ones((3, 3), dtype=bool))
        if n <= 1:
            return arr
        areas = np.bincount(lab.ravel())[1:]
        return (lab == (1 + int(np.argmax(areas)))).astype(np.int32)

    a = cleanup(base)
    b = cleanup(moved)
    fa = morphology_features(*single_entity(a))
    fb = morphology_features(*single_entity(b))
    assert np.allclose(fa.values, fb.values, atol=1e-9)


def test_glcm_constant_entity():
    img = Image(np.full((6, 6, 3), 100, dtype=np.uint8))
    mask = np.ones((6, 6), dtype=np.int32)
    labels, table = single_entity(mask)
    fm = glcm_features(img, labels, table)
    assert feature(fm, 0, "glcm_contrast") == 0.0
    assert feature(fm, 0, "glcm_dissimilarity") == 0.0
    assert feature(fm, 0, "glcm_homogeneity") == 1.0
    assert feature(fm, 0, "glcm_asm") == 1.0
    assert feature(fm, 0, "glcm_energy") == 1.0
    assert feature(fm, 0, "glcm_dispersion") == 0.0


def test_glcm_checkerboard_contrast_exact():
    side = 8
    board = np.indices((side, side)).sum(axis=0) % 2
    gray = np.where(board == 0, 0, 255).astype(np.uint8)
    img = Image(np.stack([gray] * 3, axis=2))
    labels, table = single_entity(np.ones((side, side), dtype=np.int32))
    params = GlcmParams(levels=2, offsets=[(0, 1)])
    fm = glcm_features(img, labels, table, params)
    # neighbors always differ by the full quantized gap of 1 level
    assert feature(fm, 0, "glcm_contrast") == pytest.approx(1.0)
    assert feature(fm, 0, "glcm_asm") == pytest.approx(0.5)


def test_glcm_matches_enumeration_oracle():
    rng = np.random.default_rng(31)
    img_arr = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    gray = np.array(
        [[min(255, max(0, int(math.floor(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] + 0.5))))
          for p in row] for row in img_arr], dtype=np.uint8)
    mask = (rng.random((16, 16)) < 0.7)
    mask[8, 8] = True
    labels, table = single_entity(mask.astype(np.int32))
    params = GlcmParams(levels=8, offsets=[(0, 1), (1, 0), (1, 1), (1, -1)])
    fm = glcm_features(Image(img_arr), labels, table, params)
    expected = glcm_features_oracle(gray, mask, 8, params.offsets, True)
    for name in fm.names:
        assert feature(fm, 0, name) == pytest.approx(expected[name], abs=1e-12)


def test_glcm_probability_matrix_properties_via_oracle_match():
    # random entities across several seeds stay within 1e-12 of enumeration
    rng = np.random.default_rng(37)
    for _ in range(5):
        arr = rng.integers(0, 256, size=(10, 10, 3), dtype=np.uint8)
        mask = rng.random((10, 10)) < 0.6
        mask[5, 5] = True
        labels, table = single_entity(mask.astype(np.int32))
        fm = glcm_features(Image(arr), labels, table, GlcmParams(levels=4))
        gray = np.array(
            [[min(255, max(0, int(math.floor(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] + 0.5))))
              for p in row] for row in arr], dtype=np.uint8)
        expected = glcm_features_oracle(gray, mask, 4, GlcmParams().offsets, True)
        for name in fm.names:
            assert feature(fm, 0, name) == pytest.approx(expected[name], abs=1e-12)


def test_crowdedness_two_entities():
    table = EntityTable(np.array([1, 2]), np.array([[0.0, 0.0], [0.0, 10.0]]),
                        np.array([[0, 0, 0, 0], [0, 10, 0, 10]]), np.array([1, 1]))
    fm = crowdedness_features(table, k=5)
    assert np.allclose(fm.values, [[10.0, 0.0], [10.0, 0.0]])


def test_crowdedness_three_collinear():
    table = EntityTable(np.array([1, 2, 3]),
                        np.array([[0.0, 0.0], [0.0, 10.0], [0.0, 30.0]]),
                        np.array([[0, 0, 0, 0], [0, 10, 0, 10], [0, 30, 0, 30]]),
                        np.array([1, 1, 1]))
    fm = crowdedness_features(table, k=2)
    assert np.allclose(fm.values[1], [15.0, 25.0])


def test_crowdedness_matches_bruteforce():
    rng = np.random.default_rng(41)
    n = 50
    cents = rng.uniform(0, 100, size=(n, 2))
    bboxes = np.tile([0, 0, 100, 100], (n, 1))
    table = EntityTable(np.arange(1, n + 1), cents, bboxes, np.ones(n, dtype=np.int64))
    fm = crowdedness_features(table, k=5)
    assert np.allclose(fm.values, crowdedness_oracle(cents, 5), atol=1e-12)


def test_crowdedness_bruteforce_100_seeded_configurations():
    for seed in range(100):
        rng = np.random.default_rng(600 + seed)
        n = int(rng.integers(2, 25))
        k = int(rng.integers(1, 8))
        cents = rng.uniform(0, 200, size=(n, 2))
        bboxes = np.tile([0, 0, 200, 200], (n, 1))
        table = EntityTable(np.arange(1, n + 1), cents, bboxes,
                            np.ones(n, dtype=np.int64))
        fm = crowdedness_features(table, k=k)
        assert np.allclose(fm.values, crowdedness_oracle(cents, k), atol=1e-9)


def test_crowdedness_requires_two_entities():
    table = EntityTable(np.array([1]), np.array([[1.0, 1.0]]),
                        np.array([[1, 1, 1, 1]]), np.array([1]))
    with pytest.raises(ValueError):
        crowdedness_features(table)


def test_assemble_concatenates_and_validates():
    a = FeatureMatrix(np.ones((3, 2)), ["x", "y"])
    b = FeatureMatrix(np.zeros((3, 2)), ["z", "w"])
    empty = FeatureMatrix(np.zeros((3, 0)), [])
    both = assemble_features([empty, a, b])
    assert both.names == ["x", "y", "z", "w"]
    assert both.values.shape == (3, 4)
    with pytest.raises(ValueError):
        assemble_features([a, FeatureMatrix(np.ones((2, 1)), ["q"])])
    with pytest.raises(ValueError):
        assemble_features([a, FeatureMatrix(np.ones((3, 1)), ["x"])])


def test_assemble_min_max_constant_column_zero():
    a = FeatureMatrix(np.array([[1.0, 5.0], [1.0, 7.0], [1.0, 9.0]]), ["const", "v"])
    out = assemble_features([a], min_max_normalize=True)
    assert np.allclose(out.values[:, 0], 0.0)
    assert np.allclose(out.values[:, 1], [0.0, 0.5, 1.0])


def test_feature_csv_round_trip(tmp_path):
    rng = np.random.default_rng(43)
    fm = FeatureMatrix(rng.standard_normal((4, 3)), ["a", "b", "c"])
    ids = np.array([1, 2, 3, 4])
    path = tmp_path / "f.csv"
    write_feature_csv(fm, ids, str(path))
    back_ids, back = read_feature_csv(str(path))
    assert np.array_equal(back_ids, ids)
    assert np.array_equal(back.values, fm.values)  # 17 sig digits => exact
    assert back.names == fm.names


def test_load_external_features(tmp_path):
    table = EntityTable(np.array([1, 2, 3]), np.zeros((3, 2)),
                        np.zeros((3, 4), dtype=int), np.ones(3, dtype=np.int64))
    path = tmp_path / "ext.csv"
    path.write_text("id,f0,f1\n3,30.0,31.0\n1,10.0,11.0\n2,20.0,21.0\n")
    fm = load_external_features(str(path), table)
    assert np.allclose(fm.values, [[10, 11], [20, 21], [30, 31]])  # id order

    missing = tmp_path / "missing.csv"
    missing.write_text("id,f0,f1\n1,10.0,11.0\n3,30.0,31.0\n")
    with pytest.raises(ValueError, match=r"missing \[2\]"):
        load_external_features(str(missing), table)

    bad = tmp_path / "bad.csv"
    bad.write_text("id,f0,f1\n1,10.0,x\n2,1,2\n3,1,2\n")
    with pytest.raises(ValueError, match="non-numeric"):
        load_external_features(str(bad), table)


def test_extract_default_features_no_nan_inf():
    rng = np.random.default_rng(47)
    arr = rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8)
    lab = np.zeros((40, 40), dtype=np.int32)
    lab[5:15, 5:15] = 1
    lab[20:24, 20:22] = 2
    lab[30, 30] = 3
    labels = LabelMap(lab)
    table = entity_table_from_labels(labels)
    fm = extract_default_features(Image(arr), labels, table)
    assert fm.num_rows == 3
    assert np.all(np.isfinite(fm.values))
