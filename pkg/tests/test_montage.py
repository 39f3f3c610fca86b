"""Montage loading, alignment and nearest-neighbor geometry."""

import numpy as np
import pytest

from eegtransfer import montage as mg

DEAP_32 = [
    "Fp1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5", "CP1", "P3",
    "P7", "PO3", "O1", "Oz", "Pz", "Fp2", "AF4", "Fz", "F4", "F8", "FC6",
    "FC2", "Cz", "C4", "T8", "CP6", "CP2", "P4", "P8", "PO4", "O2",
]


def write_montage(tmp_path, rows, header="name,x,y,z"):
    path = tmp_path / "m.csv"
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    return path


def test_default_montage_has_62_unit_channels():
    m = mg.default_montage()
    assert len(m) == 62
    assert len(set(m.names)) == 62
    norms = np.linalg.norm(m.positions, axis=1)
    assert np.all(np.abs(norms - 1.0) <= mg.NORM_TOL)


def test_load_renormalizes_off_unit_positions(tmp_path):
    path = write_montage(tmp_path, ["A,0,0,2", "B,0,1,0"])
    m = mg.load_montage(path)
    assert np.allclose(m.positions[0], [0, 0, 1])


def test_load_save_load_is_bit_idempotent(tmp_path):
    m1 = mg.default_montage()
    p = tmp_path / "again.csv"
    mg.save_montage(m1, p)
    m2 = mg.load_montage(p)
    assert m1.names == m2.names
    assert np.array_equal(m1.positions, m2.positions)
    mg.save_montage(m2, p)
    m3 = mg.load_montage(p)
    assert np.array_equal(m2.positions, m3.positions)


def test_duplicate_name_rejected(tmp_path):
    path = write_montage(tmp_path, ["FP1,0,0,1", "FP1,0,1,0"])
    with pytest.raises(mg.MontageError, match="duplicate"):
        mg.load_montage(path)


@pytest.mark.parametrize("row", ["A,0,0,0", "A,0,0,9", "A,0,0,0.1"])
def test_zero_or_out_of_range_norm_rejected(tmp_path, row):
    path = write_montage(tmp_path, [row])
    with pytest.raises(mg.MontageError, match="norm"):
        mg.load_montage(path)


def test_missing_and_empty_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        mg.load_montage(tmp_path / "nope.csv")
    empty = tmp_path / "empty.csv"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(mg.MontageError, match="empty"):
        mg.load_montage(empty)
    header_only = write_montage(tmp_path, [])
    with pytest.raises(mg.MontageError, match="no channel rows"):
        mg.load_montage(header_only)


def test_align_identity_over_full_reference():
    ref = mg.default_montage()
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(62, 5))
    cmap = mg.ChannelSubsetMap.from_names(ref.names, ref)
    out = mg.align_to_reference(feats, cmap, ref)
    assert np.array_equal(out, feats)


def test_align_deap_subset_fills_missing_with_zeros():
    ref = mg.default_montage()
    cmap = mg.ChannelSubsetMap.from_names(DEAP_32, ref)
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(32, 5))
    out = mg.align_to_reference(feats, cmap, ref)
    assert out.shape == (62, 5)
    mapped = set(cmap.target_indices)
    zero_rows = [i for i in range(62) if i not in mapped]
    assert len(zero_rows) == 30
    assert np.all(out[zero_rows] == 0.0)
    # mapped rows are bit-identical copies
    for k, t in enumerate(cmap.target_indices):
        assert np.array_equal(out[t], feats[k])


def test_align_preserves_nonzero_row_multiset():
    ref = mg.default_montage()
    cmap = mg.ChannelSubsetMap.from_names(DEAP_32, ref)
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(32, 5)) + 10.0  # keep all rows nonzero
    out = mg.align_to_reference(feats, cmap, ref)
    src = {row.tobytes() for row in feats}
    dst = {row.tobytes() for row in out if np.any(row != 0.0)}
    assert src == dst


def test_align_unknown_source_name_errors():
    ref = mg.default_montage()
    with pytest.raises(mg.MontageError, match="XX9"):
        mg.ChannelSubsetMap.from_names(["Fp1", "XX9"], ref)


def test_align_shape_mismatch_errors():
    ref = mg.default_montage()
    cmap = mg.ChannelSubsetMap.from_names(DEAP_32, ref)
    with pytest.raises(mg.MontageError):
        mg.align_to_reference(np.zeros((31, 5)), cmap, ref)


def test_nearest_neighbor_collinear_points():
    # points on the sphere at increasing angles from +z: 0, ~0.1, ~0.3 rad
    def at(theta):
        return [np.sin(theta), 0.0, np.cos(theta)]

    m = mg.ChannelMontage(("a", "b", "c"), np.array([at(0.0), at(0.1), at(0.3)]))
    assert mg.nearest_neighbor(m, 0) == 1
    assert mg.nearest_neighbor(m, 2) == 1


def test_nearest_neighbor_tie_breaks_low_index():
    m = mg.ChannelMontage(
        ("w", "e", "n"),
        np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]]))
    # n is equidistant from w and e
    assert mg.nearest_neighbor(m, 2) == 0


def test_nearest_neighbor_never_self():
    m = mg.default_montage()
    for i in range(len(m)):
        assert mg.nearest_neighbor(m, i) != i


def test_single_channel_montage_rejected_for_neighbors():
    m = mg.ChannelMontage(("only",), np.array([[0.0, 0.0, 1.0]]))
    with pytest.raises(mg.MontageError):
        mg.nearest_neighbor(m, 0)


def test_duplicate_target_indices_rejected():
    with pytest.raises(mg.MontageError, match="duplicate"):
        mg.ChannelSubsetMap(("a", "b"), (3, 3))
