import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxcal.depth import (
    MISSING,
    NormalizedDepthMap,
    RawDepthMap,
    apply_mask,
    denormalize,
    inpaint_dilate,
    load_normalized,
    normalize,
    postprocess,
    read_depth_pgm,
    read_mask_pgm,
    save_normalized,
    threshold_mask,
    write_depth_pgm,
    write_mask_pgm,
)

NEAR, FAR = 500.0, 600.0


def loop_inpaint(values):
    """Pixel-by-pixel reference of the synchronous mean-of-8-neighbours fill."""
    vals = [[int(v) for v in row] for row in values]
    h, w = len(vals), len(vals[0])
    while any(v == 0 for row in vals for v in row):
        nxt = [row[:] for row in vals]
        for y in range(h):
            for x in range(w):
                if vals[y][x]:
                    continue
                nb = [vals[j][i] for j in range(y - 1, y + 2) for i in range(x - 1, x + 2)
                      if (j, i) != (y, x) and 0 <= j < h and 0 <= i < w and vals[j][i]]
                if nb:
                    nxt[y][x] = int(np.floor(sum(nb) / len(nb) + 0.5))
        vals = nxt
    return np.array(vals, dtype=np.uint16)


def gradient_field(h=12, w=15):
    y, x = np.mgrid[0:h, 0:w]
    return (10000 + 300 * x + 170 * y).astype(np.uint16)


def test_hole_free_is_identity():
    raw = RawDepthMap(gradient_field(), NEAR, FAR)
    assert np.array_equal(inpaint_dilate(raw).values, raw.values)


def test_single_hole_constant_neighbourhood():
    v = np.full((3, 3), 500, np.uint16)
    v[1, 1] = MISSING
    assert inpaint_dilate(RawDepthMap(v, NEAR, FAR)).values[1, 1] == 500


def test_random_holes_match_loop_oracle_and_stay_in_range():
    rng = np.random.default_rng(0)
    field = gradient_field()
    for _ in range(5):
        v = field.copy()
        v[rng.random(v.shape) < 0.1] = MISSING
        got = inpaint_dilate(RawDepthMap(v, NEAR, FAR)).values
        assert np.array_equal(got, loop_inpaint(v))
        valid = v != MISSING
        assert np.array_equal(got[valid], v[valid])
        assert got.min() >= v[valid].min() and got.max() <= v[valid].max()


def test_inpaint_errors():
    with pytest.raises(ValueError):
        inpaint_dilate(RawDepthMap(np.zeros((4, 4), np.uint16), NEAR, FAR))
    v = np.zeros((1, 20), np.uint16)
    v[0, 0] = 100
    with pytest.raises(RuntimeError, match="18 holes"):
        inpaint_dilate(RawDepthMap(v, NEAR, FAR), max_iters=1)


def test_apply_mask():
    raw = RawDepthMap(np.full((4, 4), 1000, np.uint16), NEAR, FAR)
    d, m = apply_mask(raw, np.ones((4, 4)))
    assert np.array_equal(d.values, raw.values) and m.all()
    half = np.zeros((4, 4), bool)
    half[:, :2] = True
    assert normalize(*apply_mask(raw, half)).valid.sum() == half.sum()
    with pytest.raises(ValueError):
        apply_mask(raw, np.ones((3, 4)))
    with pytest.raises(ValueError):
        apply_mask(raw, np.zeros((4, 4)))


def test_normalize_boundaries_and_halfway():
    phys = np.array([[NEAR, FAR, (NEAR + FAR) / 2]])
    raw = RawDepthMap.from_physical(phys, NEAR, FAR)
    raw.values[0, 0] = 1  # the near plane itself is the smallest non-missing code
    dbar = normalize(raw, np.ones((1, 3)))
    assert dbar.values[0, 0] == pytest.approx(0.0, abs=1 / 65535)
    assert dbar.values[0, 1] == 1.0
    assert abs(dbar.values[0, 2] - 0.5) <= 1 / (2 * 65535) + 1e-7


def test_normalize_rejects_bad_range():
    raw = RawDepthMap.__new__(RawDepthMap)
    object.__setattr__(raw, "values", np.ones((2, 2), np.uint16))
    object.__setattr__(raw, "near", 600.0)
    object.__setattr__(raw, "far", 500.0)
    with pytest.raises(ValueError):
        normalize(raw, np.ones((2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4))
def test_normalize_denormalize_roundtrip(vals):
    values = np.array(vals, np.float32).reshape(2, 2)
    dbar = NormalizedDepthMap(values, np.ones((2, 2), bool), NEAR, FAR)
    back = normalize(denormalize(dbar), dbar.valid)
    assert np.all(np.abs(back.values - values) <= 1.0 / 65535 + 1e-6)


def test_postprocess_valid_set_is_mask():
    v = gradient_field(6, 6)
    v[2, 3] = MISSING
    mask = np.zeros((6, 6), bool)
    mask[1:5, 1:5] = True
    dbar = postprocess(RawDepthMap(v, NEAR, FAR), mask)
    assert np.array_equal(dbar.valid, mask)


def test_threshold_mask_grey_vs_colour():
    img = np.full((3, 2, 2), 0.8)
    img[:, 0, 0] = (0.5, 0.3, 0.1)
    m = threshold_mask(img)
    assert m[0, 0] and m.sum() == 1


def test_pgm_roundtrips(tmp_path):
    raw = RawDepthMap(gradient_field(5, 7), NEAR, FAR)
    write_depth_pgm(tmp_path / "d.pgm", raw)
    assert np.array_equal(read_depth_pgm(tmp_path / "d.pgm", NEAR, FAR).values, raw.values)
    data = (tmp_path / "d.pgm").read_bytes()
    assert data.startswith(b"P5") and b"65535" in data[:20]
    mask = np.eye(5, 7, dtype=bool)
    write_mask_pgm(tmp_path / "m.pgm", mask)
    assert np.array_equal(read_mask_pgm(tmp_path / "m.pgm"), mask)


def test_normalized_sidecar_roundtrip(tmp_path):
    valid = np.array([[True, False], [True, True]])
    dbar = NormalizedDepthMap(np.array([[0.25, 0.0], [1.0, 0.5]], np.float32), valid, NEAR, FAR)
    save_normalized(tmp_path / "n.f32", dbar)
    back = load_normalized(tmp_path / "n.f32")
    assert np.array_equal(back.valid, valid)
    assert np.array_equal(back.values, dbar.values)
    assert (back.near, back.far) == (NEAR, FAR)
