import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmcd import raster
from mmcd.raster import RasterImage


def test_round_trip_small(tmp_path):
    img = RasterImage(np.arange(4, dtype=np.float32).reshape(2, 2, 1))
    raster.save_raster(img, tmp_path / "a.mmcd")
    np.testing.assert_array_equal(raster.load_raster(tmp_path / "a.mmcd").values, img.values)


def test_round_trip_random_seed7(tmp_path):
    vals = np.random.default_rng(7).standard_normal((5, 6, 3)).astype(np.float32)
    raster.save_raster(RasterImage(vals, band_names=["a", "b", "c"]), tmp_path / "r.mmcd")
    back = raster.load_raster(tmp_path / "r.mmcd")
    assert back.values.tobytes() == vals.tobytes()
    assert back.band_names == ["a", "b", "c"]


@pytest.mark.parametrize("shape,nbytes", [((1, 1, 1), 4), ((2, 3, 2), 48)])
def test_payload_size(tmp_path, shape, nbytes):
    path = tmp_path / "p.mmcd"
    raster.save_raster(RasterImage(np.zeros(shape, np.float32)), path)
    raw = path.read_bytes()
    assert raw.startswith(b"MMCD1\n")
    header_end = raw.index(b"\n", 6) + 1
    header = json.loads(raw[6:header_end - 1])
    assert header == {"height": shape[0], "width": shape[1], "channels": shape[2],
                      "dtype": "f32", "layout": "hwc-row-major"}
    assert len(raw) - header_end == nbytes


def _write(path, header, floats):
    path.write_bytes(b"MMCD1\n" + json.dumps(header).encode() + b"\n" + np.asarray(floats, "<f4").tobytes())


HDR = {"height": 4, "width": 4, "channels": 3, "dtype": "f32", "layout": "hwc-row-major"}


def test_length_mismatch(tmp_path):
    _write(tmp_path / "b.mmcd", HDR, np.zeros(47))
    with pytest.raises(raster.RasterFormatError, match="length mismatch"):
        raster.load_raster(tmp_path / "b.mmcd")


def test_nan_position_reported(tmp_path):
    vals = np.zeros(48)
    vals[5] = np.nan
    _write(tmp_path / "n.mmcd", HDR, vals)
    with pytest.raises(raster.RasterFormatError, match="index 5"):
        raster.load_raster(tmp_path / "n.mmcd")


@pytest.mark.parametrize("blob", [b"XXXX", b"MMCD1\nnot json\n", b"MMCD1\n{\"height\": 1}\n"])
def test_malformed_header(tmp_path, blob):
    (tmp_path / "m.mmcd").write_bytes(blob)
    with pytest.raises(raster.RasterFormatError):
        raster.load_raster(tmp_path / "m.mmcd")


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_property(tmp_path_factory, vals):
    path = tmp_path_factory.mktemp("rt") / "x.mmcd"
    raster.save_raster(RasterImage(vals), path)
    assert raster.load_raster(path).values.tobytes() == vals.tobytes()


def test_log_transform():
    eps = 1e-6
    img = RasterImage(np.array([[[math.e - eps, 1 - eps]]]))
    out = raster.log_transform(img, eps).values.ravel()
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)
    with pytest.raises(ValueError, match="non-negative"):
        raster.log_transform(RasterImage(np.array([[[-0.5]]])))


def test_log_transform_monotone():
    v = np.sort(np.random.default_rng(0).uniform(0, 10, 100))
    out = raster.log_transform(RasterImage(v.reshape(1, -1, 1))).values.ravel()
    assert np.all(np.diff(out) > 0)


def test_stats_examples():
    s = raster.compute_stats(RasterImage(np.full((3, 3, 1), 5.0)))
    for name in ("min", "max", "mean", "p1", "p99"):
        assert getattr(s, name)[0] == 5.0
    assert s.std[0] == 0.0
    assert raster.compute_stats(RasterImage(np.arange(4.0).reshape(2, 2, 1))).mean[0] == 1.5
    s = raster.compute_stats(RasterImage(np.arange(100.0).reshape(10, 10, 1)))
    assert (s.p1[0], s.p99[0]) == (1.0, 99.0)


def test_stats_ordering():
    v = np.random.default_rng(1).standard_normal((20, 20, 3))
    s = raster.compute_stats(RasterImage(v))
    assert np.all(s.min <= s.p1) and np.all(s.p1 <= s.p99) and np.all(s.p99 <= s.max)
    assert np.all(s.std >= 0)


def test_normalize_endpoints_and_degenerate():
    v = np.arange(100.0).reshape(10, 10, 1)
    img = RasterImage(np.concatenate([v, np.full_like(v, 3.0)], axis=2))
    stats = raster.compute_stats(img)
    out = raster.normalize(img, stats).values
    assert out[0, 1, 0] == -1.0         # value 1 == p1
    assert out[9, 9, 0] == 1.0          # value 99 == p99
    assert out[5, 0, 0] == pytest.approx(0.0, abs=1e-7)  # value 50 = midpoint
    assert np.all(out[:, :, 1] == 0.0)
    assert out.min() >= -1 and out.max() <= 1


def test_normalize_monotone_per_channel():
    v = np.random.default_rng(2).standard_normal((1, 200, 1)) * 50
    img = RasterImage(v)
    out = raster.normalize(img, raster.compute_stats(img)).values.ravel()
    order = np.argsort(v.ravel())
    assert np.all(np.diff(out[order]) >= 0)


def test_normalize_channel_mismatch():
    img = RasterImage(np.zeros((2, 2, 2)))
    stats = raster.compute_stats(RasterImage(np.zeros((2, 2, 1))))
    with pytest.raises(ValueError, match="channels"):
        raster.normalize(img, stats)


def test_png_export(tmp_path):
    from PIL import Image
    raster.export_png(np.random.default_rng(0).standard_normal((8, 9, 5)), tmp_path / "a.png")
    raster.export_png(np.zeros((8, 9)), tmp_path / "b.png")
    assert Image.open(tmp_path / "a.png").size == (9, 8)
    assert Image.open(tmp_path / "b.png").mode == "L"
