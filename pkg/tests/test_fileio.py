import json

import numpy as np
import pytest

from irregrid.errors import IoError
from irregrid.fields import FieldStack, GridSpec, TrackObservations
from irregrid.fileio import (read_fld, read_obs, write_fld, write_obs,
                             write_pgm)


@pytest.fixture
def stack():
    rng = np.random.default_rng(0)
    g = GridSpec(36.5, 37.0, 1.5, 2.0, 0.25)
    return FieldStack(g, [0, 3, 4], rng.normal(size=(3, g.n_rows, g.n_cols)))


def test_fld_round_trip_bit_exact(tmp_path, stack):
    path = tmp_path / "a.fld"
    write_fld(path, stack)
    back = read_fld(path)
    assert back.grid == stack.grid
    np.testing.assert_array_equal(back.times, stack.times)
    np.testing.assert_array_equal(back.values, stack.values)
    assert back.mask is None
    # identical bytes on rewrite
    path2 = tmp_path / "b.fld"
    write_fld(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_fld_mask_round_trip(tmp_path):
    g = GridSpec(0, 1, 0, 1, 0.5)
    vals = np.ones((2, 3, 3))
    vals[0, 0, 0] = np.nan
    mask = np.zeros_like(vals, dtype=bool)
    mask[0, 0, 0] = True
    st = FieldStack(g, [0, 1], vals, mask)
    path = tmp_path / "m.fld"
    write_fld(path, st)
    back = read_fld(path)
    np.testing.assert_array_equal(back.mask, mask)
    np.testing.assert_array_equal(back.values[~mask], vals[~mask])


def test_fld_header_is_json_line(tmp_path, stack):
    path = tmp_path / "a.fld"
    write_fld(path, stack)
    header = json.loads(path.read_bytes().split(b"\n", 1)[0])
    assert header["mask"] is False
    assert header["grid"]["step"] == 0.25
    assert header["times"] == [0, 3, 4]


def test_fld_read_errors(tmp_path):
    with pytest.raises(IoError):
        read_fld(tmp_path / "missing.fld")
    bad = tmp_path / "bad.fld"
    bad.write_bytes(b"not json\n\x00\x01")
    with pytest.raises(IoError):
        read_fld(bad)


def test_obs_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    obs = TrackObservations(rng.uniform(0, 9, 17), rng.uniform(36.5, 40, 17),
                            rng.uniform(1.5, 8.5, 17), rng.normal(size=17))
    path = tmp_path / "obs.csv"
    write_obs(path, obs)
    back = read_obs(path)
    np.testing.assert_array_equal(back.t, obs.t)
    np.testing.assert_array_equal(back.lat, obs.lat)
    np.testing.assert_array_equal(back.lon, obs.lon)
    np.testing.assert_array_equal(back.value, obs.value)
    header = path.read_text().splitlines()[0]
    assert header == "t,lat,lon,value"


def test_obs_empty_round_trip(tmp_path):
    path = tmp_path / "obs.csv"
    write_obs(path, TrackObservations.empty())
    assert len(read_obs(path)) == 0


def test_obs_bad_header(tmp_path):
    path = tmp_path / "obs.csv"
    path.write_text("time,y,x,v\n1,2,3,4\n")
    with pytest.raises(IoError):
        read_obs(path)


def test_pgm_scaling_and_layout(tmp_path):
    field = np.array([[0.0, 1.0], [2.0, 4.0]])
    path = tmp_path / "img.pgm"
    vmin, vmax = write_pgm(path, field)
    assert (vmin, vmax) == (0.0, 4.0)
    blob = path.read_bytes()
    header, rest = blob.split(b"255\n", 1)
    assert header == b"P5\n2 2\n"
    pixels = np.frombuffer(rest, dtype=np.uint8).reshape(2, 2)
    # north-up: the last grid row is written first
    assert pixels[0, 0] == round(255 * 2 / 4)
    assert pixels[0, 1] == 255
    assert pixels[1, 0] == 0


def test_pgm_constant_field(tmp_path):
    path = tmp_path / "c.pgm"
    vmin, vmax = write_pgm(path, np.full((3, 4), 7.0))
    assert vmin == vmax == 7.0
    pixels = np.frombuffer(path.read_bytes().split(b"255\n", 1)[1], dtype=np.uint8)
    assert np.all(pixels == 0)
