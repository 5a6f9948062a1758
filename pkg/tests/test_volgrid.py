import numpy as np
import pytest

from lungvol.volgrid import (
    Mask3D,
    Volume3D,
    VolumeFormatError,
    nearest_resample_mask,
    read_rvol,
    resample_isotropic,
    volume_from_mask,
    write_rvol,
)


def make_mask(data, spacing):
    return Mask3D(data=np.asarray(data, dtype=np.uint8), spacing=spacing)


class TestVolumeFromMask:
    def test_unit_spacing_five_million_voxels(self):
        data = np.zeros((200, 200, 200), dtype=np.uint8)
        data.reshape(-1)[:5_000_000] = 1
        assert volume_from_mask(make_mask(data, (1.0, 1.0, 1.0))) == pytest.approx(5.0)

    def test_single_voxel_2mm(self):
        data = np.zeros((3, 3, 3), dtype=np.uint8)
        data[1, 1, 1] = 1
        assert volume_from_mask(make_mask(data, (2.0, 2.0, 2.0))) == pytest.approx(8e-6)

    def test_empty_mask(self):
        assert volume_from_mask(make_mask(np.zeros((4, 4, 4)), (1.0, 1.0, 1.0))) == 0.0


class TestInvariants:
    def test_mask_rejects_other_values(self):
        with pytest.raises(ValueError, match="0 and 1"):
            make_mask(np.full((2, 2, 2), 3), (1, 1, 1))

    def test_volume_rejects_nan(self):
        data = np.ones((2, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            Volume3D(data=data, spacing=(1, 1, 1))

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError, match="spacing"):
            Volume3D(data=np.ones((2, 2, 2), dtype=np.float32), spacing=(1, 0, 1))


class TestResampleIsotropic:
    def test_constant_stays_constant(self):
        vol = Volume3D(data=np.full((8, 6, 10), 7.0, dtype=np.float32), spacing=(1.3, 2.1, 0.7))
        out = resample_isotropic(vol, 1.0)
        assert np.allclose(out.data, 7.0)
        assert out.spacing == (1.0, 1.0, 1.0)

    def test_identity_when_already_at_target(self):
        rng = np.random.default_rng(0)
        vol = Volume3D(data=rng.random((6, 7, 8)).astype(np.float32), spacing=(1.0, 1.0, 1.0))
        out = resample_isotropic(vol, 1.0)
        assert out.dims == vol.dims
        np.testing.assert_allclose(out.data, vol.data, rtol=1e-6)

    def test_output_dims_round_half_up(self):
        vol = Volume3D(data=np.zeros((10, 10, 10), dtype=np.float32), spacing=(1.25, 1.25, 1.25))
        out = resample_isotropic(vol, 1.0)
        # 10 * 1.25 / 1.0 = 12.5 rounds up
        assert out.dims == (13, 13, 13)

    def test_linear_field_exact(self):
        # trilinear interpolation reproduces a trilinear function exactly; the
        # oracle evaluates the same linear form at output voxel centers (offset
        # keeps the field positive so relative error stays well defined)
        nx, ny, nz = 20, 18, 16
        s = 1.5
        idx = np.indices((nx, ny, nz)).astype(np.float64)
        x = (idx[0] + 0.5) * s
        y = (idx[1] + 0.5) * s
        z = (idx[2] + 0.5) * s
        vol = Volume3D(data=(100.0 + 2 * x + 3 * y - z), spacing=(s, s, s))
        out = resample_isotropic(vol, 1.0)
        oidx = np.indices(out.dims).astype(np.float64)
        ox = (oidx[0] + 0.5) * 1.0
        oy = (oidx[1] + 0.5) * 1.0
        oz = (oidx[2] + 0.5) * 1.0
        expected = 100.0 + 2 * ox + 3 * oy - oz
        # interior only: edge clamping flattens the field outside the input span
        inner = (slice(2, -2),) * 3
        rel = np.abs(out.data[inner] - expected[inner]) / np.abs(expected[inner])
        assert rel.max() < 1e-5

    def test_minmax_within_input_range(self):
        rng = np.random.default_rng(3)
        vol = Volume3D(data=rng.normal(size=(9, 11, 7)), spacing=(1.7, 0.9, 1.2))
        out = resample_isotropic(vol, 1.0)
        assert out.data.min() >= vol.data.min() - 1e-12
        assert out.data.max() <= vol.data.max() + 1e-12

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        vol = Volume3D(data=rng.random((12, 9, 14)).astype(np.float32), spacing=(1.6, 1.6, 1.6))
        a = resample_isotropic(vol, 1.0)
        b = resample_isotropic(vol, 1.0)
        assert a.data.tobytes() == b.data.tobytes()

    def test_rejects_bad_target(self):
        vol = Volume3D(data=np.ones((2, 2, 2), dtype=np.float32), spacing=(1, 1, 1))
        for bad in (0.0, -1.0, np.nan, np.inf):
            with pytest.raises(ValueError):
                resample_isotropic(vol, bad)


class TestNearestResampleMask:
    def test_all_ones(self):
        mask = make_mask(np.ones((6, 6, 6)), (2.0, 2.0, 2.0))
        out = nearest_resample_mask(mask, 1.0)
        assert out.dims == (12, 12, 12)
        assert out.data.all()

    def test_identity_spacing(self):
        rng = np.random.default_rng(5)
        mask = make_mask(rng.integers(0, 2, (7, 8, 9)), (1.0, 1.0, 1.0))
        out = nearest_resample_mask(mask, 1.0)
        np.testing.assert_array_equal(out.data, mask.data)

    def test_half_space_volume_change_under_3pct(self):
        # oracle: the analytic half-space volume inside the grid
        n = 40
        idx = np.indices((n, n, n))[0]
        x_phys = (idx + 0.5) * 2.0
        cut = 33.0
        mask = make_mask((x_phys < cut).astype(np.uint8), (2.0, 2.0, 2.0))
        v_in = volume_from_mask(mask)
        v_out = volume_from_mask(nearest_resample_mask(mask, 1.0))
        assert abs(v_out - v_in) / v_in < 0.03

    def test_volume_preservation_random_blobs(self):
        rng = np.random.default_rng(6)
        for trial in range(3):
            center = rng.uniform(20, 40, size=3)
            radius = rng.uniform(8, 16)
            idx = np.indices((48, 48, 48)).astype(np.float64)
            phys = [(idx[i] + 0.5) * 1.5 for i in range(3)]
            r2 = sum((phys[i] - center[i]) ** 2 for i in range(3))
            mask = make_mask((r2 < radius ** 2).astype(np.uint8), (1.5, 1.5, 1.5))
            v_in = volume_from_mask(mask)
            v_out = volume_from_mask(nearest_resample_mask(mask, 1.0))
            assert abs(v_out - v_in) / v_in < 0.03


class TestRvolFormat:
    def test_volume_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        vol = Volume3D(data=rng.normal(size=(5, 6, 7)).astype(np.float32), spacing=(1.25, 1.0, 0.5))
        p1, p2 = tmp_path / "a.rvol", tmp_path / "b.rvol"
        write_rvol(p1, vol)
        again = read_rvol(p1)
        write_rvol(p2, again)
        assert p1.read_bytes() == p2.read_bytes()
        np.testing.assert_array_equal(again.data, vol.data)
        assert again.spacing == vol.spacing

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        mask = make_mask(rng.integers(0, 2, (4, 3, 5)), (2.0, 2.0, 2.0))
        path = tmp_path / "m.rvol"
        write_rvol(path, mask)
        again = read_rvol(path)
        assert isinstance(again, Mask3D)
        np.testing.assert_array_equal(again.data, mask.data)

    def test_x_fastest_order(self, tmp_path):
        # value at (x, y, z) = x + 10y + 100z; first raw values must vary in x
        data = np.fromfunction(lambda x, y, z: x + 10 * y + 100 * z, (3, 2, 2)).astype(np.float32)
        vol = Volume3D(data=data, spacing=(1, 1, 1))
        path = tmp_path / "o.rvol"
        write_rvol(path, vol)
        blob = path.read_bytes()
        raw = blob[blob.index(b"data\n") + 5:]
        first = np.frombuffer(raw[:12], dtype="<f4")
        np.testing.assert_array_equal(first, [0.0, 1.0, 2.0])

    def test_bad_magic_reports_offset(self, tmp_path):
        path = tmp_path / "bad.rvol"
        path.write_bytes(b"JUNK\ndims 1 1 1\n")
        with pytest.raises(VolumeFormatError, match="byte offset 0"):
            read_rvol(path)

    def test_truncated_data_reports_offset(self, tmp_path):
        path = tmp_path / "short.rvol"
        path.write_bytes(b"RVOL1\ndims 2 2 2\nspacing 1.0 1.0 1.0\ndtype f32\ndata\n\x00\x00")
        with pytest.raises(VolumeFormatError, match="truncated"):
            read_rvol(path)

    def test_bad_dims_line(self, tmp_path):
        path = tmp_path / "dims.rvol"
        path.write_bytes(b"RVOL1\ndims 2 2\nspacing 1 1 1\ndtype f32\ndata\n")
        with pytest.raises(VolumeFormatError, match="dims"):
            read_rvol(path)
