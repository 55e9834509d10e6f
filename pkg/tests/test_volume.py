import numpy as np
import pytest

from iqt import (
    CorruptionError,
    FormatError,
    GeometryError,
    ParameterError,
    Patch,
    PatchSpec,
    Volume3D,
    extract_patches,
    load_volume,
    patch_origins,
    reconstruct_from_patches,
    save_volume,
    upsample_cubic,
)
from iqt.volume import background_fraction

from _oracles import catmull_rom_weights, upsample_axis_direct


def random_volume(seed: int, dims=(12, 12, 12), spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    rng = np.random.default_rng(seed)
    return Volume3D(rng.uniform(0.0, 1.0, dims).astype(np.float32), spacing)


class TestVolume3D:
    def test_data_is_float32_c_order_readonly(self):
        vol = Volume3D(np.ones((2, 3, 4), dtype=np.float64))
        assert vol.data.dtype == np.float32
        assert vol.data.flags.c_contiguous
        assert not vol.data.flags.writeable
        assert vol.dims == (2, 3, 4)

    def test_rejects_non_3d_and_nonfinite(self):
        with pytest.raises(ParameterError):
            Volume3D(np.ones((4, 4)))
        bad = np.ones((3, 3, 3))
        bad[1, 1, 1] = np.nan
        with pytest.raises(ParameterError):
            Volume3D(bad)

    def test_rejects_bad_spacing(self):
        with pytest.raises(ParameterError):
            Volume3D(np.ones((3, 3, 3)), spacing=(1.0, 0.0, 1.0))


class TestIqvFormat:
    def test_round_trip_is_byte_identical(self, tmp_path):
        vol = random_volume(3, dims=(5, 6, 7), spacing=(0.7, 0.8, 2.8))
        path_a = tmp_path / "a.iqv"
        path_b = tmp_path / "b.iqv"
        save_volume(vol, path_a)
        again = load_volume(path_a)
        save_volume(again, path_b)
        assert path_a.read_bytes() == path_b.read_bytes()
        assert np.array_equal(again.data, vol.data)
        assert again.spacing == pytest.approx(vol.spacing)

    def test_header_layout(self, tmp_path):
        vol = random_volume(4, dims=(2, 3, 4))
        path = tmp_path / "v.iqv"
        save_volume(vol, path)
        blob = path.read_bytes()
        assert blob[:4] == b"IQV1"
        assert np.frombuffer(blob[4:16], dtype="<u4").tolist() == [2, 3, 4]
        assert len(blob) == 4 + 12 + 12 + 4 * 24

    def test_bad_magic_raises_format_error(self, tmp_path):
        path = tmp_path / "bad.iqv"
        path.write_bytes(b"NOPE" + bytes(24))
        with pytest.raises(FormatError):
            load_volume(path)

    def test_truncated_header_raises_format_error(self, tmp_path):
        path = tmp_path / "short.iqv"
        path.write_bytes(b"IQV1\x01")
        with pytest.raises(FormatError):
            load_volume(path)

    def test_truncated_payload_raises_corruption_error(self, tmp_path):
        vol = random_volume(5, dims=(4, 4, 4))
        path = tmp_path / "t.iqv"
        save_volume(vol, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CorruptionError):
            load_volume(path)


class TestPatchGrid:
    def test_exact_tiling_origins(self):
        spec = PatchSpec(4, 0)
        origins = patch_origins((8, 8, 8), spec)
        per_axis = sorted({o[0] for o in origins})
        assert per_axis == [0, 4]
        assert len(origins) == 8

    def test_trailing_origin_clamped(self):
        origins = patch_origins((7, 7, 7), PatchSpec(4, 0))
        per_axis = sorted({o[0] for o in origins})
        assert per_axis == [0, 3]
        assert len(origins) == 8

    def test_dense_overlap_origins(self):
        origins = patch_origins((9, 9, 9), PatchSpec(7, 5))
        assert sorted({o[0] for o in origins}) == [0, 2]
        assert len(origins) == 8

    def test_patch_too_large_raises(self):
        with pytest.raises(GeometryError):
            patch_origins((4, 4, 4), PatchSpec(5, 0))

    def test_every_voxel_covered(self):
        vol = random_volume(6, dims=(10, 11, 13))
        spec = PatchSpec(4, 1)
        cover = np.zeros(vol.dims, dtype=int)
        for p in extract_patches(vol, spec):
            i, j, k = p.origin
            cover[i:i + 4, j:j + 4, k:k + 4] += 1
        assert cover.min() >= 1

    def test_patch_mean_matches_values(self):
        vol = random_volume(7, dims=(6, 6, 6))
        patch = extract_patches(vol, PatchSpec(3, 0))[5]
        assert patch.mean_mu == pytest.approx(
            float(patch.values.mean(dtype=np.float64)), abs=1e-12
        )


class TestReconstruct:
    def test_round_trip_identity_bit_exact(self):
        vol = random_volume(8, dims=(9, 10, 12))
        for spec in (PatchSpec(4, 0), PatchSpec(4, 2), PatchSpec(5, 4)):
            patches = extract_patches(vol, spec)
            back = reconstruct_from_patches(patches, vol.dims, spec, vol.spacing)
            assert np.array_equal(back.data, vol.data)

    def test_overlap_averaging_against_naive(self):
        vol = random_volume(9, dims=(7, 7, 7))
        spec = PatchSpec(4, 2)
        patches = extract_patches(vol, spec)
        bumped = [
            Patch(p.origin, p.values + np.float32(idx), p.mean_mu)
            for idx, p in enumerate(patches)
        ]
        total = np.zeros(vol.dims)
        count = np.zeros(vol.dims)
        for p in bumped:
            i, j, k = p.origin
            cube = np.asarray(p.values, dtype=np.float64).reshape(4, 4, 4)
            total[i:i + 4, j:j + 4, k:k + 4] += cube
            count[i:i + 4, j:j + 4, k:k + 4] += 1
        rebuilt = reconstruct_from_patches(bumped, vol.dims, spec)
        assert np.allclose(rebuilt.data, (total / count).astype(np.float32), atol=0)

    def test_out_of_bounds_patch_raises(self):
        spec = PatchSpec(4, 0)
        patch = Patch((6, 0, 0), np.zeros(64, dtype=np.float32), 0.0)
        with pytest.raises(GeometryError):
            reconstruct_from_patches([patch], (8, 8, 8), spec)

    def test_uncovered_voxels_raise(self):
        spec = PatchSpec(4, 0)
        patch = Patch((0, 0, 0), np.zeros(64, dtype=np.float32), 0.0)
        with pytest.raises(GeometryError):
            reconstruct_from_patches([patch], (8, 8, 8), spec)


class TestBackgroundFraction:
    def test_all_zero_patch(self):
        patch = Patch((0, 0, 0), np.zeros(27, dtype=np.float32), 0.0)
        assert background_fraction(patch, 0.01) == 1.0

    def test_half_and_half(self):
        values = np.concatenate([np.zeros(32), np.ones(32)]).astype(np.float32)
        patch = Patch((0, 0, 0), values, 0.5)
        assert background_fraction(patch, 0.5) == 0.5

    def test_strictly_below_threshold_counts(self):
        values = np.full(8, 0.3, dtype=np.float32)
        patch = Patch((0, 0, 0), values, 0.3)
        assert background_fraction(patch, 0.3) == 0.0


class TestUpsample:
    def test_identity_factors(self):
        vol = random_volume(10, dims=(5, 5, 5))
        up = upsample_cubic(vol, (1, 1, 1))
        assert np.array_equal(up.data, vol.data)

    def test_grid_points_reproduced(self):
        vol = random_volume(11, dims=(4, 4, 4))
        up = upsample_cubic(vol, (2, 3, 4))
        assert np.allclose(up.data[::2, ::3, ::4], vol.data, atol=1e-6)

    def test_constant_preserved(self):
        vol = Volume3D(np.full((4, 4, 4), 0.37, dtype=np.float32))
        up = upsample_cubic(vol, (1, 1, 4))
        assert np.allclose(up.data, 0.37, atol=1e-6)

    def test_impulse_matches_kernel_weights(self):
        line = np.zeros(9, dtype=np.float32)
        line[4] = 1.0
        vol = Volume3D(np.broadcast_to(line, (3, 3, 9)).copy())
        up = upsample_cubic(vol, (1, 1, 2))
        # Response at half-integer offsets from the impulse equals the kernel.
        expected = catmull_rom_weights(0.5)
        got = up.data[1, 1, [5, 7, 9, 11]]
        assert np.allclose(got, expected, atol=1e-6)
        assert np.allclose(up.data[1, 1, 8], 1.0, atol=1e-6)

    def test_matches_direct_axis_oracle(self):
        rng = np.random.default_rng(12)
        line = rng.uniform(0, 1, 7)
        vol = Volume3D(np.tile(line, (3, 3, 1)).astype(np.float32))
        up = upsample_cubic(vol, (1, 1, 4))
        assert np.allclose(up.data[1, 1], upsample_axis_direct(line, 4), atol=1e-5)

    def test_linear_ramp_interior(self):
        ramp = np.arange(8, dtype=np.float32)
        vol = Volume3D(np.tile(ramp, (3, 3, 1)))
        up = upsample_cubic(vol, (1, 1, 2))
        interior = up.data[1, 1, 4:12]
        assert np.allclose(interior, np.arange(2.0, 6.0, 0.5), atol=1e-5)

    def test_spacing_divided(self):
        vol = Volume3D(np.ones((4, 4, 4), dtype=np.float32), spacing=(1.0, 1.0, 4.8))
        up = upsample_cubic(vol, (1, 1, 4))
        assert up.spacing == pytest.approx((1.0, 1.0, 1.2))
        assert up.dims == (4, 4, 16)

    def test_rejects_bad_factors(self):
        vol = random_volume(13, dims=(4, 4, 4))
        with pytest.raises(ParameterError):
            upsample_cubic(vol, (0, 1, 1))
