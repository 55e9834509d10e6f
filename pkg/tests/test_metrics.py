"""Error metrics, improvement maps, manifests, and the evaluation harness."""

import os

import numpy as np
import pytest

from iqt import (
    DataError,
    EnhanceConfig,
    GeometryError,
    ManifestEntry,
    ParameterError,
    Volume3D,
    binary_improvement_map,
    error_map,
    evaluate_run,
    nrmse,
    read_manifest,
    save_volume,
    ssim,
    upsample_cubic,
    write_manifest,
)
from _oracles import ssim_window_direct


def _vol(data, spacing=(1.0, 1.0, 1.0)):
    return Volume3D(np.asarray(data, dtype=np.float32), spacing)


class TestNrmse:
    def test_identical_volumes_score_zero(self):
        rng = np.random.default_rng(0)
        x = _vol(rng.uniform(0.1, 1.0, (6, 6, 6)))
        assert nrmse(x, x) == 0.0

    def test_known_value(self):
        # Half the voxels off by 1, truth peak 2: sqrt(0.5) / 2.
        truth = np.full((4, 4, 4), 2.0)
        est = truth.copy()
        est.reshape(-1)[::2] -= 1.0
        got = nrmse(_vol(truth), _vol(est))
        assert abs(got - np.sqrt(0.5) / 2.0) < 1e-12

    def test_invariant_under_power_of_two_scaling(self):
        rng = np.random.default_rng(1)
        truth = rng.uniform(0.1, 1.0, (5, 5, 5))
        est = truth + rng.normal(size=truth.shape) * 0.05
        a = nrmse(_vol(truth), _vol(est))
        b = nrmse(_vol(truth * 4.0), _vol(est * 4.0))
        assert a == b

    def test_dim_mismatch_rejected(self):
        with pytest.raises(GeometryError):
            nrmse(_vol(np.ones((4, 4, 4))), _vol(np.ones((4, 4, 5))))

    def test_nonpositive_peak_rejected(self):
        with pytest.raises(DataError):
            nrmse(_vol(np.zeros((4, 4, 4))), _vol(np.ones((4, 4, 4))))


class TestSsim:
    def test_identical_volumes_score_one(self):
        rng = np.random.default_rng(2)
        x = _vol(rng.uniform(0.1, 1.0, (9, 9, 9)))
        assert ssim(x, x) == 1.0

    def test_matches_single_window_formula(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0.0, 1.0, (7, 7, 7))
        b = a + rng.normal(size=a.shape) * 0.1
        got = ssim(_vol(a), _vol(b))
        want = ssim_window_direct(
            _vol(a).data.astype(np.float64), _vol(b).data.astype(np.float64),
            float(_vol(a).data.max()))
        assert abs(got - want) < 1e-12

    def test_data_range_override(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(0.0, 1.0, (7, 7, 7))
        b = a + rng.normal(size=a.shape) * 0.1
        got = ssim(_vol(a), _vol(b), data_range=2.0)
        want = ssim_window_direct(
            _vol(a).data.astype(np.float64), _vol(b).data.astype(np.float64), 2.0)
        assert abs(got - want) < 1e-12

    def test_bounded_and_degrades_with_noise(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0.2, 1.0, (10, 10, 10))
        mild = x + rng.normal(size=x.shape) * 0.02
        harsh = x + rng.normal(size=x.shape) * 0.5
        s_mild = ssim(_vol(x), _vol(mild))
        s_harsh = ssim(_vol(x), _vol(harsh))
        assert -1.0 <= s_harsh < s_mild < 1.0

    def test_window_must_fit(self):
        x = _vol(np.ones((6, 6, 6)))
        with pytest.raises(GeometryError):
            ssim(x, x)  # default window 7 does not fit
        with pytest.raises(GeometryError):
            ssim(x, x, window=0)
        assert ssim(x, x, window=6) == 1.0

    def test_nonpositive_range_rejected(self):
        x = _vol(np.zeros((7, 7, 7)))
        with pytest.raises(DataError):
            ssim(x, x)


class TestMaps:
    def test_error_map_is_absolute_difference(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(5, 5, 5))
        b = rng.normal(size=(5, 5, 5))
        m = error_map(_vol(a, (1.0, 1.0, 2.0)), _vol(b))
        np.testing.assert_allclose(
            m.data, np.abs(a.astype(np.float32).astype(np.float64)
                           - b.astype(np.float32).astype(np.float64)), atol=1e-7)
        assert m.data.dtype == np.float32
        assert m.spacing == (1.0, 1.0, 2.0)

    def test_binary_improvement_is_strict(self):
        truth = _vol(np.zeros((4, 4, 4)) + 1.0)
        near = _vol(np.full((4, 4, 4), 1.1))
        far = _vol(np.full((4, 4, 4), 1.3))
        wins = binary_improvement_map(truth, near, far)
        assert np.all(wins.data == 1.0)
        losses = binary_improvement_map(truth, far, near)
        assert np.all(losses.data == 0.0)
        ties = binary_improvement_map(truth, near, near)
        assert np.all(ties.data == 0.0)


class TestManifest:
    ENTRIES = [
        ManifestEntry("high/a.iqv", "low/a.iqv", "ind1", 12.5, 30.0, 7),
        ManifestEntry("high/b.iqv", "low/b.iqv", "ind2", 50.0, 80.25, 8),
        ManifestEntry("high/c.iqv", "low/c.iqv", "ood", 9.0, 14.0, 9),
    ]

    def test_round_trip(self, tmp_path):
        path = tmp_path / "set.manifest"
        write_manifest(path, self.ENTRIES)
        assert read_manifest(path) == self.ENTRIES

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "set.manifest"
        body = "# a comment\n\nh.iqv\tl.iqv\tind1\t10\t20\t3\n  # indented comment\n"
        path.write_text(body)
        got = read_manifest(path)
        assert got == [ManifestEntry("h.iqv", "l.iqv", "ind1", 10.0, 20.0, 3)]

    def test_wrong_field_count_rejected(self, tmp_path):
        path = tmp_path / "set.manifest"
        path.write_text("h.iqv\tl.iqv\tind1\t10\t20\n")
        with pytest.raises(DataError):
            read_manifest(path)

    def test_bad_number_reports_line(self, tmp_path):
        path = tmp_path / "set.manifest"
        path.write_text("# header\nh.iqv\tl.iqv\tind1\tten\t20\t3\n")
        with pytest.raises(DataError, match=":2:"):
            read_manifest(path)

    def test_unknown_regime_rejected(self):
        with pytest.raises(DataError):
            ManifestEntry("h.iqv", "l.iqv", "weird", 1.0, 2.0, 3)


def _write_pairs(tmp_path, pairs, regimes):
    entries = []
    for i, ((high, low), regime) in enumerate(zip(pairs, regimes)):
        hp, lp = f"vol{i}_high.iqv", f"vol{i}_low.iqv"
        save_volume(high, tmp_path / hp)
        save_volume(low, tmp_path / lp)
        entries.append(ManifestEntry(hp, lp, regime, 40.0, 60.0, i))
    manifest = tmp_path / "pairs.manifest"
    write_manifest(manifest, entries)
    return manifest


class TestEvaluateRun:
    def test_interpolation_only(self, tmp_path, phantom_pairs):
        manifest = _write_pairs(tmp_path, phantom_pairs[:2], ["ind1", "ind2"])
        report = evaluate_run(manifest, ["interpolation"], tmp_path / "out")
        assert [r.method for r in report.rows] == ["interpolation"] * 2
        assert len(report.aggregates) == 2  # one regime each
        assert len(report.map_paths) == 2  # error maps only
        assert (tmp_path / "out" / "report.tsv").exists()
        assert (tmp_path / "out" / "report.txt").exists()
        for p in report.map_paths:
            assert os.path.exists(p)

    def test_dictionary_method_end_to_end(self, tmp_path, phantom_pairs, small_dictionary):
        manifest = _write_pairs(tmp_path, phantom_pairs[:2], ["ind1", "ind1"])
        out = tmp_path / "out"
        report = evaluate_run(
            manifest, ["srep"], out,
            dictionary=small_dictionary,
            enhance_cfg=EnhanceConfig(lam=0.05, overlap_p=0),
        )
        # Interpolation is prepended, so two methods over two volumes.
        assert [r.method for r in report.rows] == ["interpolation", "srep"] * 2
        assert len(report.aggregates) == 2
        for agg in report.aggregates:
            group = [r for r in report.rows if r.method == agg.method]
            assert agg.volume == "mean"
            assert abs(agg.nrmse - np.mean([r.nrmse for r in group])) < 1e-12
            assert abs(agg.ssim - np.mean([r.ssim for r in group])) < 1e-12
        for i in range(2):
            est = out / "estimates" / "srep" / f"vol{i}_high.iqv"
            assert est.exists()
            better = out / "maps" / "better" / "srep_vs_interpolation" / f"vol{i}_high.iqv"
            assert better.exists()
        assert len(report.map_paths) == 6  # 4 error maps + 2 binary maps
        tsv = (out / "report.tsv").read_text().splitlines()
        assert tsv[0] == "method\tregime\tvolume\tnrmse\tssim"
        assert len(tsv) == 1 + len(report.rows) + len(report.aggregates)

    def test_disk_backed_method(self, tmp_path, phantom_pairs):
        manifest = _write_pairs(tmp_path, phantom_pairs[:1], ["ood"])
        out = tmp_path / "out"
        high, low = phantom_pairs[0]
        est_dir = out / "estimates" / "external"
        est_dir.mkdir(parents=True)
        save_volume(upsample_cubic(low, (1, 1, 4)), est_dir / "vol0_high.iqv")
        report = evaluate_run(manifest, ["external"], out)
        ext = [r for r in report.rows if r.method == "external"]
        interp = [r for r in report.rows if r.method == "interpolation"]
        assert ext[0].nrmse == interp[0].nrmse  # same estimate read from disk

    def test_missing_estimate_rejected(self, tmp_path, phantom_pairs):
        manifest = _write_pairs(tmp_path, phantom_pairs[:1], ["ind1"])
        with pytest.raises(DataError, match="missing estimate"):
            evaluate_run(manifest, ["ghost"], tmp_path / "out")

    def test_wrong_estimate_dims_rejected(self, tmp_path, phantom_pairs):
        manifest = _write_pairs(tmp_path, phantom_pairs[:1], ["ind1"])
        out = tmp_path / "out"
        est_dir = out / "estimates" / "short"
        est_dir.mkdir(parents=True)
        save_volume(Volume3D(np.ones((8, 8, 8), dtype=np.float32)), est_dir / "vol0_high.iqv")
        with pytest.raises(DataError, match="dims"):
            evaluate_run(manifest, ["short"], out)

    def test_duplicate_methods_rejected(self, tmp_path, phantom_pairs):
        manifest = _write_pairs(tmp_path, phantom_pairs[:1], ["ind1"])
        with pytest.raises(ParameterError):
            evaluate_run(manifest, ["interpolation", "interpolation"], tmp_path / "out")

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = tmp_path / "pairs.manifest"
        manifest.write_text("# nothing here\n")
        with pytest.raises(DataError):
            evaluate_run(manifest, ["interpolation"], tmp_path / "out")

    def test_non_integer_scale_rejected(self, tmp_path):
        rng = np.random.default_rng(7)
        high = Volume3D(rng.uniform(0.1, 1.0, (9, 9, 9)).astype(np.float32))
        low = Volume3D(rng.uniform(0.1, 1.0, (8, 8, 4)).astype(np.float32))
        manifest = _write_pairs(tmp_path, [(high, low)], ["ind1"])
        with pytest.raises(GeometryError):
            evaluate_run(manifest, ["interpolation"], tmp_path / "out")
