"""
Command line — synth, observe, run and compare end to end in a temporary directory
"""
import json
import shutil

import numpy as np
import pytest

from densitymap.cli import main
from densitymap.core import RadialBinning, map_load, map_save
from densitymap.randfield import estimate_spectrum

RUN_OUTPUTS = (
    "delta.dmap", "baseline.dmap", "history.csv", "spectra.csv", "traces.csv", "delta.pgm", "completed.pgm",
)


def _synth(out, seed=7, size=32, extra=()):
    return main(["synth", "--spectrum", "A=1,n=-2,var=0.3", "--size", str(size), "--seed", str(seed),
                 "--out", str(out), *extra])


def _observe(truth_dir, out, mask="box:0,0,16,16", mbar="10"):
    return main(["observe", "--truth", str(truth_dir / "truth.dmap"), "--mbar", mbar, "--mask", mask,
                 "--seed", "1", "--out", str(out)])


@pytest.fixture
def observation(tmp_path):
    assert _synth(tmp_path / "truth") == 0
    assert _observe(tmp_path / "truth", tmp_path / "obs") == 0
    return tmp_path


@pytest.fixture
def run_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# quick run\nn_iter=1\nn_mi=2\nn_tex=3\nn_est=10\nn_bins=6\nbin_scale=linear\n")
    return path


def _run(base, config, out):
    return main(["run", "--obs", str(base / "obs"), "--config", str(config), "--out", str(out),
                 "--baseline-iters", "20"])


class TestSynth:
    def test_outputs_and_determinism(self, tmp_path):
        assert _synth(tmp_path / "a") == 0
        assert _synth(tmp_path / "b") == 0
        for name in ("truth.dmap", "spectrum.dmap", "params.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        params = json.loads((tmp_path / "a" / "params.json").read_text())
        assert params["shape"] == [32, 32]
        assert params["mu"] == pytest.approx(-0.15, rel=1e-9)
        assert np.all(map_load(tmp_path / "a" / "truth.dmap", expect_kind="density") > -1.0)

    def test_two_seeds_share_a_spectrum(self, tmp_path):
        extra = ("--bins", "2", "--bin-scale", "linear")
        assert _synth(tmp_path / "s1", seed=1, size=128, extra=extra) == 0
        assert _synth(tmp_path / "s2", seed=2, size=128, extra=extra) == 0
        a = map_load(tmp_path / "s1" / "truth.dmap")
        b = map_load(tmp_path / "s2" / "truth.dmap")
        assert not np.array_equal(a, b)
        binning = RadialBinning.linear((128, 128), 2)
        pa = estimate_spectrum(np.log1p(a), binning).spectrum
        pb = estimate_spectrum(np.log1p(b), binning).spectrum
        np.testing.assert_allclose(pa, pb, rtol=0.15)

    @pytest.mark.parametrize("args", [
        ["--size", "0"],
        ["--size", "16", "--seed", "-1"],
    ])
    def test_usage_errors(self, tmp_path, args):
        base = ["synth", "--spectrum", "A=1,n=-2", "--out", str(tmp_path / "x")]
        assert main(base + args) == 2

    def test_bad_descriptor(self, tmp_path):
        assert main(["synth", "--spectrum", "A=1", "--size", "16", "--out", str(tmp_path / "x")]) == 2
        assert main(["synth", "--spectrum", "A=-1,n=-2", "--size", "16", "--out", str(tmp_path / "x")]) == 2

    def test_no_subcommand(self):
        assert main([]) == 2


class TestObserve:
    def test_box_mask(self, observation):
        meta = json.loads((observation / "obs" / "observation.json").read_text())
        assert meta["observed_fraction"] == 0.75
        counts = map_load(observation / "obs" / "counts.dmap", expect_kind="counts")
        mask = map_load(observation / "obs" / "mask.dmap", expect_kind="mask")
        assert counts.dtype == np.int64 and mask.dtype == np.uint8
        assert np.all(mask[:16, :16] == 0)
        assert np.all(counts[mask == 0] == 0)

    def test_mean_counts_track_density(self, tmp_path):
        assert _synth(tmp_path / "truth", size=64) == 0
        assert _observe(tmp_path / "truth", tmp_path / "obs", mask="none") == 0
        truth = map_load(tmp_path / "truth" / "truth.dmap")
        counts = map_load(tmp_path / "obs" / "counts.dmap")
        expected = 10.0 * np.mean(1.0 + truth)
        assert abs(counts.mean() - expected) / expected < 0.03

    @pytest.mark.parametrize("mask", ["random:1.0", "box:0,0,32,32", "box:1,2", "ellipse:3", "random:2"])
    def test_bad_masks(self, tmp_path, mask):
        assert _synth(tmp_path / "truth") == 0
        assert _observe(tmp_path / "truth", tmp_path / "obs", mask=mask) == 2

    def test_mask_file(self, tmp_path):
        assert _synth(tmp_path / "truth") == 0
        mask = np.ones((32, 32), dtype=np.uint8)
        mask[5:9, :] = 0
        map_save(mask, tmp_path / "m.dmap", kind="mask")
        assert _observe(tmp_path / "truth", tmp_path / "obs", mask=f"file:{tmp_path / 'm.dmap'}") == 0
        np.testing.assert_array_equal(map_load(tmp_path / "obs" / "mask.dmap"), mask)

    def test_corrupt_truth_is_a_runtime_failure(self, tmp_path):
        (tmp_path / "truth").mkdir()
        (tmp_path / "truth" / "truth.dmap").write_bytes(b"not a map\n")
        assert _observe(tmp_path / "truth", tmp_path / "obs") == 1

    def test_non_positive_mean_count(self, tmp_path):
        assert _synth(tmp_path / "truth") == 0
        assert _observe(tmp_path / "truth", tmp_path / "obs", mbar="0") == 2


class TestRun:
    def test_outputs_deterministic_and_replayable(self, observation, run_config):
        assert _run(observation, run_config, observation / "r1") == 0
        assert _run(observation, run_config, observation / "r2") == 0
        for name in RUN_OUTPUTS:
            assert (observation / "r1" / name).read_bytes() == (observation / "r2" / name).read_bytes(), name

        manifest = json.loads((observation / "r1" / "manifest.json").read_text())
        assert manifest["config"]["n_iter"] == 1
        assert manifest["observed_fraction"] == 0.75
        assert set(manifest["stages"]) == {"load", "augment", "baseline", "write"}

        replay = observation / "r3"
        assert main(["run", "--replay", str(observation / "r1" / "manifest.json"), "--out", str(replay)]) == 0
        for name in RUN_OUTPUTS:
            assert (observation / "r1" / name).read_bytes() == (replay / name).read_bytes(), name

    def test_preview_images(self, observation, run_config):
        assert _run(observation, run_config, observation / "r") == 0
        for name in ("delta.pgm", "completed.pgm"):
            data = (observation / "r" / name).read_bytes()
            header = b"P5\n32 32\n255\n"
            assert data.startswith(header)
            assert len(data) == len(header) + 32 * 32

    def test_unknown_config_key(self, observation, tmp_path, caplog):
        bad = tmp_path / "bad.cfg"
        bad.write_text("n_itter=2\n")
        assert _run(observation, bad, observation / "r") == 2
        assert "valid keys" in caplog.text
        assert "n_tex" in caplog.text

    def test_missing_config_file(self, observation, tmp_path):
        assert _run(observation, tmp_path / "absent.cfg", observation / "r") == 2

    def test_missing_arguments(self, observation):
        assert main(["run", "--obs", str(observation / "obs")]) == 2

    def test_observation_without_mean_count(self, observation, run_config):
        meta_path = observation / "obs" / "observation.json"
        meta = json.loads(meta_path.read_text())
        del meta["m_bar"]
        meta_path.write_text(json.dumps(meta))
        assert _run(observation, run_config, observation / "r") == 2

    def test_replay_manifest_without_observation(self, observation, run_config):
        assert _run(observation, run_config, observation / "r1") == 0
        manifest_path = observation / "r1" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        del manifest["inputs"]["obs"]
        manifest_path.write_text(json.dumps(manifest))
        assert main(["run", "--replay", str(manifest_path), "--out", str(observation / "r2")]) == 2


class TestCompare:
    def test_identical_estimate_has_zero_error(self, observation):
        estimate = observation / "est"
        estimate.mkdir()
        shutil.copy(observation / "truth" / "truth.dmap", estimate / "delta.dmap")
        out = observation / "compare.csv"
        assert main(["compare", "--truth", str(observation / "truth"), "--estimates", str(estimate),
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "k_bin_center,truth,est"
        assert all(float(line.split(",")[2]) == 0.0 for line in lines[1:])
        truth = map_load(observation / "truth" / "truth.dmap")
        np.testing.assert_allclose(map_load(observation / "compare.truth.lowpass.dmap"), truth, atol=1e-10)
        np.testing.assert_allclose(map_load(observation / "compare.est.lowpass.dmap"), truth, atol=1e-10)

    def test_input_directories_left_untouched(self, observation, run_config):
        assert _run(observation, run_config, observation / "r") == 0
        before = {d: sorted(p.name for p in (observation / d).iterdir()) for d in ("truth", "r")}
        out = observation / "reports" / "cmp.csv"
        assert main(["compare", "--truth", str(observation / "truth"), "--estimates", str(observation / "r"),
                     "--out", str(out)]) == 0
        assert {d: sorted(p.name for p in (observation / d).iterdir()) for d in ("truth", "r")} == before
        assert sorted(p.name for p in out.parent.iterdir()) == ["cmp.csv", "cmp.r.lowpass.dmap", "cmp.truth.lowpass.dmap"]

    def test_run_output_adds_baseline_column(self, observation, run_config):
        assert _run(observation, run_config, observation / "r") == 0
        out = observation / "compare.csv"
        assert main(["compare", "--truth", str(observation / "truth"), "--estimates", str(observation / "r"),
                     "--out", str(out), "--kmax", "0.1"]) == 0
        assert out.read_text().splitlines()[0] == "k_bin_center,truth,r,r:baseline"

    def test_shape_mismatch(self, observation):
        estimate = observation / "small"
        estimate.mkdir()
        map_save(np.zeros((16, 16)), estimate / "delta.dmap", kind="density")
        assert main(["compare", "--truth", str(observation / "truth"), "--estimates", str(estimate),
                     "--out", str(observation / "c.csv")]) == 2

    def test_bad_cutoff(self, observation):
        assert main(["compare", "--truth", str(observation / "truth"), "--estimates", str(observation / "truth"),
                     "--out", str(observation / "c.csv"), "--kmax", "high"]) == 2
