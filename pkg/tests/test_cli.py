from __future__ import annotations

import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from vasq import cli
from vasq.io import Volume, read_json, read_mask, read_volume, sha256, write_volume

SUBCOMMANDS = ("phantom", "normalize", "enhance", "noise", "segment", "skeleton", "evaluate",
               "cohort-stats")


def snapshot(root: Path) -> dict:
    return {p: sha256(p) for p in root.rglob("*") if p.is_file()}


def run(root: Path, argv) -> int:
    """Run the CLI and check that nothing outside ``--out`` was created or changed."""
    out = (root / argv[argv.index("--out") + 1]).resolve()
    before = snapshot(root)
    code = cli.main([str(a) for a in argv])
    after = snapshot(root)
    touched = [p for p, h in after.items() if before.get(p) != h]
    stray = [p for p in touched if out not in p.resolve().parents]
    assert not stray, f"wrote outside --out: {stray}"
    assert set(before) <= set(after)
    return code


def replay(manifest_path: Path, out: Path) -> int:
    m = read_json(manifest_path)
    return cli.main([m["command"], *m["argv"], "--out", str(out)])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cwd = os.getcwd()
    os.chdir(root)  # relative paths keep manifests comparable across runs
    try:
        steps = {
            "phantom": ["phantom", "--generations", "4", "--seed", "7", "--out", "ph"],
            "noise": ["noise", "--in", "ph/image.mhd", "--n0", "1e4", "--seed", "3", "--out", "nz"],
            "segment": ["segment", "--in", "nz/noisy.mhd", "--backend", "classical",
                        "--hints", "ph/phantom.json", "--out", "seg"],
            "evaluate": ["evaluate", "--pred", "seg/labels.mhd", "--truth", "ph/truth.mhd",
                         "--levels-a", "ph/levels_A.mhd", "--levels-v", "ph/levels_V.mhd",
                         "--prob-a", "seg/prob_A.mhd", "--prob-v", "seg/prob_V.mhd",
                         "--hints", "ph/phantom.json", "--out", "ev"],
            "skeleton": ["skeleton", "--in", "ph/truth.mhd", "--class", "artery",
                         "--hints", "ph/phantom.json", "--tree", "tree.json", "--out", "sk"],
            "cohort": ["phantom", "--cohort", "80", "--seed", "2", "--out", "co"],
            "cohort-stats": ["cohort-stats", "--in", "co/cohort.csv", "--out", "st"],
        }
        codes = {name: run(root, argv) for name, argv in steps.items()}
        yield root, codes, steps
    finally:
        os.chdir(cwd)


class TestHelp:
    @pytest.mark.parametrize("command", SUBCOMMANDS)
    def test_subcommand_help(self, command, capsys):
        assert cli.main([command, "--help"]) == 0
        assert "--out" in capsys.readouterr().out

    def test_module_entry(self):
        r = subprocess.run([sys.executable, "-m", "vasq", "--help"], capture_output=True, text=True)
        assert r.returncode == 0
        for command in SUBCOMMANDS:
            assert command in r.stdout


class TestExitCodes:
    def test_usage_errors(self, tmp_path, capsys):
        assert cli.main([]) == 1
        assert cli.main(["noise", "--out", str(tmp_path)]) == 1
        assert cli.main(["frobnicate"]) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_input(self, tmp_path, capsys):
        assert cli.main(["noise", "--in", str(tmp_path / "none.mhd"), "--out", str(tmp_path / "o")]) == 1
        assert "none.mhd" in capsys.readouterr().err

    def test_geometry_mismatch_names_both(self, tmp_path, capsys):
        labels = np.zeros((6, 6, 6), np.uint8)
        labels[2:4, 2:4, 2:4] = 1
        write_volume(tmp_path / "truth.mhd", Volume(labels, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), "MET_UCHAR"))
        write_volume(tmp_path / "pred.mhd", Volume(labels, (1.0, 1.0, 2.0), (0.0, 0.0, 0.0), "MET_UCHAR"))
        codes = np.where(labels > 0, 4, 0).astype(np.uint8)
        write_volume(tmp_path / "lv.mhd", Volume(codes, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), "MET_UCHAR"))
        code = cli.main(["evaluate", "--pred", str(tmp_path / "pred.mhd"), "--truth", str(tmp_path / "truth.mhd"),
                         "--levels-a", str(tmp_path / "lv.mhd"), "--levels-v", str(tmp_path / "lv.mhd"),
                         "--out", str(tmp_path / "ev")])
        err = capsys.readouterr().err
        assert code == 1
        assert "spacing=(1.0, 1.0, 2.0)" in err and "spacing=(1.0, 1.0, 1.0)" in err
        assert not (tmp_path / "ev" / "manifest.json").exists()

    def test_runtime_error_is_2(self, tmp_path, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise RuntimeError("simulated failure")

        monkeypatch.setattr(cli, "generate_cohort", boom)
        assert cli.main(["phantom", "--cohort", "5", "--out", str(tmp_path)]) == 2
        assert "simulated failure" in capsys.readouterr().err

    def test_tree_name_must_stay_in_out(self, tmp_path):
        labels = np.zeros((5, 5, 5), np.uint8)
        labels[1:4, 2, 2] = 1
        write_volume(tmp_path / "m.mhd", Volume(labels, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), "MET_UCHAR"))
        assert cli.main(["skeleton", "--in", str(tmp_path / "m.mhd"), "--tree", "../t.json",
                         "--out", str(tmp_path / "sk")]) == 1
        assert not (tmp_path / "t.json").exists()

    def test_bad_betas(self, tmp_path):
        (tmp_path / "b.json").write_text('{"slpx": [1, 2, 3, 4]}')
        assert cli.main(["phantom", "--cohort", "5", "--betas", str(tmp_path / "b.json"),
                         "--out", str(tmp_path / "o")]) == 1


class TestPipeline:
    def test_all_steps_succeed(self, pipeline):
        _, codes, _ = pipeline
        assert codes == {name: 0 for name in codes}

    def test_report_complete(self, pipeline):
        root, _, _ = pipeline
        rep = read_json(root / "ev" / "report.json")
        for key in ("dsc_whole_A", "dsc_whole_V", "dsc_intra_A", "dsc_intra_V", "sen", "mcs", "hd95_mm",
                    "sl_ratio_A", "bc_ratio_V", "loss_dsc", "loss_overlap", "loss_total", "conventions"):
            assert key in rep and rep[key] is not None, key
        assert 0.5 < rep["dsc_whole_A"] <= 1 and 0 <= rep["mcs"] < 0.5

    def test_outputs_and_manifests(self, pipeline):
        root, _, steps = pipeline
        for name, argv in steps.items():
            out = root / argv[argv.index("--out") + 1]
            m = read_json(out / "manifest.json")
            assert m["command"] == argv[0] and "--out" not in m["argv"]
            assert {"vasq", "numpy", "scipy", "python"} <= set(m["versions"])
            assert m["conventions"] and "config" in m and "seeds" in m
            for rel, digest in m["outputs"].items():
                assert sha256(out / rel) == digest
            for path, digest in m["inputs"].items():
                assert sha256(root / path) == digest
            listed = set(m["outputs"]) | {"manifest.json"}
            assert listed == {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()}

    def test_seeds_and_defaults_echoed(self, pipeline):
        root, _, _ = pipeline
        assert read_json(root / "ph" / "manifest.json")["seeds"] == {"tree": 7}
        noise = read_json(root / "nz" / "manifest.json")
        assert noise["seeds"] == {"noise": 3} and noise["config"]["n0"] == 1e4
        seg = read_json(root / "seg" / "manifest.json")["config"]
        assert len(seg["cascade"]["thresholds"]) == 4 and seg["backend"] == "classical"
        assert seg["vesselness"]["scales"] == [0.5, 1.0, 2.0, 4.0]

    def test_skeleton_tree_copy(self, pipeline):
        root, _, _ = pipeline
        assert read_json(root / "sk" / "tree.json") == read_json(root / "sk" / "tree_artery.json")
        summary = read_json(root / "sk" / "skeleton.json")
        assert set(summary) == {"artery"} and summary["artery"]["bc"] == 7

    def test_phantom_levels_encoding(self, pipeline):
        root, _, _ = pipeline
        truth = read_mask(root / "ph" / "truth.mhd")
        codes = read_volume(root / "ph" / "levels_A.mhd").voxels
        assert np.array_equal(codes > 0, truth.artery)
        assert set(np.unique(codes)) <= {0, 1, 2, 3, 4}

    def test_cohort_stats_tables(self, pipeline):
        root, _, _ = pipeline
        rep = read_json(root / "st" / "report.json")
        assert {"by_sex", "regression", "rank_sum_sex"} <= set(rep)
        assert (root / "st" / "regression.csv").read_text().startswith("index,")

    @pytest.mark.parametrize("step", ["phantom", "noise", "segment", "evaluate", "skeleton", "cohort",
                                      "cohort-stats"])
    def test_replay_byte_identical(self, pipeline, step):
        root, _, steps = pipeline
        argv = steps[step]
        out = root / argv[argv.index("--out") + 1]
        again = root / "replay" / step
        cwd = os.getcwd()
        os.chdir(root)
        try:
            assert replay(out / "manifest.json", again) == 0
        finally:
            os.chdir(cwd)
        first = read_json(out / "manifest.json")
        assert read_json(again / "manifest.json") == first
        for rel in first["outputs"]:
            assert (again / rel).read_bytes() == (out / rel).read_bytes(), rel


class TestBatch:
    def test_cases_threads_deterministic(self, pipeline, tmp_path, monkeypatch):
        root, _, _ = pipeline
        cases = tmp_path / "cases"
        for name, pred in (("b_perfect", root / "ph" / "truth.mhd"), ("a_noisy", root / "seg" / "labels.mhd")):
            d = cases / name
            d.mkdir(parents=True)
            for src, dst in ((pred, "pred"), (root / "ph" / "truth.mhd", "truth"),
                             (root / "ph" / "levels_A.mhd", "levels_A"),
                             (root / "ph" / "levels_V.mhd", "levels_V")):
                write_volume(d / f"{dst}.mhd", read_volume(src))
            (d / "phantom.json").write_bytes((root / "ph" / "phantom.json").read_bytes())
        outputs = {}
        for threads in ("1", "2"):
            monkeypatch.setenv("VASQ_THREADS", threads)
            out = tmp_path / f"out{threads}"
            assert cli.main(["evaluate", "--cases", str(cases), "--out", str(out)]) == 0
            outputs[threads] = out
            assert read_json(out / "manifest.json")["config"]["threads"] == int(threads)
        one, two = outputs["1"], outputs["2"]
        assert (one / "summary.csv").read_bytes() == (two / "summary.csv").read_bytes()
        for name in ("a_noisy", "b_perfect"):
            assert (one / "cases" / f"{name}.json").read_bytes() == (two / "cases" / f"{name}.json").read_bytes()
        rows = (one / "summary.csv").read_text().splitlines()
        assert rows[1].startswith("a_noisy,") and rows[2].startswith("b_perfect,")
        assert read_json(one / "cases" / "b_perfect.json")["dsc_whole_A"] == 1.0

    def test_empty_cases_dir(self, tmp_path):
        (tmp_path / "cases").mkdir()
        assert cli.main(["evaluate", "--cases", str(tmp_path / "cases"), "--out", str(tmp_path / "o")]) == 1


class TestSmallCommands:
    @pytest.fixture
    def ct(self, tmp_path):
        hu = np.full((12, 10, 8), -850, np.int16)
        hu[2:10, 4:6, 3:5] = 300
        write_volume(tmp_path / "ct.mhd", Volume(hu, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), "MET_SHORT"))
        return tmp_path / "ct.mhd"

    def test_enhance_options(self, ct, tmp_path):
        assert run(tmp_path, ["enhance", "--in", ct, "--scales", "0.5,1", "2", "--c", "auto",
                              "--out", tmp_path / "e"]) == 0
        m = read_json(tmp_path / "e" / "manifest.json")
        assert m["config"]["vesselness"]["scales"] == [0.5, 1.0, 2.0]
        assert m["config"]["vesselness"]["c"] is None and m["config"]["windowed_input"] is True
        ves = read_volume(tmp_path / "e" / "vesselness.mhd").voxels
        assert ves.shape == (12, 10, 8) and ves.min() >= 0 and ves.max() <= 1
        assert cli.main(["enhance", "--in", str(ct), "--c", "lots", "--out", str(tmp_path / "x")]) == 1

    def test_normalize(self, ct, tmp_path):
        assert run(tmp_path, ["normalize", "--in", ct, "--dims", "16", "16", "8", "--out", tmp_path / "n"]) == 0
        v = read_volume(tmp_path / "n" / "normalized.mhd")
        assert v.voxels.shape == (16, 16, 8) and v.spacing == (334 / 512, 334 / 512, 1.0)

    def test_noise_same_seed(self, ct, tmp_path):
        for out in ("a", "b"):
            assert run(tmp_path, ["noise", "--in", ct, "--seed", "11", "--out", tmp_path / out]) == 0
        assert (tmp_path / "a" / "noisy.raw").read_bytes() == (tmp_path / "b" / "noisy.raw").read_bytes()

    def test_betas_file(self, tmp_path):
        (tmp_path / "b.json").write_text('{"slpa": [1000, 2000, -918.86, -10]}')
        assert run(tmp_path, ["phantom", "--cohort", "30", "--betas", tmp_path / "b.json",
                              "--out", tmp_path / "c"]) == 0
        m = read_json(tmp_path / "c" / "manifest.json")
        assert m["config"]["model"]["betas"]["slpa"] == [1000.0, 2000.0, -918.86, -10.0]
        assert str(tmp_path / "b.json") in m["inputs"]
