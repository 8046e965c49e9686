import json
import subprocess
import sys

import numpy as np
import pytest

from rainsplat.cli import main
from rainsplat.core import GridField, GridSpec, StationObs, StationSet, read_grid, write_grid, write_stations
from rainsplat.sample import read_points


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    rc = main(["synth", "--rows", "32", "--n-blobs", "4", "--sigma-range", "1.5,3", "--seed", "3",
               "--out-field", str(d / "truth.spf"), "--out-scene", str(d / "truth.csv"),
               "--out-stations", str(d / "st.csv"), "--n-stations", "12"])
    assert rc == 0
    return d


def _pipeline(src, out, *extra):
    return main(["pipeline", "--surrogate", str(src / "truth.spf"), "--stations", str(src / "st.csv"),
                 "--out-dir", str(out), "--k-points", "15", "--max-iters", "60", "--seed", "7",
                 "--deterministic", *extra])


def test_synth_outputs_and_manifest(synth_dir):
    f = read_grid(synth_dir / "truth.spf")
    assert f.spec.shape == (32, 32)
    doc = json.loads((synth_dir / "truth.spf.manifest.json").read_text())
    assert doc["command"] == "synth"
    assert doc["outputs"] == {"field": "truth.spf", "scene": "truth.csv", "stations": "st.csv"}
    assert doc["parameters"]["n_blobs"] == 4 and doc["seed"] == 3
    assert set(doc) == {"command", "inputs", "outputs", "parameters", "seed", "tool_version", "wall_time_s"}
    assert doc["wall_time_s"] >= 0


def test_pipeline_is_bitwise_reproducible(synth_dir, tmp_path):
    assert _pipeline(synth_dir, tmp_path / "a") == 0
    assert _pipeline(synth_dir, tmp_path / "b") == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["field.spf", "loss.csv", "manifest.json", "points.csv", "scene.csv"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    doc = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert doc["wall_time_s"] is None
    assert doc["parameters"]["k_points"] == 15


def test_pipeline_output_resolution(synth_dir, tmp_path):
    assert _pipeline(synth_dir, tmp_path, "--out-res", "0.5x", "--format", "ascii") == 0
    f = read_grid(tmp_path / "field.asc")
    assert f.spec.shape == (64, 64)
    assert f.spec.extent() == read_grid(synth_dir / "truth.spf").spec.extent()


def test_stepwise_commands(synth_dir, tmp_path):
    pts, scene, out = tmp_path / "p.csv", tmp_path / "s.csv", tmp_path / "r.spf"
    truth = str(synth_dir / "truth.spf")
    assert main(["sample", "--field", truth, "--out", str(pts), "--k-points", "10"]) == 0
    assert len(read_points(pts)) == 10
    assert main(["fit", "--target", truth, "--points", str(pts), "--stations", str(synth_dir / "st.csv"),
                 "--out-scene", str(scene), "--max-iters", "30", "--loss-history", str(tmp_path / "l.csv")]) == 0
    assert main(["render", "--scene", str(scene), "--like", truth, "--out", str(out)]) == 0
    assert read_grid(out).spec == read_grid(synth_dir / "truth.spf").spec
    assert (tmp_path / "r.spf.manifest.json").exists()


def test_eval_identical(synth_dir, capsys):
    truth = str(synth_dir / "truth.spf")
    assert main(["eval", "--pred", truth, "--obs", truth, "--thresholds", "1,5,10", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["rmse"] == 0.0
    for t in ("1", "5", "10"):
        assert doc[f"csi@{t}"] in (1.0, None)
    assert doc["csi@1"] == 1.0


def test_eval_plot(synth_dir, tmp_path):
    pytest.importorskip("matplotlib")
    truth = str(synth_dir / "truth.spf")
    png = tmp_path / "cmp.png"
    assert main(["eval", "--pred", truth, "--obs", truth, "--out", str(tmp_path / "r.txt"), "--plot", str(png)]) == 0
    assert png.read_bytes()[:4] == b"\x89PNG"
    assert "rmse" in (tmp_path / "r.txt").read_text()


def test_interp_single_station_barnes(tmp_path):
    write_stations(StationSet((StationObs("a", 3.0, 4.0, 2.5),)), tmp_path / "one.csv")
    out = tmp_path / "b.spf"
    assert main(["interp", "--stations", str(tmp_path / "one.csv"), "--method", "barnes", "--rows", "8",
                 "--cols", "9", "--out", str(out)]) == 0
    assert np.all(read_grid(out).values == 2.5)


@pytest.mark.parametrize("method", ["kriging", "mq", "barnes"])
def test_interp_methods(synth_dir, tmp_path, method):
    out = tmp_path / f"{method}.asc"
    assert main(["interp", "--stations", str(synth_dir / "st.csv"), "--method", method, "--like",
                 str(synth_dir / "truth.spf"), "--format", "ascii", "--clip-negative", "--out", str(out)]) == 0
    assert read_grid(out).spec.shape == (32, 32)


def test_psd_impulse_flat(tmp_path, capsys):
    v = np.zeros((8, 8))
    v[2, 5] = 1.0
    write_grid(GridField(GridSpec.unit(8), v), tmp_path / "imp.spf")
    assert main(["psd", "--field", str(tmp_path / "imp.spf")]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln and not ln.startswith(("#", "wave"))]
    power = [float(ln.split(",")[1]) for ln in lines]
    assert power and all(p == pytest.approx(1 / 64) for p in power if np.isfinite(p))


def test_psd_plot(synth_dir, tmp_path):
    pytest.importorskip("matplotlib")
    assert main(["psd", "--field", str(synth_dir / "truth.spf"), "--out", str(tmp_path / "s.csv"),
                 "--plot", str(tmp_path / "s.png")]) == 0
    assert (tmp_path / "s.png").stat().st_size > 0
    assert (tmp_path / "s.csv.manifest.json").exists()


def test_exit_codes(tmp_path, synth_dir):
    with pytest.raises(SystemExit) as e:
        main(["fit", "--bogus"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1
    assert main(["psd", "--field", str(tmp_path / "nope.spf")]) == 2
    (tmp_path / "bad.spf").write_bytes(b"garbage")
    assert main(["eval", "--pred", str(tmp_path / "bad.spf"), "--obs", str(tmp_path / "bad.spf")]) == 2
    rc = main(["pipeline", "--surrogate", str(tmp_path / "nope.spf"), "--out-dir", str(tmp_path / "o")])
    assert rc == 2
    rc = main(["sample", "--field", str(synth_dir / "truth.spf"), "--out", str(tmp_path / "p.csv"),
               "--w-grad", "0.9"])
    assert rc == 2


def test_pipeline_names_failed_stage(tmp_path, capsys):
    v = np.full((6, 6), np.nan)
    write_grid(GridField(GridSpec.unit(6), v, precip=False), tmp_path / "nan.spf")
    rc = main(["pipeline", "--surrogate", str(tmp_path / "nan.spf"), "--out-dir", str(tmp_path / "o")])
    assert rc == 2
    assert "sample" in capsys.readouterr().err


def test_inputs_not_mutated(synth_dir, tmp_path):
    before = (synth_dir / "truth.spf").read_bytes()
    _pipeline(synth_dir, tmp_path)
    assert (synth_dir / "truth.spf").read_bytes() == before


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "rainsplat", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
