import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from texloc.cli import main
from texloc.io import read_image, write_image
from texloc.mapdb import load
from texloc.synth import generate_texture


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """synth -> build-map -> build-db on a 2x2 grid with three queries."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "4", "--rows", "2", "--cols", "2", "--queries", "3", "--out", str(d / "syn")]) == 0
    assert main(["build-map", "--frames", str(d / "syn" / "frames"), "--out", str(d / "map")]) == 0
    assert main(["build-db", "--map", str(d / "map"), "--per-image", "150", "--out", str(d / "map.txdb")]) == 0
    return d


def test_synth_layout(workdir):
    syn = workdir / "syn"
    assert (syn / "texture.png").exists()
    assert len(list((syn / "frames").glob("frame_*.png"))) == 4
    rows = list(csv.DictReader(open(syn / "queries" / "manifest.tsv"), delimiter="\t"))
    assert len(rows) == 3 and set(rows[0]) >= {"file", "tx", "ty", "theta"}


def test_build_map_writes_poses(workdir):
    rows = list(csv.DictReader(open(workdir / "map" / "map.tsv"), delimiter="\t"))
    assert [int(r["image_id"]) for r in rows] == [0, 1, 2, 3]
    assert float(rows[0]["tx"]) == 0.0 and float(rows[0]["theta"]) == 0.0
    assert all((workdir / "map" / r["file"]).exists() for r in rows)


def test_build_db_is_reproducible(workdir):
    assert main(["build-db", "--map", str(workdir / "map"), "--per-image", "150",
                 "--out", str(workdir / "again.txdb")]) == 0
    assert (workdir / "again.txdb").read_bytes() == (workdir / "map.txdb").read_bytes()
    db = load(workdir / "map.txdb")
    assert len(db.images) == 4 and db.basis.k == 16


def test_localize_json(workdir, capsys):
    q = workdir / "syn" / "queries"
    row = next(csv.DictReader(open(q / "manifest.tsv"), delimiter="\t"))
    code, out, _ = run(capsys, "localize", "--db", workdir / "map.txdb", "--image", q / row["file"], "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["success"] and doc["schema_version"] == 1
    assert doc["pose"]["tx"] == pytest.approx(float(row["tx"]), abs=2.0)
    assert doc["pose"]["ty"] == pytest.approx(float(row["ty"]), abs=2.0)
    assert doc["pose_mm"]["tx"] == pytest.approx(doc["pose"]["tx"] * 0.16)


def test_localize_text_output(workdir, capsys):
    img = sorted((workdir / "syn" / "queries").glob("*.png"))[0]
    code, out, _ = run(capsys, "localize", "--db", workdir / "map.txdb", "--image", img)
    assert code == 0 and out.startswith("tx=")


def test_localize_out_of_map_exits_1(workdir, tmp_path, capsys):
    other = generate_texture(123, 1280, 960)
    write_image(tmp_path / "elsewhere.png", other.pixels)
    code, out, _ = run(capsys, "localize", "--db", workdir / "map.txdb", "--image", tmp_path / "elsewhere.png")
    assert code == 1 and out.startswith("failure: ")


def test_evaluate_with_manifest(workdir, capsys):
    rep = workdir / "eval.json"
    code, out, _ = run(capsys, "evaluate", "--db", workdir / "map.txdb", "--queries", workdir / "syn" / "queries",
                       "--out", rep)
    assert code == 0
    summary = json.loads(out)
    assert summary["queries"] == 3 and summary["success_rate"] == 1.0
    assert json.loads(rep.read_text())["criterion"] == "30px:1.5deg"
    assert rep.with_suffix(".tsv").read_text().count("\n") == 4


def test_evaluate_without_truth_verifies(workdir, tmp_path, capsys):
    qdir = tmp_path / "bare"
    qdir.mkdir()
    for f in sorted((workdir / "syn" / "queries").glob("*.png"))[:2]:
        (qdir / f.name).write_bytes(f.read_bytes())
    code, out, _ = run(capsys, "evaluate", "--db", workdir / "map.txdb", "--queries", qdir,
                       "--out", tmp_path / "r.json", "--tsv", tmp_path / "r.tsv")
    assert code == 0 and json.loads(out)["success_rate"] == 1.0


def test_db_info(workdir, capsys):
    code, out, _ = run(capsys, "db-info", "--db", workdir / "map.txdb", "--json")
    info = json.loads(out)
    assert code == 0 and info["images"] == 4 and info["k"] == 16 and info["features"] == 600
    code, out, _ = run(capsys, "db-info", "--db", workdir / "map.txdb")
    assert code == 0 and "meta.selection\trandom" in out


@pytest.mark.parametrize("argv", [
    ["localize", "--db", "x.txdb", "--image", "y.png", "--bogus"],
    ["build-db", "--map", "m", "--selection", "best", "--out", "o"],
    ["nosuchcommand"],
    ["--threads", "0", "db-info", "--db", "x"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_bad_criterion_exits_2(workdir, capsys):
    code, _, err = run(capsys, "evaluate", "--db", workdir / "map.txdb", "--queries", workdir / "syn" / "queries",
                       "--out", workdir / "x.json", "--criterion", "thirty")
    assert code == 2 and "criterion" in err


def test_missing_files_exit_3(workdir, tmp_path, capsys):
    assert run(capsys, "localize", "--db", tmp_path / "none.txdb", "--image", "q.png")[0] == 3
    assert run(capsys, "localize", "--db", workdir / "map.txdb", "--image", tmp_path / "none.png")[0] == 3
    assert run(capsys, "build-map", "--frames", tmp_path / "empty", "--out", tmp_path / "m")[0] == 3


def test_corrupt_db_exits_3(workdir, tmp_path, capsys):
    buf = bytearray((workdir / "map.txdb").read_bytes())
    buf[200] ^= 0xFF
    (tmp_path / "bad.txdb").write_bytes(bytes(buf))
    code, _, err = run(capsys, "db-info", "--db", tmp_path / "bad.txdb")
    assert code == 3 and "error" in err


def test_threads_env_must_be_integer(workdir, capsys, monkeypatch):
    monkeypatch.setenv("TEXLOC_THREADS", "many")
    assert run(capsys, "db-info", "--db", workdir / "map.txdb")[0] == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "texloc", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("texloc ")


def test_written_image_round_trips(tmp_path):
    img = np.linspace(0, 1, 64 * 48, dtype=np.float32).reshape(48, 64)
    write_image(tmp_path / "a.png", img)
    back = read_image(tmp_path / "a.png")
    assert back.shape == (48, 64) and np.abs(back - img).max() <= 0.5 / 255 + 1e-6
