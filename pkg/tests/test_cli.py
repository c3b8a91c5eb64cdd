import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from genrep.cli import main
from genrep.fileio import read_csv, write_csv
from genrep.plotting import SchemaError, bars_svg, curve_svg, plot_csv

GOLDEN = Path(__file__).parent / "golden"

TINY = "steps=2\npretrain_steps=2\nproj_steps=2\ndistill_steps=2\nbatch=2\nseeds=0\n"


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(TINY)
    return p


def run(*argv):
    return main([str(a) for a in argv])


# --- plots -----------------------------------------------------------------

def vertices(svg):
    return [len(m.split()) for m in re.findall(r'<polyline class="series"[^>]*points="([^"]*)"', svg)]


def test_curve_has_one_vertex_per_size():
    rows = read_csv(GOLDEN / "curve_input.csv")
    assert vertices(curve_svg(rows)) == [6]


def test_curve_vertices_follow_the_seed_means():
    rows = read_csv(GOLDEN / "curve_input.csv")
    pts = re.search(r'points="([^"]*)"', curve_svg(rows)).group(1).split()
    ys = [float(p.split(",")[1]) for p in pts]
    means = [np.mean([float(r["mean_iou"]) for r in rows if r["n"] == n])
             for n in ("1", "2", "5", "10", "15", "20")]
    # svg y grows downwards: the order of heights is the reverse order of means
    assert np.argsort(ys).tolist() == np.argsort(means)[::-1].tolist()


def test_curve_matches_golden(tmp_path):
    plot_csv(GOLDEN / "curve_input.csv", "curve", tmp_path / "c.svg")
    assert (tmp_path / "c.svg").read_bytes() == (GOLDEN / "curve_golden.svg").read_bytes()


def test_bars_one_rect_per_method_and_fraction():
    rows = [{"method": m, "fraction": f, "miou": "0.5", "seed": s}
            for m in ("scratch", "pseudo", "layermatch") for f in ("0.015625", "1") for s in "01"]
    svg = bars_svg(rows)
    assert svg.count('class="bar"') == 6
    assert all(name in svg for name in ("scratch", "pseudo", "layermatch"))


def test_empty_csv_is_a_schema_error(tmp_path):
    write_csv(tmp_path / "e.csv", ["n", "mean_iou"], [])
    with pytest.raises(SchemaError):
        plot_csv(tmp_path / "e.csv", "curve", tmp_path / "e.svg")
    (tmp_path / "blank.csv").write_text("")
    with pytest.raises(SchemaError):
        plot_csv(tmp_path / "blank.csv", "bars", tmp_path / "e.svg")


def test_wrong_columns_is_a_schema_error():
    with pytest.raises(SchemaError):
        bars_svg([{"n": "1", "mean_iou": "0.5"}])


# --- exit codes ------------------------------------------------------------

def test_plot_exit_codes(tmp_path, capsys):
    assert run("plot", "--csv", tmp_path / "absent.csv", "--kind", "curve",
               "--out", tmp_path / "x.svg") == 2
    write_csv(tmp_path / "e.csv", ["n", "mean_iou"], [])
    assert run("plot", "--csv", tmp_path / "e.csv", "--kind", "curve", "--out", tmp_path / "x.svg") == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert err[0].startswith("error: missing-prerequisite: ")
    assert err[1].startswith("error: config: ")
    assert run("plot", "--csv", GOLDEN / "curve_input.csv", "--kind", "curve",
               "--out", tmp_path / "ok.svg") == 0


def test_config_errors_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour=red\n")
    assert run("sweep", "--config", bad, "--out", tmp_path) == 3
    assert run("sweep", "--config", tmp_path / "absent.cfg", "--out", tmp_path) == 3
    assert run("no-such-command") == 3
    assert run("finetune", "--fraction", "abc") == 3
    assert all(line.startswith("error: config: ") for line in capsys.readouterr().err.splitlines())


def test_missing_prerequisites_exit_2(tmp_path, cfg):
    assert run("finetune", "--config", cfg, "--out", tmp_path, "--backbone", tmp_path / "none.grt") == 2
    assert run("finetune", "--config", cfg, "--out", tmp_path) == 2
    assert run("eval", "--config", cfg, "--model", tmp_path / "none.grt") == 2
    assert run("distill", "--config", cfg, "--out", tmp_path) == 2
    assert run("gen-data", "--config", cfg, "--generator", "neural", "--out", tmp_path / "d") == 2


def test_divergence_exits_4(tmp_path, cfg):
    assert run("finetune", "--config", cfg, "--out", tmp_path, "--random-init",
               "--steps", "3") == 0
    huge = tmp_path / "huge.cfg"
    huge.write_text(TINY + "lr=1e200\n")
    with np.errstate(all="ignore"):
        assert run("finetune", "--config", huge, "--out", tmp_path, "--random-init",
                   "--steps", "3") == 4


# --- end to end ------------------------------------------------------------

def test_pretrain_finetune_eval_chain(tmp_path, cfg):
    assert run("pretrain", "--config", cfg, "--out", tmp_path / "bb.grt") == 0
    assert (tmp_path / "layermatch_curve.csv").exists()
    assert run("finetune", "--config", cfg, "--backbone", tmp_path / "bb.grt",
               "--out", tmp_path / "ft") == 0
    metrics = tmp_path / "metrics.csv"
    for _ in range(2):
        assert run("eval", "--config", cfg, "--model", tmp_path / "ft" / "model.grt",
                   "--out", metrics, "--method", "layermatch", "--fraction", 0.015625) == 0
    rows = read_csv(metrics)
    assert len(rows) == 2 and list(rows[0]) == ["method", "seed", "fraction", "pixel_acc", "miou",
                                                 "iou_class0", "iou_class1", "iou_class2"]
    assert rows[0] == rows[1]
    files = {r["path"] for r in read_csv(tmp_path / "ft" / "files.csv")}
    assert files == {"model.grt", "config.cfg"}


def test_projection_and_distill_chain(tmp_path, cfg):
    assert run("train-proj", "--config", cfg, "--n-annotated", 3, "--out", tmp_path) == 0
    assert run("distill", "--config", cfg, "--n-synthetic", 4, "--out", tmp_path) == 0
    assert run("distill", "--config", cfg, "--n-synthetic", 4, "--out", tmp_path, "--literal") == 0
    assert (tmp_path / "model.grt").exists() and (tmp_path / "distilled_literal.grt").exists()
    assert len(read_csv(tmp_path / "projection_eval.csv")) == 1


def test_pseudo_label_command(tmp_path, cfg):
    assert run("pseudo-label", "--config", cfg, "--out", tmp_path, "--fraction", 0.25) == 0
    rows = read_csv(tmp_path / "pseudo_retained.csv")
    assert [r["round"] for r in rows] == ["1", "2"]


def test_gen_data_writes_a_valid_manifest(tmp_path, cfg):
    from genrep.fileio import DatasetManifest
    assert run("gen-data", "--config", cfg, "--out", tmp_path) == 0
    m = DatasetManifest.read(tmp_path / "manifest.csv")
    assert [len(m.split(s)) for s in ("train", "real-test", "synthetic-test")] == [512, 128, 30]
    assert m.split("synthetic-test")[0]["activations"].count(";") == 3


def test_train_generator_and_neural_generator_use(tmp_path, cfg):
    assert run("train-generator", "--config", cfg, "--out", tmp_path) == 0
    assert run("train-proj", "--config", cfg, "--generator", "neural", "--n-annotated", 2,
               "--out", tmp_path) == 0


def test_sweep_rows_and_order(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps=1\npretrain_steps=1\nbatch=2\nseeds=0,1,2\nrounds=1\n")
    assert run("sweep", "--config", cfg, "--out", tmp_path / "a") == 0
    rows = read_csv(tmp_path / "a" / "metrics.csv")
    assert len(rows) == 36
    keys = [(r["method"], float(r["fraction"]), int(r["seed"])) for r in rows]
    assert keys == sorted(keys)
    assert (tmp_path / "a" / "config.cfg").read_text().startswith("seed=0\n")
    files = {r["path"] for r in read_csv(tmp_path / "a" / "files.csv")}
    assert {"metrics.csv", "config.cfg", "pseudo_retained.csv"} <= files


def test_sweep_is_byte_deterministic_serial_or_parallel(tmp_path, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps=2\npretrain_steps=2\nbatch=2\nseeds=0\nfractions=1/64,1\nrounds=1\n")
    assert run("sweep", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("sweep", "--config", cfg, "--out", tmp_path / "b") == 0
    monkeypatch.setenv("GENREP_THREADS", "2")
    assert run("sweep", "--config", cfg, "--out", tmp_path / "par") == 0
    for name in ("metrics.csv", "pseudo_retained.csv", "layermatch_curve_seed0.csv"):
        ref = (tmp_path / "a" / name).read_bytes()
        assert ref == (tmp_path / "b" / name).read_bytes() == (tmp_path / "par" / name).read_bytes()


def test_proj_curve_and_purity_rows(tmp_path, cfg):
    c = tmp_path / "c.cfg"
    c.write_text("proj_steps=2\nseeds=0,1,2\n")
    assert run("proj-curve", "--config", c, "--out", tmp_path / "pc") == 0
    assert len(read_csv(tmp_path / "pc" / "projection_curve.csv")) == 18
    assert run("purity", "--config", cfg, "--out", tmp_path / "pu") == 0
    rows = read_csv(tmp_path / "pu" / "purity.csv")
    assert len(rows) == 1 and 0 <= float(rows[0]["pretrained"]) <= 1


def test_console_script_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "genrep.cli", "plot", "--csv",
                          str(tmp_path / "absent.csv"), "--kind", "bars", "--out",
                          str(tmp_path / "x.svg")], capture_output=True, text=True)
    assert out.returncode == 2
    assert out.stderr.startswith("error: missing-prerequisite: ")
