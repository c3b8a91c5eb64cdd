import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genrep.autodiff import SeededRNG, Tensor
from genrep.fileio import (ConfigError, DatasetManifest, FormatError, export_dataset, export_pgm,
                           export_ppm, import_pgm, import_ppm, load_config, load_tensor,
                           parse_config, parse_tensor, read_csv, save_tensor, tensor_bytes,
                           write_csv, write_metrics_csv)

GOLDEN = Path(__file__).parent / "golden"


# --- GRT1 ------------------------------------------------------------------

def test_tensor_roundtrip_is_bit_identical(tmp_path):
    t = Tensor(SeededRNG(0).normal((8, 4, 4)))
    save_tensor(tmp_path / "t.grt", t)
    back = load_tensor(tmp_path / "t.grt")
    assert back.shape == (8, 4, 4) and back.data.tobytes() == t.data.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=0, max_size=4), st.integers(0, 2 ** 32 - 1))
def test_tensor_roundtrip_any_shape(shape, seed):
    a = SeededRNG(seed).normal(tuple(shape)) if shape else np.float64(SeededRNG(seed).normal())
    back = parse_tensor(tensor_bytes(a))
    assert back.shape == np.shape(a) and back.tobytes() == np.asarray(a).tobytes()


def test_twelve_float_vector_is_108_bytes(tmp_path):
    save_tensor(tmp_path / "v.grt", np.arange(12.0))
    raw = (tmp_path / "v.grt").read_bytes()
    assert len(raw) == 108
    assert raw[:4] == b"GRT1" and struct.unpack("<II", raw[4:12]) == (1, 12)
    assert struct.unpack("<d", raw[12:20]) == (0.0,) and struct.unpack("<d", raw[-8:]) == (11.0,)


def test_bad_magic_truncation_and_overflow():
    good = tensor_bytes(np.ones(3))
    with pytest.raises(FormatError):
        parse_tensor(b"GRT0" + good[4:])
    with pytest.raises(FormatError):
        parse_tensor(good[:-1])
    with pytest.raises(FormatError):
        parse_tensor(good[:6])
    with pytest.raises(FormatError):
        parse_tensor(good + b"\0")
    huge = b"GRT1" + struct.pack("<III", 2, 0xFFFFFFFF, 0xFFFFFFFF) + b"\0" * 8
    with pytest.raises(FormatError):
        parse_tensor(huge)


# --- images ----------------------------------------------------------------

def test_zero_image_payload(tmp_path):
    export_ppm(tmp_path / "z.ppm", np.zeros((3, 4, 5)))
    raw = (tmp_path / "z.ppm").read_bytes()
    assert raw == b"P6\n5 4\n255\n" + bytes(60)


def test_ppm_clamps_and_roundtrips_quantised_values(tmp_path):
    img = SeededRNG(1).uniform((3, 6, 6), low=-0.2, high=1.2)
    export_ppm(tmp_path / "i.ppm", img)
    back = import_ppm(tmp_path / "i.ppm")
    assert back.shape == (3, 6, 6)
    assert np.max(np.abs(back - np.clip(img, 0, 1))) <= 0.5 / 255 + 1e-12


def test_pgm_grays_for_three_classes(tmp_path):
    export_pgm(tmp_path / "l.pgm", np.array([[0, 1, 2]]), 3)
    raw = (tmp_path / "l.pgm").read_bytes()
    assert raw.endswith(bytes([0, 127, 255]))
    assert raw.startswith(b"P5\n3 1\n255\n")


@pytest.mark.parametrize("n_classes", [2, 3, 7, 100, 255, 256])
def test_pgm_roundtrip(tmp_path, n_classes):
    lab = SeededRNG(n_classes).integers(0, n_classes, size=(9, 11))
    lab.flat[:2] = [0, n_classes - 1]
    export_pgm(tmp_path / "l.pgm", lab, n_classes)
    assert np.array_equal(import_pgm(tmp_path / "l.pgm", n_classes), lab)


def test_image_errors(tmp_path):
    with pytest.raises(ValueError):
        export_ppm(tmp_path / "x.ppm", np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        export_pgm(tmp_path / "x.pgm", np.array([[3]]), 3)
    export_pgm(tmp_path / "x.pgm", np.array([[1]]), 3)
    with pytest.raises(FormatError):
        import_ppm(tmp_path / "x.pgm")


# --- CSV -------------------------------------------------------------------

def test_empty_rows_give_header_only(tmp_path):
    write_csv(tmp_path / "a.csv", ["x", "y"], [])
    assert (tmp_path / "a.csv").read_text() == "x,y\n"


def test_two_appends_one_header(tmp_path):
    p = tmp_path / "a.csv"
    write_csv(p, ["x", "y"], [[1, 2.0]])
    write_csv(p, ["x", "y"], [{"x": 3, "y": 0.25}])
    assert p.read_text() == "x,y\n1,2\n3,0.25\n"
    write_csv(p, ["x", "y"], [[5, 6]], append=False)
    assert p.read_text() == "x,y\n5,6\n"


def test_metrics_csv_matches_golden(tmp_path):
    rows = [
        {"method": "scratch", "seed": 0, "fraction": 1 / 64, "pixel_acc": 1 / 3,
         "miou": 123456789.0, "iou_class0": 1e-7, "iou_class1": 0.0, "iou_class2": math.nan},
        {"method": "layermatch", "seed": 2, "fraction": 1, "pixel_acc": 0.5, "miou": 2 / 3,
         "iou_class0": 2.5, "iou_class1": -math.pi, "iou_class2": 1e5},
    ]
    p = tmp_path / "metrics.csv"
    write_metrics_csv(p, rows[:1])
    write_metrics_csv(p, rows[1:])
    assert p.read_bytes() == (GOLDEN / "metrics_golden.csv").read_bytes()
    assert read_csv(p)[1]["iou_class1"] == "-3.14159"


def test_csv_row_width_checked(tmp_path):
    with pytest.raises(ValueError):
        write_csv(tmp_path / "a.csv", ["x", "y"], [[1]])


# --- configs ---------------------------------------------------------------

def test_config_defaults_and_parsing():
    cfg = parse_config("# run\nseed = 3\nfractions=1/64, 1/4,1\nlr=0.003\n\nmethod=scratch  # inline\n")
    assert cfg.seed == 3 and cfg.lr == 0.003 and cfg.method == "scratch"
    assert cfg.fractions == (1 / 64, 0.25, 1.0)
    assert cfg.generator == "procedural" and cfg.steps is None and cfg.get("steps", 7) == 7
    assert cfg.seeds == (0, 1, 2)


@pytest.mark.parametrize("text", ["colour=red", "seed=1\nseed=2", "seed", "seed=one",
                                  "generator=stylegan"])
def test_config_rejections(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_override_and_dump_roundtrip(tmp_path):
    cfg = parse_config("seed=1").override(seed=5, steps=None, lr=0.01)
    assert cfg.seed == 5 and cfg.steps is None and cfg.lr == 0.01
    with pytest.raises(ConfigError):
        cfg.override(colour=1)
    again = parse_config(cfg.dump())
    assert again.values == cfg.values


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")
    assert load_config(None).seed == 0


# --- manifests -------------------------------------------------------------

def test_dataset_export_and_manifest(tmp_path):
    rng = SeededRNG(0)
    splits = {"train": {"images": rng.uniform((2, 3, 4, 4)),
                        "labels": rng.integers(0, 3, size=(2, 4, 4)),
                        "latents": rng.normal((2, 12))},
              "synthetic-test": {"images": rng.uniform((1, 3, 4, 4)),
                                 "labels": rng.integers(0, 3, size=(1, 4, 4)),
                                 "activations": [rng.normal((1, 8, 2, 2)), rng.normal((1, 8, 4, 4))]}}
    export_dataset(tmp_path, splits, seed=4, generator_name="procedural")
    m = DatasetManifest.read(tmp_path / "manifest.csv")
    assert m.seed == 4 and m.generator == "procedural"
    assert [e["id"] for e in m.split("train")] == ["train-00000", "train-00001"]
    entry = m.split("synthetic-test")[0]
    assert entry["activations"].count(";") == 1
    assert np.array_equal(import_pgm(tmp_path / entry["label"], 3), splits["synthetic-test"]["labels"][0])
    phi2 = load_tensor(tmp_path / entry["activations"].split(";")[1])
    assert phi2.data.tobytes() == splits["synthetic-test"]["activations"][1][0].tobytes()
    (tmp_path / "train-00001" / "image.ppm").unlink()
    with pytest.raises(FormatError):
        DatasetManifest.read(tmp_path / "manifest.csv")


def test_manifest_rejects_duplicates_and_unknown_splits():
    e = {"id": "a", "split": "train", "image": "", "label": "", "latent": "", "activations": ""}
    with pytest.raises(FormatError):
        DatasetManifest([e, dict(e)], 0, "procedural").validate()
    with pytest.raises(FormatError):
        DatasetManifest([dict(e, split="val")], 0, "procedural").validate()
