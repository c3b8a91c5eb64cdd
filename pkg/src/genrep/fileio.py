"""File formats: GRT1 tensors, PPM/PGM images, CSV tables, run configs, dataset manifests.

GRT1 layout (little-endian throughout)::

    b"GRT1" | rank: u32 | extents: rank * u32 | values: prod(extents) * f64
"""

import csv
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"GRT1"


class FormatError(ValueError):
    """A file does not follow the expected layout."""


class ConfigError(ValueError):
    """A run configuration is malformed or contains unknown keys."""


# --- tensors ---------------------------------------------------------------

def tensor_bytes(array):
    from .autodiff import Tensor
    a = np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f8")
    if any(d > 0xFFFFFFFF for d in a.shape):
        raise FormatError("extent does not fit in u32")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a).tobytes()


def save_tensor(path, tensor):
    Path(path).write_bytes(tensor_bytes(tensor))


def parse_tensor(buf):
    if len(buf) < 8:
        raise FormatError("truncated header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * rank
    if len(buf) < head:
        raise FormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = 1
    for d in shape:
        count *= d
    if count * 8 > len(buf) - head:
        # covers both truncation and absurd extents whose product overflows any real file
        raise FormatError(f"payload holds {len(buf) - head} bytes, extents need {count * 8}")
    if count * 8 != len(buf) - head:
        raise FormatError("trailing bytes after payload")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=head).astype(np.float64).reshape(shape)


def load_tensor(path):
    """Load a GRT1 file as a :class:`~genrep.autodiff.Tensor`."""
    from .autodiff import Tensor
    return Tensor(parse_tensor(Path(path).read_bytes()))


# --- images ----------------------------------------------------------------

def _quantize(image):
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_ppm(path, image):
    """Binary P6 from a (3, H, W) float image, values clamped to [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + _quantize(img).transpose(1, 2, 0).tobytes())


def export_pgm(path, labels, n_classes):
    """Binary P5 with class c stored as gray floor(255 * c / (C - 1))."""
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ValueError("label map must be 2-d")
    if n_classes < 2 or n_classes > 256:
        raise ValueError("n_classes must be in [2, 256]")
    if lab.min() < 0 or lab.max() >= n_classes:
        raise ValueError("class index out of range")
    gray = (255 * lab.astype(np.int64)) // (n_classes - 1)
    h, w = lab.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.astype(np.uint8).tobytes())


def _read_pnm(path, magic, channels):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != magic:
        raise FormatError(f"expected {magic!r}, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError("only 8-bit files are supported")
    payload = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if payload.size != w * h * channels:
        raise FormatError("payload size does not match header")
    return payload.reshape(h, w, channels)


def import_ppm(path):
    return _read_pnm(path, b"P6", 3).transpose(2, 0, 1) / 255.0


def import_pgm(path, n_classes):
    gray = _read_pnm(path, b"P5", 1)[..., 0].astype(np.int64)
    # inverse of floor(255 c / (C-1)): the smallest c with floor(255 c/(C-1)) >= gray
    return np.ceil(gray * (n_classes - 1) / 255.0 - 1e-9).astype(np.int64)


# --- CSV -------------------------------------------------------------------

def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.6g" % v
    return str(v)


def write_csv(path, columns, rows, append=True):
    """Write ``rows`` (sequences or dicts) under ``columns``.

    With ``append`` the header is written only when the file is new or empty.
    """
    path = Path(path)
    fresh = not append or not path.exists() or path.stat().st_size == 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if fresh:
        writer.writerow(columns)
    for row in rows:
        if isinstance(row, dict):
            row = [row[c] for c in columns]
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} fields, expected {len(columns)}")
        writer.writerow([format_value(v) for v in row])
    with open(path, "w" if fresh else "a", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


METRICS_COLUMNS = ["method", "seed", "fraction", "pixel_acc", "miou",
                   "iou_class0", "iou_class1", "iou_class2"]


def write_metrics_csv(path, rows, append=True):
    write_csv(path, METRICS_COLUMNS, rows, append)


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# --- run configs -----------------------------------------------------------

def _fraction(s):
    s = s.strip()
    if "/" in s:
        a, b = s.split("/", 1)
        return float(a) / float(b)
    return float(s)


def _fractions(s):
    return tuple(_fraction(t) for t in s.split(",") if t.strip())


def _ints(s):
    return tuple(int(t) for t in s.split(",") if t.strip())


def _generator_kind(s):
    if s not in ("procedural", "neural"):
        raise ValueError("generator must be 'procedural' or 'neural'")
    return s


# key -> (parser, default)
CONFIG_SCHEMA = {
    "seed": (int, 0),
    "generator": (_generator_kind, "procedural"),
    "steps": (int, None),
    "batch": (int, None),
    "lr": (float, None),
    "fractions": (_fractions, (1 / 64, 1 / 16, 1 / 4, 1.0)),
    "method": (str, None),
    "methods": (lambda s: tuple(t.strip() for t in s.split(",") if t.strip()),
                ("scratch", "pseudo", "layermatch")),
    "seeds": (_ints, (0, 1, 2)),
    "sizes": (_ints, (1, 2, 5, 10, 15, 20)),
    "n_annotated": (int, 20),
    "n_synthetic": (int, 2000),
    "pretrain_steps": (int, None),
    "proj_steps": (int, None),
    "distill_steps": (int, None),
    "generator_steps": (int, None),
    "threshold": (float, 0.9),
    "rounds": (int, 2),
    "pixels_per_image": (int, 200),
    "n_images": (int, 10),
}


@dataclass
class RunConfig:
    """Parsed ``key=value`` configuration; unset optional keys are None."""

    values: dict = field(default_factory=dict)
    explicit: frozenset = frozenset()

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def get(self, key, fallback=None):
        v = self.values.get(key)
        return fallback if v is None else v

    def override(self, **kw):
        vals = dict(self.values)
        for k, v in kw.items():
            if k not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            if v is not None:
                vals[k] = v
        return RunConfig(vals, self.explicit | {k for k, v in kw.items() if v is not None})

    def dump(self):
        """Resolved config in the same key=value syntax (unset keys omitted)."""
        lines = []
        for key in CONFIG_SCHEMA:
            v = self.values[key]
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(format_value(x) for x in v)
            lines.append(f"{key}={format_value(v)}")
        return "\n".join(lines) + "\n"


def parse_config(text):
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {k: d for k, (_, d) in CONFIG_SCHEMA.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = CONFIG_SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        seen.add(key)
    return RunConfig(values, frozenset(seen))


def load_config(path=None):
    if path is None:
        return parse_config("")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


# --- dataset manifests -----------------------------------------------------

SPLITS = ("train", "real-test", "synthetic-test")


@dataclass
class DatasetManifest:
    """Sample ids with split membership and per-sample file paths (relative)."""

    entries: list
    seed: int
    generator: str

    COLUMNS = ("id", "split", "image", "label", "latent", "activations")

    def validate(self, root=None):
        ids = [e["id"] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate sample ids in manifest")
        for e in self.entries:
            if e["split"] not in SPLITS:
                raise FormatError(f"unknown split {e['split']!r}")
            if root is not None:
                for col in self.COLUMNS[2:]:
                    for rel in filter(None, e[col].split(";")):
                        if not (Path(root) / rel).exists():
                            raise FormatError(f"missing file {rel}")
        return self

    def write(self, path):
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# seed={self.seed} generator={self.generator}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for e in self.entries:
                w.writerow([e[c] for c in self.COLUMNS])

    @classmethod
    def read(cls, path, check_files=True):
        path = Path(path)
        with open(path, encoding="utf-8", newline="") as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise FormatError("manifest lacks its header comment")
            meta = dict(kv.split("=", 1) for kv in first[2:].split())
            entries = list(csv.DictReader(fh))
        m = cls(entries, int(meta["seed"]), meta["generator"])
        return m.validate(path.parent if check_files else None)

    def split(self, name):
        return [e for e in self.entries if e["split"] == name]


def export_dataset(root, splits, seed, generator_name, n_classes=3):
    """Write per-sample directories plus ``manifest.csv``.

    ``splits`` maps a split name to a dict with ``images``, ``labels`` and
    optionally ``latents`` and ``activations`` (a list of stage arrays).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, data in splits.items():
        for i in range(len(data["images"])):
            sid = f"{split}-{i:05d}"
            d = root / sid
            d.mkdir(exist_ok=True)
            export_ppm(d / "image.ppm", data["images"][i])
            export_pgm(d / "label.pgm", data["labels"][i], n_classes)
            entry = {"id": sid, "split": split, "image": f"{sid}/image.ppm",
                     "label": f"{sid}/label.pgm", "latent": "", "activations": ""}
            if data.get("latents") is not None:
                save_tensor(d / "latent.grt", data["latents"][i])
                entry["latent"] = f"{sid}/latent.grt"
            if data.get("activations") is not None:
                names = []
                for j, stage in enumerate(data["activations"]):
                    save_tensor(d / f"phi{j + 1}.grt", stage[i])
                    names.append(f"{sid}/phi{j + 1}.grt")
                entry["activations"] = ";".join(names)
            entries.append(entry)
    manifest = DatasetManifest(entries, seed, generator_name)
    manifest.write(root / "manifest.csv")
    return manifest


def write_file_manifest(out_dir, files):
    """List produced files (relative to ``out_dir``) with their byte sizes."""
    out_dir = Path(out_dir)
    rows = sorted(str(Path(f).relative_to(out_dir)) if Path(f).is_absolute() else str(f)
                  for f in files)
    write_csv(out_dir / "files.csv", ["path", "bytes"],
              [[r, os.path.getsize(out_dir / r)] for r in rows], append=False)
