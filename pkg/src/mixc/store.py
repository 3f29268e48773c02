"""Image IO, canonical JSON, manifests, checkpoints and run directories."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from mixc.netcore import Model, ModelSpec, ShapeError

CHECKPOINT_MAGIC = b"MXC1"
CHECKPOINT_VERSION = 1
RUN_ROOT_ENV = "MIXC_RUN_ROOT"


class ImageFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# canonical JSON


def _canon(obj) -> str:
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"non-finite float {x!r} in canonical JSON")
        return format(x, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_canon(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ",".join(json.dumps(k) + ":" + _canon(v) for k, v in items) + "}"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Key-sorted, whitespace-free JSON with floats at 17 significant digits."""
    return _canon(obj) + "\n"


def write_json(path, obj):
    Path(path).write_text(canonical_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# images


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_pgm(path, data: np.ndarray):
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_pgm(raw: bytes, path) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed header (ended after {len(tokens)} fields)")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ImageFormatError(f"{path}: malformed header (magic {tokens[0]!r}, expected P5)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise ImageFormatError(f"{path}: malformed header ({e})") from None
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"{path}: malformed header (size {w}x{h})")
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval {maxval}, only 8-bit is read)")
    payload = raw[pos:pos + w * h]
    if len(payload) < w * h:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def _read_png(raw: bytes, path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        im = Image.open(io.BytesIO(raw))
        im.load()
    except UnidentifiedImageError:
        raise ImageFormatError(f"{path}: malformed header (not a PNG)") from None
    except (OSError, SyntaxError) as e:
        raise ImageFormatError(f"{path}: truncated payload ({e})") from None
    if im.mode != "L":
        raise ImageFormatError(f"{path}: unsupported bit depth / mode {im.mode!r} (need 8-bit grayscale)")
    return np.asarray(im, dtype=np.uint8)


def write_image(img: np.ndarray, path):
    """Write a single-channel image as PGM (P5) or PNG, chosen by extension."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[:, :, 0]
    data = to_uint8(img)
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(data, mode="L").save(path, format="PNG")
    elif path.suffix.lower() == ".pgm":
        _write_pgm(path, data)
    else:
        raise ImageFormatError(f"{path}: unsupported extension {path.suffix!r}")


def read_image(path, size: int | None = None, channels: int = 1) -> np.ndarray:
    """Read into an (H, W, channels) float image on the 1/255 grid."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P5" or path.suffix.lower() == ".pgm":
        data = _read_pgm(raw, path)
    else:
        data = _read_png(raw, path)
    img = data.astype(np.float64) / 255.0
    if size is not None and img.shape != (size, size):
        img = resize(img, size)
    img = img[:, :, None]
    return triplicate(img) if channels == 3 else img


def triplicate(img: np.ndarray) -> np.ndarray:
    """Gray (H, W) or (H, W, 1) -> (H, W, 3) with equal channels."""
    if img.ndim == 2:
        img = img[:, :, None]
    return np.repeat(img[:, :, :1], 3, axis=2)


def resize(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an (H, W) image to (size, size), half-pixel centres."""
    from mixc.augment import bilinear_sample

    h, w = img.shape
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    return np.clip(bilinear_sample(img, yy, xx), 0.0, 1.0)


# ---------------------------------------------------------------------------
# datasets


def write_dataset(out_dir, manifest, images: np.ndarray):
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        for entry, img in zip(manifest.entries, images):
            write_image(img, out_dir / entry.path)
        save_manifest(manifest, out_dir / "manifest.json")
    except OSError as e:
        raise OSError(f"writing dataset to {out_dir}: {e.strerror or e}") from e


def save_manifest(manifest, path):
    write_json(path, manifest.to_dict())


def load_manifest(path):
    from mixc.synthgen import DatasetManifest

    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return DatasetManifest.from_dict(read_json(path))


def load_split(data_dir, split: str | None = None, manifest=None, size: int | None = None):
    """Returns (images[N, H, W], labels[N, 4], entries) for one split (or all)."""
    data_dir = Path(data_dir)
    if manifest is None:
        manifest = load_manifest(data_dir)
    entries = manifest.entries if split is None else manifest.split(split)
    images = np.stack([read_image(data_dir / e.path, size)[:, :, 0] for e in entries]) if entries else np.empty((0, 0, 0))
    labels = np.array([e.label for e in entries], dtype=np.float64).reshape(-1, 4)
    return images, labels, entries


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: Model) -> bytes:
    spec_json = canonical_json(model.spec.to_dict()).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<Q", len(spec_json)), spec_json, struct.pack("<I", len(model.params))]
    for p in model.params:
        out.append(struct.pack("<I", p.ndim))
        out.append(struct.pack(f"<{p.ndim}Q", *p.shape))
        out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(model: Model, path):
    Path(path).write_bytes(checkpoint_bytes(model))


def _first_mismatch(expected: ModelSpec, got: ModelSpec) -> str | None:
    for i in range(max(len(expected.layers), len(got.layers))):
        a = expected.layers[i] if i < len(expected.layers) else None
        b = got.layers[i] if i < len(got.layers) else None
        if a != b:
            return f"layer {i}: expected {a}, checkpoint has {b}"
    if expected.in_channels != got.in_channels:
        return f"input channels: expected {expected.in_channels}, checkpoint has {got.in_channels}"
    return None


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n_spec,) = struct.unpack_from("<Q", raw, 8)
    pos = 16
    if pos + n_spec + 4 > len(raw):
        raise CheckpointError(f"{path}: truncated in model spec")
    spec = ModelSpec.from_dict(json.loads(raw[pos:pos + n_spec]))
    pos += n_spec
    if expected_spec is not None:
        diff = _first_mismatch(expected_spec, spec)
        if diff:
            raise CheckpointError(f"{path}: spec mismatch at {diff}")
    (n_tensors,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    shapes = spec.param_shapes()
    if n_tensors != len(shapes):
        raise CheckpointError(f"{path}: {n_tensors} tensors but spec declares {len(shapes)}")
    params = []
    for k in range(n_tensors):
        try:
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos + 4)
        except struct.error:
            raise CheckpointError(f"{path}: truncated at tensor {k}") from None
        pos += 4 + 8 * ndim
        if tuple(shape) != shapes[k]:
            raise CheckpointError(f"{path}: shape inconsistency at tensor {k}: {shape} vs {shapes[k]}")
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at tensor {k}")
        params.append(np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64))
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    try:
        return Model(spec, params)
    except ShapeError as e:
        raise CheckpointError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# run directories

HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")


def run_root(flag: str | None = None) -> Path:
    return Path(flag or os.environ.get(RUN_ROOT_ENV) or ".")


def resolve(path, root: str | None = None) -> Path:
    path = Path(path)
    return path if path.is_absolute() else run_root(root) / path


def write_history_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in history.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in HISTORY_FIELDS[1:]])


def read_history_csv(path):
    from mixc.trainer import EpochRecord, RunHistory

    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    records = [EpochRecord(int(r["epoch"]), *(float(r[k]) for k in HISTORY_FIELDS[1:])) for r in rows]
    return RunHistory(records)


def write_run(run_dir, config: dict, result, metrics: dict) -> dict:
    """Write config.json, history.csv, best.mxc and metrics.json; returns the artifact record."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "config": run_dir / "config.json",
        "history": run_dir / "history.csv",
        "checkpoint": run_dir / "best.mxc",
        "metrics": run_dir / "metrics.json",
    }
    write_json(paths["config"], config)
    write_history_csv(result.history, paths["history"])
    save_checkpoint(result.best_model, paths["checkpoint"])
    write_json(paths["metrics"], metrics)
    return {"run_id": run_dir.name, **{k: str(v) for k, v in paths.items()}}
