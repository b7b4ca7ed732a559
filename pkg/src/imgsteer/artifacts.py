"""On-disk formats: model checkpoints, steering vectors, images, loss traces, plots.

All binary payloads are little-endian float64 so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np
from PIL import Image

from .model import ToyVLM, parameter_shapes
from .optim import TraceRow
from .steering import SteeringVectorSet
from .tensor import Tensor

CKPT_MAGIC = "IMGSTEER-CKPT 1"
RAW_MAGIC = "IMGSTEER-RAW 1"
VEC_FORMAT = "imgsteer-vectors-1"
_F8 = np.dtype("<f8")
# one encoder configuration for every PNG we write
PNG_OPTIONS = {"format": "PNG", "optimize": False, "compress_level": 6}


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ToyVLM, path: str | Path) -> None:
    """Text header ``name shape offset`` per parameter, then one float64 blob."""
    lines, blobs, offset = [CKPT_MAGIC, f"model {model.config.name}"], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype=_F8)
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"param {name} {shape} {offset}")
        blobs.append(arr.tobytes())
        offset += arr.size
    lines.append("end")
    with Path(path).open("wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for b in blobs:
            fh.write(b)


def _read_header(fh, magic: str) -> list[str]:
    first = fh.readline().decode().rstrip("\n")
    if first != magic:
        raise FormatError(f"bad magic {first!r}, expected {magic!r}")
    lines = []
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("header not terminated by 'end'")
        line = line.decode().rstrip("\n")
        if line == "end":
            return lines
        lines.append(line)


def load_checkpoint(path: str | Path, model: ToyVLM) -> ToyVLM:
    """Replace ``model``'s parameters with those stored at ``path``.

    Architecture, plants and knowledge come from ``model`` (i.e. the config).
    """
    with Path(path).open("rb") as fh:
        header = _read_header(fh, CKPT_MAGIC)
        blob = np.frombuffer(fh.read(), dtype=_F8)
    expected = dict(parameter_shapes(model.config))
    params = {}
    for line in header:
        parts = line.split()
        if parts[0] != "param":
            continue
        _, name, shape_s, off_s = parts
        shape = tuple(int(s) for s in shape_s.split("x")) if shape_s else ()
        if name not in expected:
            raise FormatError(f"checkpoint parameter {name!r} unknown to config {model.config.name!r}")
        if tuple(expected[name]) != shape:
            raise FormatError(f"{name}: checkpoint shape {shape} != config shape {expected[name]}")
        off, size = int(off_s), int(np.prod(shape))
        if off + size > blob.size:
            raise FormatError(f"{name}: payload truncated")
        arr = blob[off:off + size].reshape(shape).copy()
        arr.setflags(write=False)
        params[name] = Tensor(arr)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise FormatError(f"checkpoint lacks parameters {missing}")
    return dataclasses.replace(model, params=params)


# ---------------------------------------------------------------------------
# steering vectors


def save_vectors(vs: SteeringVectorSet, stem: str | Path) -> tuple[Path, Path]:
    """``<stem>.json`` manifest plus ``<stem>.bin`` raw payload."""
    stem = Path(stem)
    man_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    layers = vs.layers
    dims = {str(l): int(np.asarray(vs.vectors[l]).size) for l in layers}
    manifest = {
        "format": VEC_FORMAT,
        "layers": layers,
        "dims": dims,
        "n_pairs": vs.n_pairs,
        "meta": vs.meta,
        "dtype": "<f8",
        "payload": bin_path.name,
    }
    with bin_path.open("wb") as fh:
        for l in layers:
            fh.write(np.ascontiguousarray(vs.vectors[l], dtype=_F8).tobytes())
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return man_path, bin_path


def load_vectors(stem: str | Path) -> SteeringVectorSet:
    stem = Path(stem)
    man_path = stem.with_suffix(".json")
    manifest = json.loads(man_path.read_text())
    if manifest.get("format") != VEC_FORMAT:
        raise FormatError(f"{man_path}: not a steering-vector manifest")
    blob = np.frombuffer((man_path.parent / manifest["payload"]).read_bytes(), dtype=_F8)
    vectors, off = {}, 0
    for l in manifest["layers"]:
        n = manifest["dims"][str(l)]
        if off + n > blob.size:
            raise FormatError(f"{stem}: payload truncated at layer {l}")
        vectors[int(l)] = blob[off:off + n].copy()
        off += n
    if off != blob.size:
        raise FormatError(f"{stem}: payload has {blob.size - off} trailing values")
    return SteeringVectorSet(vectors, n_pairs=manifest["n_pairs"], meta=manifest["meta"])


# ---------------------------------------------------------------------------
# images


def _check_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise FormatError(f"expected an (H, W, 3) image, got {arr.shape}")
    return arr


def save_raw_image(img, path: str | Path) -> None:
    arr = _check_image(img)
    h, w, c = arr.shape
    with Path(path).open("wb") as fh:
        fh.write(f"{RAW_MAGIC}\n{h} {w} {c}\nend\n".encode())
        fh.write(np.ascontiguousarray(arr, dtype=_F8).tobytes())


def load_raw_image(path: str | Path) -> np.ndarray:
    with Path(path).open("rb") as fh:
        header = _read_header(fh, RAW_MAGIC)
        data = np.frombuffer(fh.read(), dtype=_F8)
    try:
        h, w, c = (int(v) for v in header[0].split())
    except (IndexError, ValueError):
        raise FormatError(f"{path}: malformed raw image header") from None
    if data.size != h * w * c:
        raise FormatError(f"{path}: expected {h * w * c} values, found {data.size}")
    return data.reshape(h, w, c).copy()


def quantize(img) -> np.ndarray:
    return np.round(np.clip(_check_image(img), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img, path: str | Path) -> None:
    Image.fromarray(quantize(img), mode="RGB").save(path, **PNG_OPTIONS)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(img, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    png, raw = stem.with_suffix(".png"), stem.with_suffix(".raw")
    save_png(img, png)
    save_raw_image(img, raw)
    return png, raw


def load_image(path: str | Path) -> np.ndarray:
    """Prefer the lossless ``.raw`` sibling when it exists."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    if raw.exists():
        return load_raw_image(raw)
    if path.suffix == ".png":
        return load_png(path)
    raise FileNotFoundError(f"no image at {path} (looked for {raw.name} and .png)")


# ---------------------------------------------------------------------------
# traces and plots


def write_trace_csv(rows: Sequence[TraceRow], model_names: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", *[f"loss_{n}" for n in model_names], "ensemble", "step"])
        for r in rows:
            w.writerow([r.iteration, *[repr(float(x)) for x in r.per_model],
                        repr(float(r.ensemble)), repr(float(r.step))])


def read_trace_csv(path: str | Path) -> list[TraceRow]:
    with Path(path).open(newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        return [TraceRow(int(r[0]), [float(x) for x in r[1:-2]], float(r[-2]), float(r[-1])) for r in rd]


def bar_svg(labels: Sequence[str], values: Sequence[float], title: str = "",
            width: int = 480, height: int = 260) -> str:
    """Minimal vertical bar chart for values in [0, 1]."""
    if len(labels) != len(values):
        raise ValueError("labels and values differ in length")
    pad_l, pad_b, pad_t = 40, 60, 30
    plot_w, plot_h = width - pad_l - 10, height - pad_b - pad_t
    n = max(len(values), 1)
    slot = plot_w / n
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{pad_l}" y1="{pad_t + plot_h}" x2="{width - 10}" y2="{pad_t + plot_h}" stroke="black"/>']
    for tick in (0.0, 0.5, 1.0):
        y = pad_t + plot_h * (1 - tick)
        out.append(f'<text x="{pad_l - 4}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{tick:.1f}</text>')
    for i, (lab, v) in enumerate(zip(labels, values)):
        v = min(max(float(v), 0.0), 1.0)
        bh = plot_h * v
        x = pad_l + i * slot + slot * 0.15
        out.append(f'<rect x="{x:.1f}" y="{pad_t + plot_h - bh:.1f}" width="{slot * 0.7:.1f}" '
                   f'height="{bh:.1f}" fill="#4a7ab5"><title>{escape(lab)}: {v:.3f}</title></rect>')
        out.append(f'<text x="{x + slot * 0.35:.1f}" y="{pad_t + plot_h + 14}" text-anchor="middle" '
                   f'font-size="9">{escape(lab)}</text>')
        out.append(f'<text x="{x + slot * 0.35:.1f}" y="{pad_t + plot_h - bh - 3:.1f}" '
                   f'text-anchor="middle" font-size="9">{v:.3f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
