"""
File formats.

Point clouds (``.bin``): little-endian int32 header ``N, I`` followed by
``N x (3 + I)`` float32 values (xyz then the I features per point).
ASCII PLY clouds are read through trimesh.

Box files (``.txt``): one box per line, whitespace separated:
``cx cy cz l w h yaw class`` and, for detections, a trailing ``score``.

Checkpoints (``.npz``): one float32 blob per named parameter plus
``__format_version__``, ``__kind__`` and ``__config__`` (JSON text).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Union

import numpy as np
import pandas as pd
import trimesh

from core.errors import DataFormatError
from core.models import Box3D, Detection, LabeledBox, PointCloud


CHECKPOINT_FORMAT_VERSION = 1
BOX_COLUMNS = ["cx", "cy", "cz", "l", "w", "h", "yaw", "class"]
DETECTION_COLUMNS = BOX_COLUMNS + ["score"]
_HEADER = np.dtype("<i4")
_BODY = np.dtype("<f4")


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

def write_cloud_bin(path: Path, pc: PointCloud) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = np.hstack([pc.positions, pc.features]).astype(_BODY)
    with path.open("wb") as fh:
        fh.write(np.array([len(pc), pc.num_features], dtype=_HEADER).tobytes())
        fh.write(body.tobytes())
    return path


def read_cloud_bin(path: Path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"Point cloud not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    n, i = (int(v) for v in np.frombuffer(raw[:8], dtype=_HEADER))
    if n < 0 or i < 0:
        raise DataFormatError(f"{path}: negative header values N={n}, I={i}")
    expected = 8 + n * (3 + i) * _BODY.itemsize
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for N={n}, I={i}, found {len(raw)}")
    body = np.frombuffer(raw[8:], dtype=_BODY).astype(np.float64).reshape(n, 3 + i)
    return PointCloud(body[:, :3], body[:, 3:])


def read_cloud_ply(path: Path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"Point cloud not found: {path}")
    try:
        loaded = trimesh.load(str(path), file_type="ply")
    except Exception as exc:  # trimesh raises a zoo of parser errors
        raise DataFormatError(f"{path}: unreadable PLY ({exc})") from exc
    vertices = getattr(loaded, "vertices", None)
    if vertices is None:
        raise DataFormatError(f"{path}: PLY has no vertex element")
    return PointCloud(np.asarray(vertices, dtype=np.float64))


def read_cloud(path: Path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".bin":
        return read_cloud_bin(path)
    if suffix == ".ply":
        return read_cloud_ply(path)
    raise DataFormatError(f"Unsupported point cloud format {suffix!r} ({path})")


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------

def _box_row(box: Box3D, class_id: int) -> Dict[str, float]:
    cx, cy, cz = box.center.tolist()
    l, w, h = box.size.tolist()
    return {"cx": cx, "cy": cy, "cz": cz, "l": l, "w": w, "h": h, "yaw": box.yaw, "class": int(class_id)}


def boxes_frame(items: List[Union[LabeledBox, Detection]]) -> pd.DataFrame:
    rows = []
    with_score = bool(items) and isinstance(items[0], Detection)
    for item in items:
        row = _box_row(item.box, item.class_id)
        if with_score:
            row["score"] = float(item.score)
        rows.append(row)
    columns = DETECTION_COLUMNS if with_score else BOX_COLUMNS
    return pd.DataFrame(rows, columns=columns)


def write_boxes(path: Path, items: List[Union[LabeledBox, Detection]]) -> Path:
    """Yaw-only text rows; boxes with roll/pitch lose those angles."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = boxes_frame(items)
    df.to_csv(path, sep=" ", header=False, index=False, float_format="%.9g")
    return path


def _read_box_table(path: Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"Box file not found: {path}")
    if path.stat().st_size == 0:
        return pd.DataFrame(columns=DETECTION_COLUMNS)
    try:
        df = pd.read_csv(path, sep=r"\s+", header=None, comment="#")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if df.shape[1] not in (len(BOX_COLUMNS), len(DETECTION_COLUMNS)):
        raise DataFormatError(
            f"{path}: expected {len(BOX_COLUMNS)} or {len(DETECTION_COLUMNS)} columns, found {df.shape[1]}"
        )
    df.columns = DETECTION_COLUMNS[: df.shape[1]]
    return df


def _row_box(row) -> Box3D:
    try:
        return Box3D.from_yaw([row.cx, row.cy, row.cz], [row.l, row.w, row.h], float(row.yaw))
    except ValueError as exc:
        raise DataFormatError(f"invalid box row {tuple(row)!r}: {exc}") from exc


def read_gt_boxes(path: Path) -> List[LabeledBox]:
    df = _read_box_table(path)
    return [LabeledBox(_row_box(r), int(r["class"])) for _, r in df.iterrows()]


def read_detections(path: Path) -> List[Detection]:
    df = _read_box_table(path)
    if len(df) and "score" not in df.columns:
        raise DataFormatError(f"{path}: detection rows need a trailing score column")
    return [Detection(_row_box(r), int(r["class"]), float(r["score"])) for _, r in df.iterrows()]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str
    state: Dict[str, np.ndarray]
    config: Dict[str, object] = field(default_factory=dict)


def save_checkpoint(path: Path, kind: str, state: Mapping[str, np.ndarray], config_json: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs = {name: np.asarray(value, dtype=np.float32) for name, value in state.items()}
    blobs["__format_version__"] = np.array(CHECKPOINT_FORMAT_VERSION, dtype=np.int32)
    blobs["__kind__"] = np.array(kind)
    blobs["__config__"] = np.array(config_json)
    with path.open("wb") as fh:
        np.savez(fh, **blobs)
    return path


def load_checkpoint(path: Path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            blobs = {name: data[name] for name in data.files}
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"{path}: not a checkpoint ({exc})") from exc
    version = int(blobs.pop("__format_version__", -1))
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version!r}")
    found_kind = str(blobs.pop("__kind__"))
    if kind is not None and found_kind != kind:
        raise DataFormatError(f"{path}: expected a {kind!r} checkpoint, found {found_kind!r}")
    config = json.loads(str(blobs.pop("__config__")))
    state = {name: value.astype(np.float64) for name, value in blobs.items()}
    return Checkpoint(kind=found_kind, state=state, config=config)
