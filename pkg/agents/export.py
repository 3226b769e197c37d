from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from agents.detector import SceneDetections
from core.errors import DataFormatError
from core.io import write_boxes
from core.logs import LoggingAgent
from core.mesh import export_obj, export_ply


MESH_FORMATS = ("obj", "ply")


@dataclass
class ExportAgent(LoggingAgent):
    """
    Writes run artifacts so they can be inspected or scored later.

    - one ``<scene>.txt`` detection file per scene (gt box columns + score)
    - optionally one mesh per detection, ``<scene>_<i>.<fmt>`` in scene coordinates
    - CSV tables (loss logs, evaluation tables) under their own names
    """

    output_dir: Path
    mesh_format: str = "obj"
    logs: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.output_dir = Path(self.output_dir)
        if self.mesh_format not in MESH_FORMATS:
            raise DataFormatError(f"mesh_format must be one of {MESH_FORMATS}, got {self.mesh_format!r}")

    def export_detections(
        self, scenes: Sequence[SceneDetections], mesh_dir: Optional[Path] = None
    ) -> List[Path]:
        paths: List[Path] = []
        n_meshes = 0
        for scene in scenes:
            paths.append(write_boxes(self.output_dir / f"{scene.name}.txt", scene.detections))
            if mesh_dir is None:
                continue
            for i, mesh in enumerate(scene.meshes):
                if mesh.is_empty:
                    continue
                target = Path(mesh_dir) / f"{scene.name}_{i:03d}.{self.mesh_format}"
                (export_obj if self.mesh_format == "obj" else export_ply)(mesh, target)
                n_meshes += 1
        n_dets = sum(len(s.detections) for s in scenes)
        self.log(f"Exported {n_dets} detections for {len(scenes)} scenes to {self.output_dir}")
        if mesh_dir is not None:
            self.log(f"Exported {n_meshes} meshes to {mesh_dir}")
        return paths

    def export_table(self, df: pd.DataFrame, name: str) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        out_path = self.output_dir / name
        df.to_csv(out_path, index=False, float_format="%.6g")
        self.log(f"Wrote {len(df)} rows to {out_path}")
        return out_path
