"""On-disk formats: PPM images, raw float depth files and the JSON-lines manifest."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import SplitLeak, VersionMismatch

MANIFEST_FORMAT = "topodepth-manifest"
MANIFEST_VERSION = 1
DEPTH_MAGIC = "DEPTHF32"


def write_ppm(path, image) -> None:
    pixels = np.asarray(getattr(image, "pixels", image))
    h, w, _ = pixels.shape
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) -> float64 array (H, W, 3) in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P6" or maxval != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM is supported")
    pos += 1
    data = np.frombuffer(raw[pos:pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_depth(path, depth) -> None:
    depths = np.asarray(getattr(depth, "depths", depth))
    h, w = depths.shape
    with open(path, "wb") as fh:
        fh.write(f"{DEPTH_MAGIC} {w} {h}\n".encode("ascii"))
        fh.write(depths.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    magic, w, h = raw[:nl].decode("ascii").split()
    if magic != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a {DEPTH_MAGIC} file")
    w, h = int(w), int(h)
    data = np.frombuffer(raw[nl + 1:], dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} floats, found {data.size}")
    return data.reshape(h, w).astype(np.float64)


@dataclass
class FrameRecord:
    frame_id: int
    rgb_path: str
    depth_path: str
    pos_x: float
    pos_y: float
    pos_z: float
    yaw: float
    arc_length_m: float
    node_id: int
    split: Optional[str] = None


@dataclass
class DatasetManifest:
    scene_hash: str
    intrinsics: dict
    max_depth: float
    num_nodes: int
    frames: list[FrameRecord]
    root: Path = field(default=Path("."), compare=False)
    version: int = MANIFEST_VERSION

    def split(self, name: str) -> list[FrameRecord]:
        return [f for f in self.frames if f.split == name]


def write_manifest(path, manifest: DatasetManifest) -> None:
    header = {
        "format": MANIFEST_FORMAT,
        "version": manifest.version,
        "scene_hash": manifest.scene_hash,
        "intrinsics": manifest.intrinsics,
        "max_depth": manifest.max_depth,
        "num_nodes": manifest.num_nodes,
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(asdict(f), sort_keys=True) for f in manifest.frames]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a dataset manifest")
    if header.get("version") != MANIFEST_VERSION:
        raise VersionMismatch(
            f"{path}: manifest version {header.get('version')} unsupported (expected {MANIFEST_VERSION})"
        )
    frames = [FrameRecord(**json.loads(ln)) for ln in lines[1:]]
    manifest = DatasetManifest(
        scene_hash=header["scene_hash"],
        intrinsics=header["intrinsics"],
        max_depth=header["max_depth"],
        num_nodes=header["num_nodes"],
        frames=frames,
        root=path.parent,
    )
    for f in frames:
        if not 0 <= f.node_id < manifest.num_nodes:
            raise ValueError(f"{path}: frame {f.frame_id} has node {f.node_id} >= {manifest.num_nodes}")
        if f.split not in (None, "train", "test"):
            raise ValueError(f"{path}: frame {f.frame_id} has unknown split {f.split!r}")
        if check_files:
            for rel in (f.rgb_path, f.depth_path):
                if not (manifest.root / rel).exists():
                    raise FileNotFoundError(f"{manifest.root / rel} referenced by frame {f.frame_id}")
    return manifest


class FrameLoader:
    """Reads frame rasters, refusing splits outside ``allowed`` and recording every file touched."""

    def __init__(self, manifest: DatasetManifest, allowed=("train", "test")):
        self.manifest = manifest
        self.allowed = frozenset(allowed)
        self.accessed: list[str] = []

    def load(self, frame: FrameRecord) -> tuple[np.ndarray, np.ndarray]:
        if frame.split not in self.allowed:
            raise SplitLeak(f"frame {frame.frame_id} (split={frame.split}) requested; allowed {sorted(self.allowed)}")
        rgb_path = self.manifest.root / frame.rgb_path
        dep_path = self.manifest.root / frame.depth_path
        self.accessed += [str(rgb_path), str(dep_path)]
        return read_ppm(rgb_path), read_depth(dep_path)
