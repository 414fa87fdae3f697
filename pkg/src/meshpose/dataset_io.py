"""Dataset serialization.

Layout: ``<root>/<split>/<category>/<index>.img`` raw images plus a single
``<root>/manifest.jsonl`` with one JSON object per sample carrying all scene
metadata (poses in radians, six decimal places).

The .img format is an 8-byte magic, three little-endian uint32 dims (H, W, C),
then the float32 little-endian payload in row-major order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .datagen import SceneSample
from .geometry import Camera, Pose

IMG_MAGIC = b"MPOSEIMG"


def write_image(path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype="<f4")
    if image.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got {image.shape}")
    h, w, c = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(image.tobytes(order="C"))


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < len(IMG_MAGIC) + 12 or raw[: len(IMG_MAGIC)] != IMG_MAGIC:
        raise ValueError(f"{path}: not a meshpose .img file")
    h, w, c = struct.unpack_from("<III", raw, len(IMG_MAGIC))
    payload = raw[len(IMG_MAGIC) + 12 :]
    if len(payload) != h * w * c * 4:
        raise ValueError(f"{path}: truncated image payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()


def _manifest_entry(sample: SceneSample, split: str, rel_path: str, index: int) -> dict:
    cx, cy = sample.camera.principal_point
    h, w = sample.camera.image_size
    return {
        "sample_id": f"{split}/{sample.sample_id}",
        "split": split,
        "category": sample.category,
        "index": index,
        "path": rel_path,
        "pose": {
            "azimuth": round(sample.pose.azimuth, 6),
            "elevation": round(sample.pose.elevation, 6),
            "theta": round(sample.pose.theta, 6),
            "distance": round(sample.pose.distance, 6),
        },
        "camera": {"focal_length": sample.camera.focal_length, "cx": cx, "cy": cy, "height": h, "width": w},
        "texture_id": sample.texture_id,
        "background_id": sample.background_id,
        "domain_tag": sample.domain_tag,
        "seed": sample.seed,
    }


def write_split(samples, root, split: str) -> int:
    """Write one split's images and append its manifest lines.  Returns the
    number of samples written."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    count = 0
    per_category: dict[str, int] = {}
    with open(manifest, "a", encoding="utf-8") as mf:
        for sample in samples:
            index = per_category.setdefault(sample.category, 0)
            per_category[sample.category] = index + 1
            rel = f"{split}/{sample.category}/{index:05d}.img"
            write_image(root / rel, sample.image)
            entry = _manifest_entry(sample, split, rel, index)
            mf.write(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n")
            count += 1
    return count


def read_manifest(root) -> list[dict]:
    manifest = Path(root) / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    entries = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def entry_pose(entry: dict) -> Pose:
    p = entry["pose"]
    return Pose(p["azimuth"], p["elevation"], p["theta"], p["distance"])


def entry_camera(entry: dict) -> Camera:
    c = entry["camera"]
    return Camera(c["focal_length"], (c["cx"], c["cy"]), (c["height"], c["width"]))


def load_split(root, split: str | None = None) -> list[SceneSample]:
    """Load samples (images included) for one split, or all splits."""
    root = Path(root)
    samples = []
    for entry in read_manifest(root):
        if split is not None and entry["split"] != split:
            continue
        samples.append(
            SceneSample(
                image=read_image(root / entry["path"]),
                pose=entry_pose(entry),
                camera=entry_camera(entry),
                category=entry["category"],
                texture_id=entry["texture_id"],
                background_id=entry["background_id"],
                domain_tag=entry["domain_tag"],
                seed=entry["seed"],
                sample_id=entry["sample_id"],
            )
        )
    return samples


def dataset_hash(root) -> str:
    """Content hash of the manifest plus every image file it references."""
    root = Path(root)
    h = hashlib.sha256()
    h.update((root / "manifest.jsonl").read_bytes())
    for entry in read_manifest(root):
        h.update(entry["path"].encode())
        h.update((root / entry["path"]).read_bytes())
    return h.hexdigest()
