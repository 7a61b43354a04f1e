"""On-disk formats: clouds (PLY), masks (16-bit PGM), images (PPM), feature maps (CGCF), manifests (JSON).

All writers are deterministic, so save -> load -> save reproduces the same bytes.
Clouds and feature maps are stored as 32-bit floats; the first save quantizes.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import Camera, FeatureMap, GaussianCloud, SegmentMask

MANIFEST_VERSION = 1
CGCF_MAGIC = b"CGCF"


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf) and buf[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


# ---- PLY -------------------------------------------------------------------

def _ply_columns(feature_dim: int) -> list[str]:
    return (["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
            + [f"f_seg_{i}" for i in range(feature_dim)])


def save_cloud(path, cloud: GaussianCloud, instance_id: np.ndarray | None = None) -> None:
    """Binary little-endian PLY; ``instance_id`` adds an int ``instance`` property."""
    names = _ply_columns(cloud.feature_dim)
    n = len(cloud)
    dtype = [(k, "<f4") for k in names]
    if instance_id is not None:
        instance_id = np.asarray(instance_id)
        if instance_id.shape != (n,):
            raise ValueError("instance_id must have one entry per Gaussian")
        dtype.append(("instance", "<i4"))
    rec = np.zeros(n, dtype=dtype)
    cols = np.concatenate([cloud.positions, cloud.colors, cloud.opacity_logits[:, None],
                           cloud.log_scales, cloud.rotations, cloud.features], axis=1)
    for i, k in enumerate(names):
        rec[k] = cols[:, i]
    if instance_id is not None:
        rec["instance"] = instance_id
    bg = " ".join(f"{float(v):.9g}" for v in cloud.background)
    header = ["ply", "format binary_little_endian 1.0", f"comment background {bg}",
              f"element vertex {n}"]
    header += [f"property float {k}" for k in names]
    if instance_id is not None:
        header.append("property int instance")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "int": "<i4", "int32": "<i4",
              "uint": "<u4", "uchar": "u1", "uint8": "u1", "short": "<i2", "ushort": "<u2"}


def load_cloud_with_extras(path) -> tuple[GaussianCloud, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    n, props, background = None, [], np.zeros(3)
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "binary_little_endian":
            raise FormatError(f"{path}: unsupported PLY format {parts[1]}")
        elif parts[0] == "comment" and len(parts) == 5 and parts[1] == "background":
            background = np.array([float(v) for v in parts[2:]])
        elif parts[0] == "element":
            if parts[1] != "vertex" or n is not None:
                raise FormatError(f"{path}: only a single vertex element is supported")
            n = int(parts[2])
        elif parts[0] == "property":
            if parts[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unsupported property type {parts[1]}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if n is None:
        raise FormatError(f"{path}: missing vertex element")
    dtype = np.dtype(props)
    if len(body) != n * dtype.itemsize:
        raise FormatError(f"{path}: expected {n * dtype.itemsize} bytes of vertex data, got {len(body)}")
    rec = np.frombuffer(body, dtype=dtype, count=n)
    names = set(dtype.names)
    d = 0
    while f"f_seg_{d}" in names:
        d += 1
    missing = [k for k in _ply_columns(d) if k not in names]
    if missing:
        raise FormatError(f"{path}: missing properties {missing}")

    def cols(keys):
        return np.stack([rec[k].astype(np.float64) for k in keys], axis=1).reshape(n, len(keys))

    cloud = GaussianCloud(
        positions=cols(["x", "y", "z"]),
        log_scales=cols(["scale_0", "scale_1", "scale_2"]),
        rotations=cols(["rot_0", "rot_1", "rot_2", "rot_3"]),
        opacity_logits=rec["opacity"].astype(np.float64),
        colors=cols(["f_dc_0", "f_dc_1", "f_dc_2"]),
        features=cols([f"f_seg_{i}" for i in range(d)]),
        background=background,
    )
    known = set(_ply_columns(d))
    extras = {k: np.array(rec[k]) for k in dtype.names if k not in known}
    return cloud, extras


def load_cloud(path) -> GaussianCloud:
    return load_cloud_with_extras(path)[0]


# ---- Netpbm ----------------------------------------------------------------

def _read_netpbm(path, magic: bytes):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    for _ in range(4):
        tok, pos = _read_token(data, pos)
        tokens.append(tok)
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected a {magic.decode()} file")
    w, h, maxval = (int(t) for t in tokens[1:])
    return data[pos + 1:], w, h, maxval


def save_mask(path, mask: SegmentMask) -> None:
    labels = mask.labels
    if labels.size and labels.max() > 65535:
        raise ValueError("segment IDs above 65535 do not fit a 16-bit PGM")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(labels.astype(">u2").tobytes())


def load_mask(path) -> SegmentMask:
    body, w, h, maxval = _read_netpbm(path, b"P5")
    if maxval != 65535:
        raise FormatError(f"{path}: expected maxval 65535, got {maxval}")
    if len(body) != 2 * w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return SegmentMask(np.frombuffer(body, dtype=">u2").reshape(h, w).astype(np.int64))


def save_image(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be H x W x 3")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).tobytes())


def load_image(path) -> np.ndarray:
    body, w, h, maxval = _read_netpbm(path, b"P6")
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    if len(body) != 3 * w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3) / 255.0


# ---- CGCF feature maps -------------------------------------------------------

def save_feature_map(path, fm: FeatureMap | np.ndarray) -> None:
    data = fm.data if isinstance(fm, FeatureMap) else np.asarray(fm)
    if data.ndim != 3:
        raise ValueError("feature map must be H x W x D")
    h, w, d = data.shape
    with open(path, "wb") as fh:
        fh.write(CGCF_MAGIC + struct.pack("<III", h, w, d))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_feature_map(path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if raw[:4] != CGCF_MAGIC or len(raw) < 16:
        raise FormatError(f"{path}: bad CGCF header")
    h, w, d = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * h * w * d:
        raise FormatError(f"{path}: expected {h}x{w}x{d} floats")
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, d).astype(np.float64)
    return FeatureMap(data, (np.linalg.norm(data, axis=-1) > 0).astype(np.float64))


# ---- manifest ----------------------------------------------------------------

def camera_to_record(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width,
            "height": cam.height, "rotation": list(cam.rotation), "translation": list(cam.translation),
            "near": cam.near}


def camera_from_record(rec: dict) -> Camera:
    try:
        return Camera(fx=float(rec["fx"]), fy=float(rec["fy"]), cx=float(rec["cx"]), cy=float(rec["cy"]),
                      width=int(rec["width"]), height=int(rec["height"]),
                      rotation=tuple(float(v) for v in rec["rotation"]),
                      translation=tuple(float(v) for v in rec["translation"]),
                      near=float(rec.get("near", 0.01)))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad camera record: {exc}") from exc


@dataclass
class ViewRecord:
    camera: Camera
    split: str
    image: str
    mask: str
    gt_mask: str | None = None


@dataclass
class Manifest:
    scene: str
    feature_dim: int
    views: list[ViewRecord]
    cloud: str | None = None
    extra: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def split(self, name: str) -> list[int]:
        return [i for i, v in enumerate(self.views) if v.split == name]


def manifest_to_json(m: Manifest) -> str:
    doc = {
        "version": m.version, "scene": m.scene, "feature_dim": m.feature_dim, "cloud": m.cloud,
        "views": [{"camera": camera_to_record(v.camera), "split": v.split, "image": v.image,
                   "mask": v.mask, "gt_mask": v.gt_mask} for v in m.views],
        "extra": m.extra,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_manifest(path, m: Manifest) -> None:
    Path(path).write_text(manifest_to_json(m))


def load_manifest(path, *, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    try:
        views = [ViewRecord(camera_from_record(v["camera"]), v["split"], v["image"], v["mask"], v.get("gt_mask"))
                 for v in doc["views"]]
        m = Manifest(doc["scene"], int(doc["feature_dim"]), views, doc.get("cloud"), doc.get("extra", {}))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc
    for name in ("train", "test"):
        if not m.split(name):
            raise FormatError(f"{path}: no {name} cameras")
    if check_files:
        root = path.parent
        refs = [m.cloud] if m.cloud else []
        for v in views:
            refs += [v.image, v.mask] + ([v.gt_mask] if v.gt_mask else [])
        for ref in refs:
            if not (root / ref).is_file():
                raise FileNotFoundError(f"{path}: referenced file {ref} does not exist")
    return m


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise PermissionError(f"{p} is not writable")
    return p

