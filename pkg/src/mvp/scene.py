"""Scene data model and file I/O.

Formats (all little-endian unless noted):

MVPC1 point cloud
    magic "MVPC1" | u64 point count | f64 sweep timestamp |
    count records of five f32: x, y, z, r, t

MVVP1 virtual points
    magic "MVVP1" | u64 group count | u32 D |
    per group: u32 instance_id | u64 point count |
               count records of (4 + D) f32: x, y, z, t, e_0 .. e_{D-1}

Instance masks
    16-bit binary PGM (P5, maxval 65535, big-endian samples, one instance
    id per pixel, 0 = background) plus a JSON sidecar:
    {"num_classes": C, "instances": [{"instance_id", "class_id", "score"}]}

Calibration JSON
    keys "T_car_from_lidar", "T_rgb_from_car", "T_t1_from_t2" (16-element
    row-major arrays), "intrinsics" {fx, fy, cx, cy, width, height},
    "t_lidar", "t_camera".

Floats are stored at 32-bit precision in the binary formats and computed
on at 64-bit; round trips are bit-exact over the stored 32-bit values.
Loaders reject malformed input, they never repair it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import CalibrationError, FormatError
from .geometry import CameraIntrinsics, RigidTransform, compose

CLOUD_MAGIC = b"MVPC1"
VIRTUAL_MAGIC = b"MVVP1"

_CLOUD_RECORD_BYTES = 5 * 4
_CLOUD_PAYLOAD_OFFSET = 5 + 8 + 8


class LidarPoint(NamedTuple):
    x: float
    y: float
    z: float
    r: float
    t: float


@dataclass(frozen=True)
class PointCloud:
    """One Lidar sweep: (N, 5) float32 rows of (x, y, z, r, t) plus a timestamp.

    Coordinates are meters in the Lidar frame, r is reflectance in [0, 1],
    t is the per-point time offset in seconds relative to the sweep
    timestamp (0 for single-sweep inputs).
    """

    data: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 2 or d.shape[1] != 5:
            raise ValueError(f"cloud data must be (N, 5), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("cloud contains non-finite values")
        r = d[:, 3]
        if d.shape[0] and (r.min() < 0.0 or r.max() > 1.0):
            raise ValueError("reflectance must lie in [0, 1]")
        if not np.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)

    @classmethod
    def from_arrays(cls, xyz, reflectance=None, time_offsets=None,
                    timestamp: float = 0.0) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float32).reshape(-1, 3)
        n = xyz.shape[0]
        data = np.zeros((n, 5), dtype=np.float32)
        data[:, :3] = xyz
        if reflectance is not None:
            data[:, 3] = np.asarray(reflectance, dtype=np.float32)
        if time_offsets is not None:
            data[:, 4] = np.asarray(time_offsets, dtype=np.float32)
        return cls(data, timestamp)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.data[:, 3]

    @property
    def time_offsets(self) -> np.ndarray:
        return self.data[:, 4]

    def point(self, i: int) -> LidarPoint:
        return LidarPoint(*(float(v) for v in self.data[i]))


@dataclass(frozen=True)
class InstanceMeta:
    """Per-instance detection metadata."""

    instance_id: int
    class_id: int
    score: float
    pixel_count: int


@dataclass(frozen=True)
class InstanceMaskSet:
    """Flat instance-id map plus per-instance metadata.

    instance_map is (height, width) uint16; 0 is background and any id
    j >= 1 must have a matching InstanceMeta entry with at least one pixel.
    num_classes is advisory metadata from the producer (the 2D detector's
    label-space size) and may be None.
    """

    instance_map: np.ndarray
    instances: tuple
    num_classes: Optional[int] = None

    def __post_init__(self):
        m = np.asarray(self.instance_map)
        if m.ndim != 2:
            raise ValueError(f"instance map must be 2D, got shape {m.shape}")
        if m.dtype != np.uint16:
            if not np.issubdtype(m.dtype, np.integer):
                raise ValueError("instance map must be an integer array")
            if m.size and (m.min() < 0 or m.max() > 0xFFFF):
                raise ValueError("instance ids must fit in uint16")
            m = m.astype(np.uint16)
        counts = np.bincount(m.ravel(), minlength=1)
        metas = tuple(self.instances)
        ids = [meta.instance_id for meta in metas]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate instance ids in metadata")
        known = set(ids)
        for meta in metas:
            if meta.instance_id < 1:
                raise ValueError(f"instance id must be >= 1, got {meta.instance_id}")
            if not 0.0 <= meta.score <= 1.0:
                raise ValueError(f"score must lie in [0, 1], got {meta.score}")
            have = int(counts[meta.instance_id]) if meta.instance_id < len(counts) else 0
            if have == 0:
                raise ValueError(f"instance {meta.instance_id} has no pixels")
            if meta.pixel_count != have:
                raise ValueError(
                    f"instance {meta.instance_id}: pixel_count {meta.pixel_count} "
                    f"does not match map ({have})")
        present = np.unique(m)
        for j in present:
            if j != 0 and int(j) not in known:
                raise ValueError(f"map contains instance id {int(j)} with no metadata")
        m.flags.writeable = False
        object.__setattr__(self, "instance_map", m)
        object.__setattr__(self, "instances", metas)

    @classmethod
    def build(cls, instance_map, metadata: Sequence[tuple],
              num_classes: Optional[int] = None) -> "InstanceMaskSet":
        """Construct from a map plus (instance_id, class_id, score) rows.

        Pixel counts are computed from the map; rows whose id never occurs in
        the map are rejected by validation.
        """
        m = np.asarray(instance_map)
        counts = np.bincount(m.astype(np.int64).ravel(), minlength=1)
        metas = []
        for instance_id, class_id, score in metadata:
            have = int(counts[instance_id]) if instance_id < len(counts) else 0
            metas.append(InstanceMeta(int(instance_id), int(class_id), float(score), have))
        return cls(m, tuple(metas), num_classes)

    @property
    def width(self) -> int:
        return int(self.instance_map.shape[1])

    @property
    def height(self) -> int:
        return int(self.instance_map.shape[0])

    def meta(self, instance_id: int) -> InstanceMeta:
        for m in self.instances:
            if m.instance_id == instance_id:
                return m
        raise KeyError(instance_id)

    def pixels_of(self, instance_id: int) -> np.ndarray:
        """(P, 2) integer (u, v) pixels of one instance, in row-major order."""
        rows, cols = np.nonzero(self.instance_map == instance_id)
        return np.stack([cols, rows], axis=1).astype(np.int64)


def semantic_feature(meta: InstanceMeta, num_classes: int) -> np.ndarray:
    """One-hot class encoding followed by the detection score; D = C + 1."""
    if not 0 <= meta.class_id < num_classes:
        raise ValueError(
            f"class_id {meta.class_id} out of range for {num_classes} classes")
    e = np.zeros(num_classes + 1)
    e[meta.class_id] = 1.0
    e[num_classes] = meta.score
    return e


@dataclass(frozen=True)
class VirtualPointGroup:
    """Virtual points of one source instance: (k, 4 + D) rows of (x, y, z, t, e...)."""

    instance_id: int
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2 or d.shape[1] < 4:
            raise ValueError(f"group data must be (k, 4 + D), got {d.shape}")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def timestamps(self) -> np.ndarray:
        return self.data[:, 3]

    @property
    def features(self) -> np.ndarray:
        return self.data[:, 4:]


@dataclass(frozen=True)
class VirtualPointSet:
    """Virtual points grouped by source instance, all with feature width D."""

    groups: tuple
    num_feature_dims: int

    def __post_init__(self):
        groups = tuple(self.groups)
        for g in groups:
            if g.data.shape[1] != 4 + self.num_feature_dims:
                raise FormatError(
                    f"group {g.instance_id}: feature width "
                    f"{g.data.shape[1] - 4} != D = {self.num_feature_dims}")
        object.__setattr__(self, "groups", groups)

    @classmethod
    def empty(cls, num_feature_dims: int) -> "VirtualPointSet":
        return cls((), num_feature_dims)

    def __len__(self) -> int:
        return sum(len(g) for g in self.groups)

    def group_for(self, instance_id: int) -> Optional[VirtualPointGroup]:
        for g in self.groups:
            if g.instance_id == instance_id:
                return g
        return None

    def all_xyz(self) -> np.ndarray:
        if not self.groups:
            return np.zeros((0, 3))
        return np.concatenate([np.asarray(g.xyz, dtype=np.float64) for g in self.groups])

    def all_rows(self) -> np.ndarray:
        """(total, 4 + D) concatenation of all group rows, float64."""
        if not self.groups:
            return np.zeros((0, 4 + self.num_feature_dims))
        return np.concatenate([np.asarray(g.data, dtype=np.float64) for g in self.groups])


# ---------------------------------------------------------------------------
# MVPC1 point clouds

def save_cloud(cloud: PointCloud, path) -> None:
    payload = np.ascontiguousarray(cloud.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack("<Q", len(cloud)))
        f.write(struct.pack("<d", float(cloud.timestamp)))
        f.write(payload)


def load_cloud(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) < 5:
        raise FormatError(f"{path}: truncated magic at byte 0")
    if raw[:5] != CLOUD_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:5]!r} at byte 0")
    if len(raw) < _CLOUD_PAYLOAD_OFFSET:
        raise FormatError(f"{path}: truncated header at byte 5")
    (count,) = struct.unpack_from("<Q", raw, 5)
    (timestamp,) = struct.unpack_from("<d", raw, 13)
    if not np.isfinite(timestamp):
        raise FormatError(f"{path}: non-finite timestamp at byte 13")
    expected = _CLOUD_PAYLOAD_OFFSET + count * _CLOUD_RECORD_BYTES
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated payload, {count} records declared but file ends "
            f"at byte {len(raw)} (expected {expected})")
    if len(raw) > expected:
        raise FormatError(f"{path}: trailing data at byte {expected}")
    data = np.frombuffer(raw, dtype="<f4", count=count * 5,
                         offset=_CLOUD_PAYLOAD_OFFSET).reshape(count, 5)
    bad = ~np.isfinite(data)
    if bad.any():
        rec, fld = np.argwhere(bad)[0]
        off = _CLOUD_PAYLOAD_OFFSET + int(rec) * _CLOUD_RECORD_BYTES + int(fld) * 4
        raise FormatError(f"{path}: non-finite value at byte {off}")
    r = data[:, 3]
    bad_r = (r < 0.0) | (r > 1.0)
    if bad_r.any():
        rec = int(np.argwhere(bad_r)[0][0])
        off = _CLOUD_PAYLOAD_OFFSET + rec * _CLOUD_RECORD_BYTES + 3 * 4
        raise FormatError(f"{path}: reflectance outside [0, 1] at byte {off}")
    return PointCloud(data.copy(), timestamp)


# ---------------------------------------------------------------------------
# PGM + JSON instance masks

def save_masks(masks: InstanceMaskSet, map_path, meta_path) -> None:
    m = masks.instance_map
    with open(map_path, "wb") as f:
        f.write(f"P5\n{masks.width} {masks.height}\n65535\n".encode("ascii"))
        f.write(m.astype(">u2").tobytes())
    meta = {
        "instances": [
            {"instance_id": i.instance_id, "class_id": i.class_id, "score": i.score}
            for i in masks.instances
        ],
    }
    if masks.num_classes is not None:
        meta["num_classes"] = int(masks.num_classes)
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def _parse_pgm16(raw: bytes, path) -> np.ndarray:
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            c = raw[pos:pos + 1]
            if c == b"#":
                eol = raw.find(b"\n", pos)
                pos = len(raw) if eol < 0 else eol + 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header at byte {start}")
        return raw[start:pos]

    if token() != b"P5":
        raise FormatError(f"{path}: not a binary PGM (expected magic P5)")
    try:
        width = int(token())
        height = int(token())
        maxval = int(token())
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header: {exc}") from exc
    if width < 1 or height < 1:
        raise FormatError(f"{path}: invalid PGM size {width}x{height}")
    if maxval != 65535:
        raise FormatError(f"{path}: expected 16-bit PGM (maxval 65535), got {maxval}")
    pos += 1  # exactly one whitespace byte after maxval
    expected = pos + width * height * 2
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated PGM payload at byte {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{path}: trailing data at byte {expected}")
    return np.frombuffer(raw, dtype=">u2", count=width * height,
                         offset=pos).reshape(height, width).astype(np.uint16)


def load_masks(map_path, meta_path, score_threshold: float = 0.05) -> InstanceMaskSet:
    """Load an instance mask set, dropping instances below score_threshold.

    Dropped instances have their pixels set to background; surviving ids are
    preserved, never renumbered.
    """
    m = _parse_pgm16(Path(map_path).read_bytes(), map_path)
    try:
        meta = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON: {exc}") from exc
    if not isinstance(meta, dict) or "instances" not in meta:
        raise FormatError(f"{meta_path}: missing 'instances' key")
    num_classes = meta.get("num_classes")
    rows = []
    for entry in meta["instances"]:
        try:
            rows.append((int(entry["instance_id"]), int(entry["class_id"]),
                         float(entry["score"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{meta_path}: malformed instance entry: {exc}") from exc

    known = {r[0] for r in rows}
    present = np.unique(m)
    for j in present:
        if j != 0 and int(j) not in known:
            raise FormatError(
                f"{map_path}: map contains instance id {int(j)} absent from {meta_path}")

    kept = [r for r in rows if r[2] >= score_threshold]
    dropped_ids = {r[0] for r in rows} - {r[0] for r in kept}
    if dropped_ids:
        m = m.copy()
        m[np.isin(m, list(dropped_ids))] = 0
    try:
        return InstanceMaskSet.build(m, kept, num_classes)
    except ValueError as exc:
        raise FormatError(f"{map_path}: {exc}") from exc


# ---------------------------------------------------------------------------
# MVVP1 virtual points

def save_virtual(vps: VirtualPointSet, path) -> None:
    with open(path, "wb") as f:
        f.write(VIRTUAL_MAGIC)
        f.write(struct.pack("<QI", len(vps.groups), vps.num_feature_dims))
        for g in vps.groups:
            f.write(struct.pack("<IQ", g.instance_id, len(g)))
            f.write(np.ascontiguousarray(g.data, dtype="<f4").tobytes())


def load_virtual(path) -> VirtualPointSet:
    raw = Path(path).read_bytes()
    if len(raw) < 5 or raw[:5] != VIRTUAL_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    if len(raw) < 5 + 12:
        raise FormatError(f"{path}: truncated header at byte 5")
    group_count, dims = struct.unpack_from("<QI", raw, 5)
    pos = 17
    width = 4 + dims
    groups = []
    for _ in range(group_count):
        if len(raw) < pos + 12:
            raise FormatError(f"{path}: truncated group header at byte {pos}")
        instance_id, count = struct.unpack_from("<IQ", raw, pos)
        pos += 12
        nbytes = count * width * 4
        if len(raw) < pos + nbytes:
            raise FormatError(
                f"{path}: group {instance_id} declares {count} points but file "
                f"ends at byte {len(raw)}")
        data = np.frombuffer(raw, dtype="<f4", count=count * width,
                             offset=pos).reshape(count, width)
        groups.append(VirtualPointGroup(int(instance_id), data.copy()))
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{path}: trailing data at byte {pos}")
    return VirtualPointSet(tuple(groups), int(dims))


# ---------------------------------------------------------------------------
# Calibration JSON

@dataclass(frozen=True)
class CalibrationChain:
    """The transforms and intrinsics binding one Lidar sweep to one image."""

    car_from_lidar: RigidTransform
    rgb_from_car: RigidTransform
    t1_from_t2: RigidTransform
    intrinsics: CameraIntrinsics
    t_lidar: float = 0.0
    t_camera: float = 0.0

    @property
    def rgb_from_lidar(self) -> RigidTransform:
        """The composed Lidar-to-camera transform for this frame pair."""
        return compose(self.rgb_from_car, compose(self.t1_from_t2, self.car_from_lidar))


def save_calibration(calib: CalibrationChain, path) -> None:
    doc = {
        "T_car_from_lidar": [float(v) for v in calib.car_from_lidar.matrix.ravel()],
        "T_rgb_from_car": [float(v) for v in calib.rgb_from_car.matrix.ravel()],
        "T_t1_from_t2": [float(v) for v in calib.t1_from_t2.matrix.ravel()],
        "intrinsics": {
            "fx": calib.intrinsics.fx, "fy": calib.intrinsics.fy,
            "cx": calib.intrinsics.cx, "cy": calib.intrinsics.cy,
            "width": calib.intrinsics.width, "height": calib.intrinsics.height,
        },
        "t_lidar": calib.t_lidar,
        "t_camera": calib.t_camera,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def _transform_from_list(values, name, path) -> RigidTransform:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (16,):
        raise FormatError(f"{path}: {name} must be a 16-element row-major array")
    try:
        return RigidTransform(arr.reshape(4, 4))
    except CalibrationError as exc:
        raise CalibrationError(f"{path}: {name}: {exc}") from exc


def load_calibration(path) -> CalibrationChain:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    try:
        intr = doc["intrinsics"]
        intrinsics = CameraIntrinsics(
            fx=float(intr["fx"]), fy=float(intr["fy"]),
            cx=float(intr["cx"]), cy=float(intr["cy"]),
            width=int(intr["width"]), height=int(intr["height"]))
        return CalibrationChain(
            car_from_lidar=_transform_from_list(doc["T_car_from_lidar"],
                                                "T_car_from_lidar", path),
            rgb_from_car=_transform_from_list(doc["T_rgb_from_car"],
                                              "T_rgb_from_car", path),
            t1_from_t2=_transform_from_list(doc["T_t1_from_t2"],
                                            "T_t1_from_t2", path),
            intrinsics=intrinsics,
            t_lidar=float(doc["t_lidar"]),
            t_camera=float(doc["t_camera"]))
    except KeyError as exc:
        raise FormatError(f"{path}: missing calibration key {exc}") from exc


# ---------------------------------------------------------------------------
# CSV debug exporters (9 significant digits, for plotting)

def cloud_to_csv(cloud: PointCloud, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("x,y,z,r,t\n")
        for row in cloud.data:
            f.write(",".join(f"{float(v):.9g}" for v in row) + "\n")


def virtual_to_csv(vps: VirtualPointSet, path) -> None:
    feat_cols = ",".join(f"e{i}" for i in range(vps.num_feature_dims))
    with open(path, "w", encoding="utf-8") as f:
        f.write("instance_id,x,y,z,t" + ("," + feat_cols if feat_cols else "") + "\n")
        for g in vps.groups:
            for row in g.data:
                f.write(f"{g.instance_id}," +
                        ",".join(f"{float(v):.9g}" for v in row) + "\n")
