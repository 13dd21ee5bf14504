"""Bit-exact file formats, scene manifests, and the synthetic box world.

Formats (all round-trip byte-identically through save -> load -> save):

* DMAP depth raster: magic ``DMAP``, u16 LE version (=1), u32 LE width,
  u32 LE height, then width*height little-endian float32 meters,
  row-major. File length is exactly 14 + 4*W*H bytes.
* Mask raster: binary PGM (P5), 8-bit, maxval 255, nonzero = foreground.
* Pose file: text, 16 whitespace-separated decimals, row-major 4x4
  world-from-camera matrix whose last row parses to exactly 0 0 0 1.
  The rotation block must be orthonormal within 1e-4; blocks between
  1e-6 and 1e-4 are snapped to the nearest rotation on load.
* Scene manifest: JSON, schema ``geovos.scene/1``; paths are relative to
  the manifest. Optional superpoint / ground-truth instance / track files
  are JSON with their own schema tags.

The box-world generator renders axis-aligned boxes analytically (slab
ray-box intersection) and emits exact depth, per-box masks with correct
occlusion ordering, ground-truth 3D instances over the lifted scene
points, and per-box mask tracks. It is fully deterministic.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .geometry import CameraFrame, CameraIntrinsics, CameraPose, back_project
from .instance3d import Instance, InstanceSet
from .metrics import MaskTrack

MANIFEST_SCHEMA = "geovos.scene/1"
SUPERPOINTS_SCHEMA = "geovos.superpoints/1"
INSTANCES_SCHEMA = "geovos.instances/1"
TRACKS_SCHEMA = "geovos.tracks/1"
POINTSET_SCHEMA = "geovos.points/1"

DMAP_MAGIC = b"DMAP"
DMAP_VERSION = 1

POSE_FILE_ROTATION_TOL = 1e-4


class IngestError(Exception):
    """Base for all file/manifest errors."""


class ManifestError(IngestError):
    pass


class MissingFileError(IngestError):
    pass


class BadMagicError(IngestError):
    pass


class FormatVersionError(IngestError):
    pass


class LengthMismatchError(IngestError):
    pass


class BadPoseError(IngestError):
    pass


class BadMaskError(IngestError):
    pass


# ---------------------------------------------------------------------------
# DMAP depth rasters


def save_dmap(path, values: np.ndarray):
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"depth raster must be 2-D, got {values.shape}")
    h, w = values.shape
    header = DMAP_MAGIC + np.uint16(DMAP_VERSION).tobytes() \
        + np.uint32(w).tobytes() + np.uint32(h).tobytes()
    Path(path).write_bytes(header + values.tobytes())


def load_dmap(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"depth file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 14 or blob[:4] != DMAP_MAGIC:
        raise BadMagicError(f"{path}: not a DMAP file (bad magic)")
    version = int(np.frombuffer(blob, "<u2", count=1, offset=4)[0])
    if version != DMAP_VERSION:
        raise FormatVersionError(f"{path}: unsupported DMAP version {version}")
    w = int(np.frombuffer(blob, "<u4", count=1, offset=6)[0])
    h = int(np.frombuffer(blob, "<u4", count=1, offset=10)[0])
    expected = 14 + 4 * w * h
    if len(blob) != expected:
        raise LengthMismatchError(f"{path}: expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, "<f4", count=w * h, offset=14).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# PGM masks


def save_mask_pgm(path, mask: np.ndarray):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {mask.shape}")
    h, w = mask.shape
    body = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + body.tobytes())


def load_mask_pgm(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"mask file not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(b"P5"):
        raise BadMaskError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval, single whitespace, raster
    fields = []
    i = 2
    while len(fields) < 3:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i : i + 1].isspace():
            i += 1
        if start == i:
            raise BadMaskError(f"{path}: truncated PGM header")
        fields.append(blob[start:i])
    i += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise BadMaskError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise BadMaskError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    if len(blob) - i != w * h:
        raise LengthMismatchError(f"{path}: expected {w * h} raster bytes, got {len(blob) - i}")
    return (np.frombuffer(blob, np.uint8, count=w * h, offset=i).reshape(h, w) != 0)


# ---------------------------------------------------------------------------
# pose files


def save_pose(path, pose: CameraPose):
    m = pose.matrix()
    lines = [" ".join(repr(float(x)) for x in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n")


def load_pose(path) -> CameraPose:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"pose file not found: {path}")
    tokens = path.read_text().split()
    if len(tokens) != 16:
        raise BadPoseError(f"{path}: expected 16 values, got {len(tokens)}")
    try:
        m = np.array([float(t) for t in tokens], dtype=np.float64).reshape(4, 4)
    except ValueError:
        raise BadPoseError(f"{path}: non-numeric pose entry") from None
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise BadPoseError(f"{path}: last row must be exactly 0 0 0 1, got {m[3].tolist()}")
    rot = m[:3, :3]
    err = float(np.max(np.abs(rot.T @ rot - np.eye(3))))
    if err > POSE_FILE_ROTATION_TOL or np.linalg.det(rot) < 0:
        raise BadPoseError(f"{path}: rotation block not orthonormal within 1e-4 (err={err:.2e})")
    if err > 1e-7:
        # snap near-misses to the closest rotation; exactly-saved poses are
        # untouched so the text round-trip stays byte-identical
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
    return CameraPose(rot, m[:3, 3])


# ---------------------------------------------------------------------------
# JSON side files


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _read_json(path, what: str):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{what} file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON ({e})") from None


def save_superpoints(path, points: np.ndarray, labels: np.ndarray):
    _write_json(path, {
        "schema": SUPERPOINTS_SCHEMA,
        "points": [[float(c) for c in p] for p in np.asarray(points).reshape(-1, 3)],
        "labels": [int(x) for x in np.asarray(labels).reshape(-1)],
    })


def load_superpoints(path):
    doc = _read_json(path, "superpoints")
    if doc.get("schema") != SUPERPOINTS_SCHEMA:
        raise ManifestError(f"{path}: schema must be {SUPERPOINTS_SCHEMA}")
    points = np.asarray(doc.get("points", []), dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(doc.get("labels", []), dtype=np.int64)
    if labels.shape[0] != points.shape[0]:
        raise ManifestError(f"{path}: field 'labels' has {labels.shape[0]} entries "
                            f"for {points.shape[0]} points")
    return points, labels


def save_instances(path, instances: InstanceSet):
    _write_json(path, {
        "schema": INSTANCES_SCHEMA,
        "instances": [
            {
                "point_ids": [int(i) for i in (inst.point_ids if inst.point_ids is not None else [])],
                "confidence": float(inst.confidence),
            }
            for inst in instances.instances
        ],
    })


def load_instances(path) -> InstanceSet:
    doc = _read_json(path, "instances")
    if doc.get("schema") != INSTANCES_SCHEMA:
        raise ManifestError(f"{path}: schema must be {INSTANCES_SCHEMA}")
    out = []
    for k, rec in enumerate(doc.get("instances", [])):
        if "point_ids" not in rec:
            raise ManifestError(f"{path}: instances[{k}] missing field 'point_ids'")
        out.append(Instance(
            fragments=[],
            confidence=float(rec.get("confidence", 1.0)),
            point_ids=np.asarray(rec["point_ids"], dtype=np.int64),
        ))
    return InstanceSet(out)


def save_pointset(path, points: np.ndarray):
    """Write a bare world-frame point set (the fragment exchange format)."""
    _write_json(path, {
        "schema": POINTSET_SCHEMA,
        "points": [[float(c) for c in p] for p in np.asarray(points).reshape(-1, 3)],
    })


def load_pointset(path) -> np.ndarray:
    doc = _read_json(path, "point set")
    if doc.get("schema") != POINTSET_SCHEMA:
        raise ManifestError(f"{path}: schema must be {POINTSET_SCHEMA}")
    return np.asarray(doc.get("points", []), dtype=np.float64).reshape(-1, 3)


def save_feature_stack(paths, values: np.ndarray):
    """Write an (H, W, C) feature raster as one DMAP file per channel."""
    values = np.asarray(values)
    if values.ndim != 3 or len(paths) != values.shape[2]:
        raise ValueError(f"need one path per channel: {len(paths)} paths for "
                         f"shape {values.shape}")
    for c, path in enumerate(paths):
        save_dmap(path, values[:, :, c].astype(np.float32))


def load_feature_stack(paths) -> np.ndarray:
    """Load per-channel DMAP files back into an (H, W, C) float raster."""
    channels = [load_dmap(p) for p in paths]
    shapes = {c.shape for c in channels}
    if len(shapes) > 1:
        raise LengthMismatchError(f"feature channels disagree on raster size: "
                                  f"{sorted(shapes)}")
    return np.stack(channels, axis=2).astype(np.float64)


def save_tracks(tracks: dict, out_dir, name="tracks.json"):
    """Write mask tracks: one PGM per visible frame plus a JSON index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lengths = {len(t) for t in tracks.values()}
    if len(lengths) > 1:
        raise ValueError(f"tracks have differing lengths: {sorted(lengths)}")
    length = lengths.pop() if lengths else 0
    index = {"schema": TRACKS_SCHEMA, "length": length, "tracks": {}}
    for obj_id in sorted(tracks):
        entries = []
        for t, mask in enumerate(tracks[obj_id].masks):
            if mask is None or not np.any(mask):
                entries.append(None)
            else:
                rel = f"{obj_id}_{t:04d}.pgm"
                save_mask_pgm(out_dir / rel, mask)
                entries.append(rel)
        index["tracks"][obj_id] = entries
    path = out_dir / name
    _write_json(path, index)
    return path


def load_tracks(path) -> dict:
    path = Path(path)
    doc = _read_json(path, "tracks")
    if doc.get("schema") != TRACKS_SCHEMA:
        raise ManifestError(f"{path}: schema must be {TRACKS_SCHEMA}")
    length = int(doc.get("length", 0))
    tracks = {}
    for obj_id, entries in doc.get("tracks", {}).items():
        if len(entries) != length:
            raise ManifestError(f"{path}: track '{obj_id}' has {len(entries)} frames, "
                                f"manifest says {length}")
        masks = [None if rel is None else load_mask_pgm(path.parent / rel) for rel in entries]
        tracks[obj_id] = MaskTrack(masks)
    return tracks


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    """A loaded scene: dense frames plus optional 3D ground truth."""

    scene_id: str
    frames: list
    scene_points: np.ndarray | None = None
    superpoints: np.ndarray | None = None
    gt_instances: InstanceSet | None = None

    @property
    def object_ids(self):
        ids = set()
        for f in self.frames:
            ids.update(f.masks)
        return sorted(ids)

    def track(self, obj_id: str) -> MaskTrack:
        return MaskTrack([f.masks.get(obj_id) for f in self.frames])

    def tracks(self) -> dict:
        return {obj: self.track(obj) for obj in self.object_ids}


def _intrinsics_from_record(rec: dict, where: str) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(
            fx=float(rec["fx"]), fy=float(rec["fy"]),
            cx=float(rec["cx"]), cy=float(rec["cy"]),
            width=int(rec["width"]), height=int(rec["height"]),
        )
    except KeyError as e:
        raise ManifestError(f"{where}: missing intrinsics field {e}") from None
    except (TypeError, ValueError) as e:
        raise ManifestError(f"{where}: bad intrinsics ({e})") from None


def load_scene(manifest_path) -> Scene:
    """Load and fully validate a scene manifest.

    Every referenced file is read; type errors name the offending file and
    field.
    """
    manifest_path = Path(manifest_path)
    doc = _read_json(manifest_path, "manifest")
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ManifestError(f"{manifest_path}: field 'schema' must be {MANIFEST_SCHEMA}, "
                            f"got {doc.get('schema')!r}")
    if "frames" not in doc:
        raise ManifestError(f"{manifest_path}: missing field 'frames'")
    root = manifest_path.parent
    frames = []
    for i, rec in enumerate(doc["frames"]):
        where = f"{manifest_path}: frames[{i}]"
        for key in ("depth", "pose", "intrinsics"):
            if key not in rec:
                raise ManifestError(f"{where}: missing field '{key}'")
        intr = _intrinsics_from_record(rec["intrinsics"], where)
        depth = load_dmap(root / rec["depth"])
        if depth.shape != (intr.height, intr.width):
            raise ManifestError(f"{where}: depth raster is {depth.shape[1]}x{depth.shape[0]}, "
                                f"intrinsics say {intr.width}x{intr.height}")
        pose = load_pose(root / rec["pose"])
        masks = {}
        for obj_id, rel in sorted(rec.get("masks", {}).items()):
            mask = load_mask_pgm(root / rel)
            if mask.shape != (intr.height, intr.width):
                raise BadMaskError(f"{where}: mask '{obj_id}' is {mask.shape[1]}x{mask.shape[0]}, "
                                   f"frame is {intr.width}x{intr.height}")
            masks[obj_id] = mask
        frames.append(CameraFrame(i, intr, pose, depth, masks))
    scene_points = superpoints = None
    if doc.get("superpoints"):
        scene_points, labels = load_superpoints(root / doc["superpoints"])
        try:
            from .instance3d import SuperpointPartition
            SuperpointPartition(labels)
        except ValueError as e:
            raise ManifestError(f"{manifest_path}: superpoints: {e}") from None
        superpoints = labels
    gt_instances = None
    if doc.get("gt_instances"):
        gt_instances = load_instances(root / doc["gt_instances"])
        if scene_points is not None:
            n = scene_points.shape[0]
            for k, inst in enumerate(gt_instances.instances):
                if inst.point_ids.size and inst.point_ids.max() >= n:
                    raise ManifestError(f"{manifest_path}: gt_instances[{k}] references "
                                        f"point {int(inst.point_ids.max())}, scene has {n}")
    return Scene(str(doc.get("scene_id", manifest_path.stem)), frames,
                 scene_points, superpoints, gt_instances)


def save_scene(scene: Scene, out_dir) -> Path:
    """Write a scene to disk in the manifest layout; returns the manifest path."""
    out_dir = Path(out_dir)
    for sub in ("depth", "pose", "mask"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    frames_doc = []
    for f in scene.frames:
        depth_rel = f"depth/{f.frame_id:04d}.dmap"
        pose_rel = f"pose/{f.frame_id:04d}.txt"
        save_dmap(out_dir / depth_rel, f.depth if f.depth is not None
                  else np.zeros((f.intrinsics.height, f.intrinsics.width), np.float32))
        save_pose(out_dir / pose_rel, f.pose)
        masks_doc = {}
        for obj_id in sorted(f.masks):
            rel = f"mask/{f.frame_id:04d}_{obj_id}.pgm"
            save_mask_pgm(out_dir / rel, f.masks[obj_id])
            masks_doc[obj_id] = rel
        intr = f.intrinsics
        frames_doc.append({
            "depth": depth_rel,
            "pose": pose_rel,
            "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                           "width": intr.width, "height": intr.height},
            "masks": masks_doc,
        })
    doc = {
        "schema": MANIFEST_SCHEMA,
        "scene_id": scene.scene_id,
        "frames": frames_doc,
        "superpoints": None,
        "gt_instances": None,
    }
    if scene.superpoints is not None and scene.scene_points is not None:
        save_superpoints(out_dir / "superpoints.json", scene.scene_points, scene.superpoints)
        doc["superpoints"] = "superpoints.json"
    if scene.gt_instances is not None:
        save_instances(out_dir / "instances.json", scene.gt_instances)
        doc["gt_instances"] = "instances.json"
    manifest = out_dir / "manifest.json"
    _write_json(manifest, doc)
    return manifest


# ---------------------------------------------------------------------------
# synthetic box world


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and edge lengths (meters)."""

    center: tuple
    size: tuple

    def bounds(self) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        s = np.asarray(self.size, dtype=np.float64)
        if np.any(s <= 0):
            raise ValueError(f"box size must be positive, got {tuple(s)}")
        return np.concatenate([c - s / 2.0, c + s / 2.0])


@dataclass
class BoxWorld:
    scene: Scene
    gt_instances: InstanceSet
    gt_tracks: dict
    owners: list = field(default_factory=list)


def _ray_dirs_world(intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    us = np.arange(intr.width, dtype=np.float64)
    vs = np.arange(intr.height, dtype=np.float64)
    dx = (us[np.newaxis, :] - intr.cx) / intr.fx
    dy = (vs[:, np.newaxis] - intr.cy) / intr.fy
    rot = pose.rotation
    dirs = np.empty((intr.height, intr.width, 3), np.float64)
    # camera ray (dx, dy, 1) rotated to world; z-component 1 makes the slab
    # entry parameter equal the pinhole depth
    dirs[:, :, 0] = rot[0, 0] * dx + rot[0, 1] * dy + rot[0, 2]
    dirs[:, :, 1] = rot[1, 0] * dx + rot[1, 1] * dy + rot[1, 2]
    dirs[:, :, 2] = rot[2, 0] * dx + rot[2, 1] * dy + rot[2, 2]
    return dirs


def generate_boxworld(boxes, cameras, resolution=None) -> BoxWorld:
    """Render axis-aligned boxes into an exact synthetic scene.

    Args:
        boxes: list of Box (axis-aligned, interiors must not intersect;
            face-touching is allowed).
        cameras: list of (CameraPose, CameraIntrinsics) pairs.
        resolution: optional (width, height) sanity check against every
            camera's intrinsics.

    Returns:
        BoxWorld with the scene (float32 depth, per-box masks), ground
        truth instances over the lifted scene points, per-box mask tracks,
        and per-frame owner rasters.
    """
    bounds = np.stack([b.bounds() for b in boxes])
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            lo = np.maximum(bounds[i, :3], bounds[j, :3])
            hi = np.minimum(bounds[i, 3:], bounds[j, 3:])
            if np.all(lo < hi):
                raise ValueError(f"boxes {i} and {j} intersect")
    frames = []
    owners = []
    all_points = []
    all_owner_ids = []
    for fid, (pose, intr) in enumerate(cameras):
        if resolution is not None and (intr.width, intr.height) != tuple(resolution):
            raise ValueError(f"camera {fid} is {intr.width}x{intr.height}, "
                             f"expected {resolution[0]}x{resolution[1]}")
        origin = pose.translation
        for b, bb in enumerate(bounds):
            if np.all(origin > bb[:3]) and np.all(origin < bb[3:]):
                raise ValueError(f"camera {fid} origin lies inside box {b}")
        dirs = _ray_dirs_world(intr, pose)
        depth64, owner = kernels.render_boxes(origin, dirs, bounds)
        depth = depth64.astype(np.float32)
        masks = {}
        for b in range(len(boxes)):
            m = owner == b
            if m.any():
                masks[f"box{b}"] = m
        frames.append(CameraFrame(fid, intr, pose, depth, masks))
        owners.append(owner)
        for b in range(len(boxes)):
            m = owner == b
            if not m.any():
                continue
            pc, _ = back_project(m, depth, intr)
            all_points.append(pose.to_world(pc.points))
            all_owner_ids.append(np.full(len(pc), b, np.int64))
    if all_points:
        scene_points = np.concatenate(all_points)
        owner_ids = np.concatenate(all_owner_ids)
    else:
        scene_points = np.zeros((0, 3), np.float64)
        owner_ids = np.zeros(0, np.int64)

    # superpoints: each box's points split by octant around the box center
    centers = np.asarray([b.center for b in boxes], dtype=np.float64)
    sp_labels = np.full(scene_points.shape[0], -1, np.int64)
    next_id = 0
    for b in range(len(boxes)):
        sel = np.nonzero(owner_ids == b)[0]
        if sel.size == 0:
            continue
        rel = scene_points[sel] > centers[b]
        octant = rel[:, 0] * 4 + rel[:, 1] * 2 + rel[:, 2] * 1
        for oc in np.unique(octant):
            sp_labels[sel[octant == oc]] = next_id
            next_id += 1

    gt_instances = InstanceSet([
        Instance(
            fragments=[],
            confidence=1.0,
            superpoint_ids=frozenset(int(s) for s in np.unique(sp_labels[owner_ids == b]))
            if np.any(owner_ids == b) else frozenset(),
            point_ids=np.nonzero(owner_ids == b)[0].astype(np.int64),
        )
        for b in range(len(boxes))
    ])
    gt_tracks = {
        f"box{b}": MaskTrack([f.masks.get(f"box{b}") for f in frames])
        for b in range(len(boxes))
    }
    scene = Scene("boxworld", frames, scene_points, sp_labels, gt_instances)
    return BoxWorld(scene, gt_instances, gt_tracks, owners)
