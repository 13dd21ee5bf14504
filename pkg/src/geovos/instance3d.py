"""Class-agnostic 3D instances from tracked 2D masks.

Pipeline: erode each keyframe mask, lift it through depth and pose into a
world-frame fragment, merge fragments whose 3D voxel overlap or temporal
2D overlap is high enough (union-find, OR across criteria), then resolve
duplicate geometry by majority voting at the superpoint level. Evaluation
follows the usual scan-benchmark AP protocol on point sets.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import CameraIntrinsics, CameraPose, PointCloud, back_project, depth_agreement_score
from .metrics import MaskTrack

AP_BAND = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class MergeConfig:
    """Thresholds for lifting and merging; defaults are calibration knobs."""

    voxel_size: float = 0.05
    theta_3d: float = 0.25
    theta_iou: float = 0.5
    theta_prec: float = 0.8
    erosion_radius: int = 1
    eps_rel: float = 0.05

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be > 0")
        for name in ("theta_3d", "theta_iou", "theta_prec"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.erosion_radius < 0:
            raise ValueError("erosion_radius must be >= 0")


@dataclass
class Fragment:
    """World-frame points lifted from one keyframe mask.

    ``source`` is (keyframe id, mask id); ``track`` holds the per-frame
    masks propagated forward from the keyframe (None before it).
    """

    points: PointCloud
    source: tuple
    track: MaskTrack | None = None
    depth_agreement: float | None = None

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass
class LiftResult:
    """Outcome of lift_fragment; ``reason`` is set when the lift was rejected."""

    fragment: Fragment | None
    reason: str | None = None
    n_skipped: int = 0

    @property
    def ok(self) -> bool:
        return self.fragment is not None


@dataclass
class SuperpointPartition:
    """Dense superpoint labels, one per scene point."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.size and labels.min() < 0:
            raise ValueError("superpoint labels must be >= 0")
        if labels.size:
            present = np.unique(labels)
            if present.size != labels.max() + 1:
                raise ValueError("superpoint ids must be dense 0..max")
        self.labels = labels

    @property
    def n_superpoints(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


@dataclass
class Instance:
    """One merged 3D instance."""

    fragments: list = field(default_factory=list)
    confidence: float = 1.0
    superpoint_ids: frozenset | None = None
    point_ids: np.ndarray | None = None

    @property
    def sources(self):
        return tuple(f.source for f in self.fragments)


@dataclass
class InstanceSet:
    instances: list

    def __len__(self) -> int:
        return len(self.instances)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Erode a binary mask; see kernels.erode_mask for the exact definition."""
    return kernels.erode_mask(mask, radius)


def voxel_set(points: np.ndarray, voxel_size: float) -> set:
    """Voxel keys (floor of coordinate / voxel_size per axis) of a point set."""
    idx = np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)
    return set(map(tuple, idx))


def lift_fragment(mask: np.ndarray, depth: np.ndarray, pose: CameraPose,
                  intr: CameraIntrinsics, cfg: MergeConfig,
                  source: tuple = (0, "obj"), track: MaskTrack | None = None) -> LiftResult:
    """Erode, back-project and lift one mask into a world-frame fragment.

    Rejections (empty eroded mask, no valid depth under the mask) come back
    as a LiftResult with a reason, not an exception.
    """
    eroded = erode(mask, cfg.erosion_radius)
    if not eroded.any():
        return LiftResult(None, "empty mask after erosion")
    pc, skipped = back_project(eroded, depth, intr)
    if len(pc) == 0:
        return LiftResult(None, "no valid depth under eroded mask", skipped)
    world = PointCloud(pose.to_world(pc.points), "world")
    return LiftResult(Fragment(world, source, track), None, skipped)


def overlap3d(a: Fragment, b: Fragment, voxel_size: float) -> float:
    """Voxel-set overlap |Va & Vb| / min(|Va|, |Vb|).

    Raises:
        ValueError: if either fragment is empty.
    """
    if a.n_points == 0 or b.n_points == 0:
        raise ValueError("overlap3d requires nonempty fragments")
    va = voxel_set(a.points.points, voxel_size)
    vb = voxel_set(b.points.points, voxel_size)
    return len(va & vb) / min(len(va), len(vb))


def temporal_overlap2d(track_a: MaskTrack, track_b: MaskTrack):
    """Mean IoU and mean precision over frames where both masks are nonempty.

    Precision uses min(|A|, |B|) as the denominator so containment of a
    small mask in a large one scores 1. Returns (0.0, 0.0) when the tracks
    are never co-visible.
    """
    if len(track_a) != len(track_b):
        raise ValueError(f"track lengths differ: {len(track_a)} vs {len(track_b)}")
    ious, precs = [], []
    for t in range(len(track_a)):
        if not (track_a.visible(t) and track_b.visible(t)):
            continue
        a = track_a.masks[t].astype(bool)
        b = track_b.masks[t].astype(bool)
        inter = int(np.count_nonzero(a & b))
        union = int(np.count_nonzero(a | b))
        ious.append(inter / union)
        precs.append(inter / min(int(np.count_nonzero(a)), int(np.count_nonzero(b))))
    if not ious:
        return 0.0, 0.0
    return float(np.mean(ious)), float(np.mean(precs))


class UnionFind:
    """Array union-find with path compression."""

    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x: int, y: int):
        rx, ry = self.find(x), self.find(y)
        if rx != ry:
            if ry < rx:
                rx, ry = ry, rx
            self.parent[ry] = rx


def merge_instances(fragments: list, cfg: MergeConfig) -> InstanceSet:
    """Group fragments into instances via union-find.

    An edge links two fragments when any criterion fires: 3D voxel overlap
    >= theta_3d, temporal mean IoU >= theta_iou, or temporal precision
    >= theta_prec (recall-oriented OR; duplicates are resolved later by
    superpoint voting). Instance confidence is the component's point count
    normalized by the largest component's. Components are emitted ordered
    by their smallest member fragment index, so the result is deterministic
    given the input order and invariant to it up to relabeling.
    """
    if not fragments:
        raise ValueError("merge_instances requires at least one fragment")
    n = len(fragments)
    voxels = [voxel_set(f.points.points, cfg.voxel_size) for f in fragments]
    uf = UnionFind(n)
    for i in range(n):
        for j in range(i + 1, n):
            score3d = len(voxels[i] & voxels[j]) / min(len(voxels[i]), len(voxels[j]))
            if score3d >= cfg.theta_3d:
                uf.union(i, j)
                continue
            if fragments[i].track is not None and fragments[j].track is not None:
                iou, prec = temporal_overlap2d(fragments[i].track, fragments[j].track)
                if iou >= cfg.theta_iou or prec >= cfg.theta_prec:
                    uf.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)
    ordered = sorted(groups.values(), key=min)
    totals = [sum(fragments[i].n_points for i in grp) for grp in ordered]
    top = max(totals)
    instances = [
        Instance(fragments=[fragments[i] for i in grp], confidence=total / top)
        for grp, total in zip(ordered, totals)
    ]
    return InstanceSet(instances)


def assign_superpoints(instances: InstanceSet, partition: SuperpointPartition,
                       scene_points: np.ndarray, voxel_size: float) -> InstanceSet:
    """Majority-vote each superpoint to the instance observing it most.

    A scene point is observed by an instance once per member fragment whose
    voxel set contains the point's voxel. Superpoints with zero
    observations stay unassigned; ties go to the lowest instance id. The
    returned set carries superpoint id sets and scene point ids per
    instance.
    """
    scene_points = np.asarray(scene_points, dtype=np.float64).reshape(-1, 3)
    if partition.labels.shape[0] != scene_points.shape[0]:
        raise ValueError(
            f"partition covers {partition.labels.shape[0]} points, "
            f"scene has {scene_points.shape[0]}"
        )
    n_sp = partition.n_superpoints
    n_inst = len(instances)
    point_voxels = [tuple(v) for v in
                    np.floor(scene_points / voxel_size).astype(np.int64)]
    counts = np.zeros((n_sp, n_inst), dtype=np.int64)
    for k, inst in enumerate(instances.instances):
        frag_voxels = [voxel_set(f.points.points, voxel_size) for f in inst.fragments]
        for p, (vox, sp) in enumerate(zip(point_voxels, partition.labels)):
            for fv in frag_voxels:
                if vox in fv:
                    counts[sp, k] += 1
    assigned = np.full(n_sp, -1, dtype=np.int64)
    observed = counts.sum(axis=1) > 0
    assigned[observed] = np.argmax(counts[observed], axis=1)
    sp_of_point = partition.labels
    out = []
    for k, inst in enumerate(instances.instances):
        sp_ids = frozenset(int(s) for s in np.nonzero(assigned == k)[0])
        member = np.isin(sp_of_point, sorted(sp_ids)) if sp_ids else np.zeros(len(sp_of_point), bool)
        out.append(Instance(
            fragments=inst.fragments,
            confidence=inst.confidence,
            superpoint_ids=sp_ids,
            point_ids=np.nonzero(member)[0].astype(np.int64),
        ))
    return InstanceSet(out)


def _point_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return inter / union if union else 0.0


def _ap_at(pred, gt_sets, threshold: float) -> float:
    n_gt = len(gt_sets)
    matched = [False] * n_gt
    tp = []
    for pset in pred:
        best_iou, best_j = 0.0, -1
        for j, gset in enumerate(gt_sets):
            if matched[j]:
                continue
            iou = _point_iou(pset, gset)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            matched[best_j] = True
            tp.append(1)
        else:
            tp.append(0)
    if not tp:
        return 0.0
    cum = np.cumsum(tp)
    recall = cum / n_gt
    precision = cum / np.arange(1, len(tp) + 1)
    # all-point interpolation: integrate the running-max precision envelope
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[1.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def eval_ap(pred: InstanceSet, gt: InstanceSet, band=AP_BAND) -> dict:
    """Class-agnostic AP of predicted vs ground-truth instances.

    Predictions are sorted by confidence (descending, stable) and greedily
    matched one-to-one to ground truth at point-set IoU >= t. Returns
    {"ap": mean over ``band``, "ap50": t=0.5, "ap25": t=0.25}.

    Raises:
        ValueError: if the ground-truth set is empty or point ids are
        missing on either side.
    """
    if len(gt) == 0:
        raise ValueError("eval_ap requires a nonempty ground-truth set")
    for name, iset in (("gt", gt), ("pred", pred)):
        for inst in iset.instances:
            if inst.point_ids is None:
                raise ValueError(f"{name} instance lacks point ids; run superpoint voting "
                                 "or label the set over scene points")
    gt_sets = [np.unique(i.point_ids) for i in gt.instances]
    order = sorted(range(len(pred)), key=lambda k: (-pred.instances[k].confidence, k))
    pred_sets = [np.unique(pred.instances[k].point_ids) for k in order]
    aps = {t: _ap_at(pred_sets, gt_sets, t) for t in set(band) | {0.5, 0.25}}
    return {
        "ap": float(np.mean([aps[t] for t in band])),
        "ap50": aps[0.5],
        "ap25": aps[0.25],
    }


@dataclass
class PipelineResult:
    fragments: list
    rejections: list
    instances: InstanceSet | None
    voted: bool
    warnings: list


def _thread_cap() -> int:
    raw = os.environ.get("GEOVOS_THREADS", "")
    if raw.strip():
        return max(1, int(raw))
    return min(8, os.cpu_count() or 1)


def run_pipeline(scene, tracks: dict, cfg: MergeConfig, keyframe_stride: int = 1) -> PipelineResult:
    """Lift + merge + vote over a scene and its propagated mask tracks.

    For every keyframe (frames strided by ``keyframe_stride``) and every
    track visible there, the keyframe mask is lifted into a fragment whose
    temporal track keeps only the forward frames (propagation is
    forward-only). Each fragment also gets a mean depth-agreement score
    against the later frames it appears in, as a diagnostic. Lifts fan out
    over GEOVOS_THREADS; merging and voting are single-threaded and
    deterministic.
    """
    frames = scene.frames
    jobs = []
    for k in range(0, len(frames), max(1, keyframe_stride)):
        frame = frames[k]
        if frame.depth is None:
            continue
        for obj_id in sorted(tracks):
            track = tracks[obj_id]
            if k < len(track) and track.visible(k):
                jobs.append((k, obj_id))

    def _lift(job):
        k, obj_id = job
        frame = frames[k]
        track = tracks[obj_id]
        fwd = MaskTrack([None] * k + list(track.masks[k:]))
        return lift_fragment(track.masks[k], frame.depth, frame.pose,
                             frame.intrinsics, cfg, source=(k, obj_id), track=fwd)

    workers = _thread_cap()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_lift, jobs))
    else:
        results = [_lift(j) for j in jobs]

    fragments, rejections = [], []
    for job, res in zip(jobs, results):
        if res.ok:
            fragments.append(res.fragment)
        else:
            rejections.append((job, res.reason))

    for frag in fragments:
        k, _ = frag.source
        scores = []
        for t in range(k + 1, len(frames)):
            ref = frames[t]
            if ref.depth is None or (frag.track is not None and not frag.track.visible(t)):
                continue
            cam_pts = ref.pose.to_camera(frag.points.points)
            scores.append(depth_agreement_score(
                PointCloud(cam_pts, "camera"), ref.depth, ref.intrinsics, cfg.eps_rel))
        frag.depth_agreement = float(np.mean(scores)) if scores else None

    warnings = []
    if not fragments:
        return PipelineResult([], rejections, None, False, ["no fragments lifted"])
    instances = merge_instances(fragments, cfg)
    voted = False
    if getattr(scene, "superpoints", None) is not None and getattr(scene, "scene_points", None) is not None:
        instances = assign_superpoints(instances, SuperpointPartition(scene.superpoints),
                                       scene.scene_points, cfg.voxel_size)
        voted = True
    else:
        warnings.append("scene has no superpoints; voting skipped, voxel labels emitted")
    return PipelineResult(fragments, rejections, instances, voted, warnings)
