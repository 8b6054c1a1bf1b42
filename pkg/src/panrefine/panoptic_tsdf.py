"""Pinhole geometry and sparse TSDF fusion with per-voxel panoptic label votes.

Voxels live in 8x8x8 blocks. Each allocated block owns a row in pooled
``tsdf`` / ``weight`` arrays; label votes are kept as a sorted sparse table
keyed by (voxel, label). Voxel (i, j, k) covers
``origin + [i, i+1) * voxel_size`` along each axis, so its centre is at
``origin + (i + 0.5) * voxel_size``.
"""

from dataclasses import dataclass, field
import logging
import math

import numpy as np

from .depth_proc import validate_depth
from .mask_refine import InstanceMask, PanopticLabel

log = logging.getLogger(__name__)

BLOCK_SIDE = 8
BLOCK_VOXELS = BLOCK_SIDE**3
DEFAULT_VOXEL_SIZE = 0.05
WEIGHTINGS = ("constant", "inverse_square")

_COORD_BIAS = 1 << 20
_COORD_BITS = 21
_LABEL_BITS = 20
# largest bounding box (in voxels) deduplicated with a dense occupancy grid
_DENSE_DEDUP_LIMIT = 1 << 24


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def backproject(intrinsics: CameraIntrinsics, pixel, depth: float) -> np.ndarray:
    """Camera-frame point seen at `pixel` = (u, v) with the given depth."""
    u, v = pixel
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth!r}")
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        raise ValueError(f"pixel {pixel} outside the image")
    return np.array([
        (u - intrinsics.cx) * depth / intrinsics.fx,
        (v - intrinsics.cy) * depth / intrinsics.fy,
        float(depth),
    ])


def project_point(intrinsics: CameraIntrinsics, point):
    """(u, v) of a camera-frame point, or None when it is behind the camera or off-image."""
    x, y, z = (float(c) for c in point)
    if not z > 0:
        return None
    u = intrinsics.fx * x / z + intrinsics.cx
    v = intrinsics.fy * y / z + intrinsics.cy
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        return None
    return (u, v)


def backproject_image(intrinsics: CameraIntrinsics, depth: np.ndarray):
    """Camera-frame points for all pixels with positive depth; returns (points, rows, cols)."""
    rows, cols = np.nonzero(depth > 0)
    z = depth[rows, cols]
    x = (cols - intrinsics.cx) * z / intrinsics.fx
    y = (rows - intrinsics.cy) * z / intrinsics.fy
    return np.column_stack([x, y, z]), rows, cols


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-9):
            raise ValueError("pose matrix bottom row must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "Pose":
        """Camera at `eye` with +z towards `target` and image rows running along -`up`."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.column_stack([right, down, forward]), eye)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_world(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation


@dataclass
class Voxel:
    tsdf: float = 0.0
    weight: float = 0.0
    label_votes: dict = field(default_factory=dict)


def voxel_sdf_update(voxel: Voxel, sdf: float, weight: float, label: PanopticLabel | None = None) -> Voxel:
    """Running weighted mean of signed distance samples; returns a new Voxel."""
    if not weight > 0:
        raise ValueError(f"weight must be positive, got {weight!r}")
    total = voxel.weight + weight
    tsdf = (voxel.weight * voxel.tsdf + weight * sdf) / total
    if voxel.weight > 0:
        # a mean lies between its inputs; stop round-off from leaving that range
        tsdf = min(max(tsdf, min(voxel.tsdf, sdf)), max(voxel.tsdf, sdf))
    else:
        tsdf = float(sdf)
    votes = dict(voxel.label_votes)
    if label is not None:
        votes[label] = votes.get(label, 0.0) + weight
    return Voxel(tsdf, total, votes)


def voxel_label(voxel: Voxel) -> PanopticLabel | None:
    """Label with the largest accumulated vote; ties go to the smallest (class, instance)."""
    if not voxel.label_votes:
        return None
    return min(voxel.label_votes, key=lambda lab: (-voxel.label_votes[lab], lab))


@dataclass
class LabeledRgbdFrame:
    depth: np.ndarray
    masks: list
    intrinsics: CameraIntrinsics
    pose: Pose
    rgb: np.ndarray | None = None


@dataclass
class IntegrationStats:
    valid_pixels: int = 0
    candidates: int = 0
    updated: int = 0
    allocated_voxels: int = 0
    allocated_blocks: int = 0
    labeled_updates: int = 0


def _pack(coords: np.ndarray) -> np.ndarray:
    c = coords.astype(np.int64) + _COORD_BIAS
    return (c[:, 0] << (2 * _COORD_BITS)) | (c[:, 1] << _COORD_BITS) | c[:, 2]


def _unpack(keys: np.ndarray) -> np.ndarray:
    mask = (1 << _COORD_BITS) - 1
    out = np.empty((keys.size, 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * _COORD_BITS)) & mask
    out[:, 1] = (keys >> _COORD_BITS) & mask
    out[:, 2] = keys & mask
    return out - _COORD_BIAS


def unique_coords(coords: np.ndarray) -> np.ndarray:
    """Distinct integer coordinates in lexicographic (i, j, k) order."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.size == 0:
        return coords
    # per-column reductions are much faster than reducing over axis 0
    cols = [coords[:, i] for i in range(3)]
    lo = np.array([c.min() for c in cols])
    dims = tuple(int(c.max() - l + 1) for c, l in zip(cols, lo))
    if math.prod(dims) > _DENSE_DEDUP_LIMIT:
        return _unpack(np.unique(_pack(coords)))
    occupied = np.zeros(math.prod(dims), dtype=bool)
    occupied[np.ravel_multi_index([c - l for c, l in zip(cols, lo)], dims)] = True
    return np.column_stack(np.unravel_index(np.flatnonzero(occupied), dims)) + lo


def label_image(masks, shape, slot_of) -> np.ndarray:
    """Per-pixel label slot, -1 where unlabeled. Later masks overwrite earlier ones."""
    out = np.full(shape, -1, dtype=np.int64)
    for m in masks:
        out[m.bitmap] = slot_of(m.label)
    return out


class PanopticVoxelMap:
    def __init__(self, voxel_size=DEFAULT_VOXEL_SIZE, truncation=None, origin=(0.0, 0.0, 0.0), weighting="constant"):
        if not voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if truncation is None:
            truncation = 4 * voxel_size
        if truncation < voxel_size:
            raise ValueError("truncation must be at least one voxel")
        if weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.weighting = weighting

        self._block_index = {}
        self._block_keys = []
        self._tsdf = np.zeros((0, BLOCK_VOXELS), dtype=np.float32)
        self._weight = np.zeros((0, BLOCK_VOXELS), dtype=np.float32)
        self.labels = []
        self._label_slot = {}
        # sorted (global voxel index << _LABEL_BITS | label slot) -> accumulated weight
        self._vote_keys = np.zeros(0, dtype=np.int64)
        self._vote_weights = np.zeros(0, dtype=np.float32)

        t32 = np.float32(self.truncation)
        self._trunc32 = t32 if float(t32) <= self.truncation else np.nextafter(t32, np.float32(0))

    # -- bookkeeping ------------------------------------------------------
    @property
    def block_count(self) -> int:
        return len(self._block_keys)

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self._weight[: self.block_count] > 0))

    def __len__(self):
        return self.voxel_count

    def label_slot(self, label: PanopticLabel) -> int:
        slot = self._label_slot.get(label)
        if slot is None:
            slot = len(self.labels)
            if slot >= 1 << _LABEL_BITS:
                raise OverflowError("too many distinct labels")
            self.labels.append(label)
            self._label_slot[label] = slot
        return slot

    def _ensure_blocks(self, block_keys: np.ndarray) -> np.ndarray:
        rows = np.empty(block_keys.size, dtype=np.int64)
        new = []
        for i, key in enumerate(block_keys.tolist()):
            row = self._block_index.get(key)
            if row is None:
                row = len(self._block_keys)
                self._block_index[key] = row
                self._block_keys.append(key)
                new.append(i)
            rows[i] = row
        needed = len(self._block_keys)
        if needed > self._tsdf.shape[0]:
            cap = max(needed, 2 * self._tsdf.shape[0], 64)
            self._tsdf = np.concatenate([self._tsdf, np.zeros((cap - self._tsdf.shape[0], BLOCK_VOXELS), np.float32)])
            self._weight = np.concatenate([self._weight, np.zeros((cap - self._weight.shape[0], BLOCK_VOXELS), np.float32)])
        return rows

    def _global_index(self, coords: np.ndarray, create: bool) -> np.ndarray:
        """Pool index for each voxel coordinate; -1 for missing blocks when not creating."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        blocks = coords >> 3
        local = ((coords & 7) * np.array([64, 8, 1])).sum(axis=1)
        bkeys = _pack(blocks)
        uniq, inverse = np.unique(bkeys, return_inverse=True)
        if create:
            rows = self._ensure_blocks(uniq)
        else:
            rows = np.array([self._block_index.get(k, -1) for k in uniq.tolist()], dtype=np.int64)
        row = rows[inverse]
        return np.where(row >= 0, row * BLOCK_VOXELS + local, -1)

    def voxel_centers(self, coords) -> np.ndarray:
        return self.origin + (np.asarray(coords, dtype=np.float64) + 0.5) * self.voxel_size

    def voxel_coords(self, points) -> np.ndarray:
        return np.floor((np.asarray(points) - self.origin) / self.voxel_size).astype(np.int64)

    # -- integration ------------------------------------------------------
    def _candidate_voxels(self, world_points: np.ndarray, camera_center: np.ndarray) -> np.ndarray:
        """Voxels within the truncation band along the rays through observed surface voxels."""
        centers = self.voxel_centers(unique_coords(self.voxel_coords(world_points)))
        rays = centers - camera_center
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        half = 0.5 * self.voxel_size
        reach = self.truncation + self.voxel_size
        steps = np.arange(-math.ceil(reach / half), math.ceil(reach / half) + 1) * half
        samples = centers[:, None, :] + steps[None, :, None] * rays[:, None, :]
        return unique_coords(self.voxel_coords(samples.reshape(-1, 3)))

    def integrate_frame(self, frame: LabeledRgbdFrame) -> IntegrationStats:
        """Fuse one depth frame and its instance masks into the map.

        Raises ValueError (leaving the map untouched) when depth, masks and
        intrinsics disagree on the image size.
        """
        intr = frame.intrinsics
        depth = validate_depth(frame.depth)
        if depth.shape != intr.shape:
            raise ValueError(f"depth shape {depth.shape} does not match intrinsics {intr.shape}")
        for m in frame.masks:
            if m.bitmap.shape != depth.shape:
                raise ValueError(f"mask shape {m.bitmap.shape} does not match depth shape {depth.shape}")

        stats = IntegrationStats()
        cam_points, _, _ = backproject_image(intr, depth)
        stats.valid_pixels = len(cam_points)
        if not stats.valid_pixels:
            return stats

        pose = frame.pose
        coords = self._candidate_voxels(pose.to_world(cam_points), pose.translation)
        stats.candidates = len(coords)

        local = pose.to_camera(self.voxel_centers(coords))
        z = local[:, 2]
        in_front = z > 1e-9
        coords, local, z = coords[in_front], local[in_front], z[in_front]
        u = np.floor(intr.fx * local[:, 0] / z + intr.cx + 0.5).astype(np.int64)
        v = np.floor(intr.fy * local[:, 1] / z + intr.cy + 0.5).astype(np.int64)
        inside = (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        coords, z, u, v = coords[inside], z[inside], u[inside], v[inside]
        measured = depth[v, u]
        sdf = measured - z
        keep = (measured > 0) & (sdf >= -self.truncation)
        if not np.any(keep):
            return stats
        coords, z, u, v, sdf = coords[keep], z[keep], u[keep], v[keep], sdf[keep]

        if self.weighting == "constant":
            w = np.ones(len(coords), dtype=np.float64)
        else:
            w = 1.0 / (z * z)
        sdf32 = np.clip(sdf.astype(np.float32), -self._trunc32, self._trunc32).astype(np.float64)

        blocks_before = self.block_count
        gidx = self._global_index(coords, create=True)
        tsdf = self._tsdf.reshape(-1)
        weight = self._weight.reshape(-1)
        w_old = weight[gidx].astype(np.float64)
        stats.allocated_voxels = int(np.count_nonzero(w_old == 0))
        d_old = tsdf[gidx].astype(np.float64)
        total = w_old + w
        mean = np.clip((w_old * d_old + w * sdf32) / total, np.minimum(d_old, sdf32), np.maximum(d_old, sdf32))
        tsdf[gidx] = np.where(w_old > 0, mean, sdf32).astype(np.float32)
        weight[gidx] = total.astype(np.float32)
        stats.allocated_blocks = self.block_count - blocks_before
        stats.updated = len(coords)

        slots = label_image(frame.masks, depth.shape, self.label_slot)[v, u]
        labeled = slots >= 0
        stats.labeled_updates = int(np.count_nonzero(labeled))
        if stats.labeled_updates:
            self._add_votes((gidx[labeled] << _LABEL_BITS) | slots[labeled], w[labeled])
        return stats

    def _add_votes(self, keys: np.ndarray, weights: np.ndarray):
        order = np.argsort(keys, kind="stable")
        keys, weights = keys[order], weights[order]
        pos = np.searchsorted(self._vote_keys, keys)
        hit = pos < self._vote_keys.size
        hit[hit] = self._vote_keys[pos[hit]] == keys[hit]
        if np.any(hit):
            acc = self._vote_weights[pos[hit]].astype(np.float64) + weights[hit]
            self._vote_weights[pos[hit]] = acc.astype(np.float32)
        fresh = ~hit
        if np.any(fresh):
            self._vote_keys = np.insert(self._vote_keys, pos[fresh], keys[fresh])
            self._vote_weights = np.insert(self._vote_weights, pos[fresh], weights[fresh].astype(np.float32))

    # -- queries ----------------------------------------------------------
    def get_voxel(self, coord) -> Voxel | None:
        g = int(self._global_index(np.asarray(coord).reshape(1, 3), create=False)[0])
        if g < 0:
            return None
        w = float(self._weight.reshape(-1)[g])
        if w == 0:
            return None
        lo = np.searchsorted(self._vote_keys, g << _LABEL_BITS)
        hi = np.searchsorted(self._vote_keys, (g + 1) << _LABEL_BITS)
        mask = (1 << _LABEL_BITS) - 1
        votes = {
            self.labels[int(k & mask)]: float(val)
            for k, val in zip(self._vote_keys[lo:hi], self._vote_weights[lo:hi])
        }
        return Voxel(float(self._tsdf.reshape(-1)[g]), w, votes)

    def _observed(self):
        """Coordinates and pool indices of observed voxels, sorted by (i, j, k)."""
        n = self.block_count
        rows, local = np.nonzero(self._weight[:n] > 0)
        if rows.size == 0:
            return np.zeros((0, 3), np.int64), np.zeros(0, np.int64)
        blocks = _unpack(np.asarray(self._block_keys, dtype=np.int64))[rows]
        offs = np.column_stack([local // 64, (local // 8) % 8, local % 8])
        coords = blocks * BLOCK_SIDE + offs
        order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        return coords[order], (rows * BLOCK_VOXELS + local)[order]

    def _winning_slots(self, gidx: np.ndarray) -> np.ndarray:
        """Majority label slot per voxel (-1 if none), ties to the smallest label."""
        out = np.full(gidx.size, -1, dtype=np.int64)
        if self._vote_keys.size == 0 or gidx.size == 0:
            return out
        vg = self._vote_keys >> _LABEL_BITS
        vs = self._vote_keys & ((1 << _LABEL_BITS) - 1)
        rank = np.empty(len(self.labels), dtype=np.int64)
        rank[sorted(range(len(self.labels)), key=lambda s: self.labels[s])] = np.arange(len(self.labels))
        order = np.lexsort((rank[vs], -self._vote_weights.astype(np.float64), vg))
        vg_sorted = vg[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = vg_sorted[1:] != vg_sorted[:-1]
        best_g, best_s = vg_sorted[first], vs[order][first]
        pos = np.searchsorted(best_g, gidx)
        pos_c = np.minimum(pos, best_g.size - 1)
        found = best_g[pos_c] == gidx
        out[found] = best_s[pos_c[found]]
        return out

    def to_arrays(self) -> dict:
        """Observed voxels as flat arrays, sorted by coordinate; votes sorted by label."""
        coords, gidx = self._observed()
        tsdf = self._tsdf.reshape(-1)[gidx]
        weight = self._weight.reshape(-1)[gidx]
        vote_voxel, vote_class, vote_instance, vote_weight = [], [], [], []
        if self._vote_keys.size:
            vg = self._vote_keys >> _LABEL_BITS
            vs = self._vote_keys & ((1 << _LABEL_BITS) - 1)
            position = np.searchsorted(gidx, vg, sorter=np.argsort(gidx))
            voxel_order = np.argsort(gidx)[position]
            cls = np.array([lab.class_id for lab in self.labels], dtype=np.int64)[vs]
            inst = np.array([lab.instance_id for lab in self.labels], dtype=np.int64)[vs]
            order = np.lexsort((inst, cls, voxel_order))
            vote_voxel, vote_class, vote_instance = voxel_order[order], cls[order], inst[order]
            vote_weight = self._vote_weights[order]
        return {
            "coords": coords.astype(np.int32),
            "tsdf": tsdf.astype(np.float32),
            "weight": weight.astype(np.float32),
            "vote_voxel": np.asarray(vote_voxel, dtype=np.int64),
            "vote_class": np.asarray(vote_class, dtype=np.int64),
            "vote_instance": np.asarray(vote_instance, dtype=np.int64),
            "vote_weight": np.asarray(vote_weight, dtype=np.float32),
        }

    @classmethod
    def from_arrays(cls, arrays: dict, voxel_size, truncation, origin=(0.0, 0.0, 0.0), weighting="constant"):
        m = cls(voxel_size, truncation, origin, weighting)
        coords = np.asarray(arrays["coords"], dtype=np.int64).reshape(-1, 3)
        if coords.size == 0:
            return m
        weight = np.asarray(arrays["weight"], dtype=np.float32)
        if np.any(weight <= 0):
            raise ValueError("stored voxels must have positive weight")
        gidx = m._global_index(coords, create=True)
        m._tsdf.reshape(-1)[gidx] = np.asarray(arrays["tsdf"], dtype=np.float32)
        m._weight.reshape(-1)[gidx] = weight
        vv = np.asarray(arrays["vote_voxel"], dtype=np.int64)
        if vv.size:
            slots = np.array([
                m.label_slot(PanopticLabel(int(c), int(i)))
                for c, i in zip(arrays["vote_class"], arrays["vote_instance"])
            ], dtype=np.int64)
            keys = (gidx[vv] << _LABEL_BITS) | slots
            order = np.argsort(keys, kind="stable")
            m._vote_keys = keys[order]
            m._vote_weights = np.asarray(arrays["vote_weight"], dtype=np.float32)[order]
        return m

    def surface_arrays(self, band: float):
        """Centres, majority-label slots (-1 = none) and weights of voxels with |D| < band."""
        if not band > 0:
            raise ValueError("band must be positive")
        coords, gidx = self._observed()
        tsdf = self._tsdf.reshape(-1)[gidx]
        near = np.abs(tsdf.astype(np.float64)) < band
        coords, gidx = coords[near], gidx[near]
        slots = self._winning_slots(gidx)
        return self.voxel_centers(coords), slots, self._weight.reshape(-1)[gidx].astype(np.float64)

    def extract_surface_points(self, band: float) -> list:
        """(centre, label or None, weight) for observed voxels with |D| < band, in coordinate order."""
        points, slots, weights = self.surface_arrays(band)
        return [
            (p, self.labels[s] if s >= 0 else None, float(w))
            for p, s, w in zip(points, slots.tolist(), weights.tolist())
        ]


def integrate_frame(voxel_map: PanopticVoxelMap, frame: LabeledRgbdFrame) -> IntegrationStats:
    return voxel_map.integrate_frame(frame)


def extract_surface_points(voxel_map: PanopticVoxelMap, band: float) -> list:
    return voxel_map.extract_surface_points(band)


def zero_crossings(voxel_map: PanopticVoxelMap, axis: int = 2) -> np.ndarray:
    """Linearly interpolated sign changes of D between neighbours along one grid axis."""
    data = voxel_map.to_arrays()
    coords = data["coords"].astype(np.int64)
    tsdf = data["tsdf"].astype(np.float64)
    if len(coords) == 0:
        return np.zeros((0, 3))
    step = np.zeros(3, dtype=np.int64)
    step[axis] = 1
    keys = _pack(coords)
    order = np.argsort(keys)
    pos = np.searchsorted(keys, _pack(coords + step), sorter=order)
    pos = np.minimum(pos, keys.size - 1)
    nb = order[pos]
    has_nb = keys[nb] == _pack(coords + step)
    d0, d1 = tsdf[has_nb], tsdf[nb[has_nb]]
    cross = (d0 > 0) != (d1 > 0)
    d0, d1 = d0[cross], d1[cross]
    frac = d0 / (d0 - d1)
    base = voxel_map.voxel_centers(coords[has_nb][cross])
    base[:, axis] += frac * voxel_map.voxel_size
    return base
