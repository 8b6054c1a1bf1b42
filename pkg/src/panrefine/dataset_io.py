"""Sequence layout on disk, synthetic scene generation, and map/point serialization.

Directory layout::

    manifest.txt          key=value lines (see ``write_manifest``)
    rgb/000000.png        8-bit RGB
    depth/000000.png      16-bit depth, meters * depth_scale
    mask/000000.png       16-bit predicted segment ids, 0 = unlabeled
    gt_mask/000000.png    16-bit ground-truth segment ids (optional)
    pose/000000.txt       4x4 camera-to-world, row-major

Segment ids map to panoptic labels through ``segment.<id>=<class_id>`` lines.
Thing segments get ``instance_id == segment id``; stuff segments get
``instance_id == 0``.
"""

from dataclasses import dataclass, field
import colorsys
import logging
import math
import os
from pathlib import Path
import struct

import numpy as np
from PIL import Image
from scipy import ndimage

from .mask_refine import InstanceMask, PanopticLabel
from .panoptic_tsdf import CameraIntrinsics, PanopticVoxelMap, Pose

log = logging.getLogger(__name__)

MAP_MAGIC = b"PVM1"
MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4sIdd3dQ")
_VOXEL_DTYPE = np.dtype([("ijk", "<i4", (3,)), ("tsdf", "<f4"), ("weight", "<f4"), ("nvotes", "<u2")])
_VOTE_DTYPE = np.dtype([("class_id", "<u2"), ("instance_id", "<u4"), ("weight", "<f4")])


class SequenceError(Exception):
    """Malformed or incomplete dataset directory."""


class MapFormatError(ValueError):
    pass


# -- manifest ---------------------------------------------------------------

@dataclass
class ClassInfo:
    name: str
    thing: bool


@dataclass
class SequenceManifest:
    root: Path
    frame_count: int
    intrinsics: CameraIntrinsics
    classes: dict = field(default_factory=dict)
    segments: dict = field(default_factory=dict)

    def frame_files(self, index: int) -> dict:
        name = f"{index:06d}"
        return {
            "rgb": self.root / "rgb" / f"{name}.png",
            "depth": self.root / "depth" / f"{name}.png",
            "mask": self.root / "mask" / f"{name}.png",
            "gt_mask": self.root / "gt_mask" / f"{name}.png",
            "pose": self.root / "pose" / f"{name}.txt",
        }

    def label_for_segment(self, segment_id: int) -> PanopticLabel:
        class_id = self.segments.get(segment_id)
        if class_id is None:
            raise SequenceError(f"segment id {segment_id} is not listed in the manifest")
        info = self.classes.get(class_id)
        thing = info.thing if info is not None else True
        return PanopticLabel(class_id, segment_id if thing else 0)

    @property
    def has_ground_truth(self) -> bool:
        return (self.root / "gt_mask").is_dir()


def write_manifest(manifest: SequenceManifest, path):
    intr = manifest.intrinsics
    lines = [
        f"width={intr.width}",
        f"height={intr.height}",
        f"fx={intr.fx!r}",
        f"fy={intr.fy!r}",
        f"cx={intr.cx!r}",
        f"cy={intr.cy!r}",
        f"depth_scale={intr.depth_scale!r}",
        f"frames={manifest.frame_count}",
    ]
    for cid in sorted(manifest.classes):
        info = manifest.classes[cid]
        lines.append(f"class.{cid}={info.name} {'thing' if info.thing else 'stuff'}")
    for sid in sorted(manifest.segments):
        lines.append(f"segment.{sid}={manifest.segments[sid]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(root) -> SequenceManifest:
    root = Path(root)
    path = root / "manifest.txt"
    if not path.is_file():
        raise SequenceError(f"no manifest.txt in {root}")
    values, classes, segments = {}, {}, {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SequenceError(f"{path}:{lineno}: expected key=value")
        key, value = key.strip(), value.strip()
        try:
            if key.startswith("class."):
                name, _, kind = value.rpartition(" ")
                if kind not in ("thing", "stuff") or not name:
                    raise ValueError(f"class entry must be '<name> thing|stuff', got {value!r}")
                classes[int(key[6:])] = ClassInfo(name, kind == "thing")
            elif key.startswith("segment."):
                segments[int(key[8:])] = int(value)
            else:
                values[key] = value
        except ValueError as exc:
            raise SequenceError(f"{path}:{lineno}: {exc}") from None
    required = ("width", "height", "fx", "fy", "cx", "cy", "frames")
    missing = [k for k in required if k not in values]
    if missing:
        raise SequenceError(f"{path}: missing keys {missing}")
    try:
        intr = CameraIntrinsics(
            float(values["fx"]), float(values["fy"]), float(values["cx"]), float(values["cy"]),
            int(values["width"]), int(values["height"]), float(values.get("depth_scale", 1000.0)),
        )
        frames = int(values["frames"])
    except ValueError as exc:
        raise SequenceError(f"{path}: {exc}") from None
    if frames < 0:
        raise SequenceError(f"{path}: negative frame count")
    for sid in segments:
        if sid <= 0 or sid > 0xFFFF:
            raise SequenceError(f"{path}: segment id {sid} outside 1..65535")
    return SequenceManifest(root, frames, intr, classes, segments)


# -- frames -----------------------------------------------------------------

@dataclass
class Frame:
    index: int
    depth: np.ndarray
    masks: list
    pose: Pose
    rgb: np.ndarray | None = None
    gt_masks: list | None = None


def read_u16_png(path) -> np.ndarray:
    with Image.open(path) as img:
        img.load()
        arr = np.array(img)
    if arr.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {arr.shape}")
    return arr.astype(np.uint16)


def write_u16_png(path, array):
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError("expected a 2D array")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 0xFFFF:
        raise ValueError("values do not fit in 16 bits")
    Image.fromarray(arr.astype(np.uint16)).save(path, compress_level=1)


def decode_depth(raw: np.ndarray, depth_scale: float) -> np.ndarray:
    return raw.astype(np.float64) / depth_scale


def encode_depth(depth: np.ndarray, depth_scale: float) -> np.ndarray:
    scaled = np.rint(np.asarray(depth, dtype=np.float64) * depth_scale)
    return np.clip(scaled, 0, 0xFFFF).astype(np.uint16)


def decode_masks(segment_image: np.ndarray, manifest: SequenceManifest) -> list:
    """One InstanceMask per nonzero segment id present, in ascending id order."""
    masks = []
    for sid in np.unique(segment_image).tolist():
        if sid == 0:
            continue
        masks.append(InstanceMask(segment_image == sid, manifest.label_for_segment(sid), sid))
    return masks


def encode_masks(masks, shape) -> np.ndarray:
    """Segment-id image; where masks overlap the later mask in the list wins."""
    out = np.zeros(shape, dtype=np.uint16)
    for m in masks:
        if m.bitmap.shape != tuple(shape):
            raise ValueError(f"mask shape {m.bitmap.shape} does not match {tuple(shape)}")
        if not 0 < m.segment_id <= 0xFFFF:
            raise ValueError(f"segment id {m.segment_id} cannot be stored in a mask image")
        out[m.bitmap] = m.segment_id
    return out


def read_pose(path) -> Pose:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append([float(tok) for tok in line.split()])
    m = np.array(rows, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got {m.shape}")
    return Pose.from_matrix(m)


def write_pose(path, pose: Pose):
    Path(path).write_text("\n".join(" ".join(repr(float(x)) for x in row) for row in pose.matrix) + "\n")


class Sequence:
    """A dataset directory; frames are decoded lazily in index order."""

    def __init__(self, root):
        self.manifest = read_manifest(root)

    def __len__(self):
        return self.manifest.frame_count

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.manifest.intrinsics

    def load_frame(self, index: int, with_rgb: bool = True) -> Frame:
        if not 0 <= index < len(self):
            raise IndexError(index)
        files = self.manifest.frame_files(index)
        shape = self.intrinsics.shape
        current = None
        try:
            current = files["depth"]
            depth_raw = read_u16_png(current)
            if depth_raw.shape != shape:
                raise ValueError(f"size {depth_raw.shape[::-1]} differs from manifest {shape[::-1]}")
            depth = decode_depth(depth_raw, self.intrinsics.depth_scale)

            current = files["mask"]
            seg = read_u16_png(current)
            if seg.shape != shape:
                raise ValueError(f"size {seg.shape[::-1]} differs from manifest {shape[::-1]}")
            masks = decode_masks(seg, self.manifest)

            gt_masks = None
            if files["gt_mask"].exists():
                current = files["gt_mask"]
                gt = read_u16_png(current)
                if gt.shape != shape:
                    raise ValueError(f"size {gt.shape[::-1]} differs from manifest {shape[::-1]}")
                gt_masks = decode_masks(gt, self.manifest)

            current = files["pose"]
            pose = read_pose(current)

            rgb = None
            if with_rgb and files["rgb"].exists():
                current = files["rgb"]
                with Image.open(current) as img:
                    rgb = np.array(img.convert("RGB"))
        except SequenceError as exc:
            raise SequenceError(f"frame {index}: {current}: {exc}") from None
        except (OSError, ValueError, SyntaxError) as exc:
            raise SequenceError(f"frame {index}: {current}: {exc}") from exc
        return Frame(index, depth, masks, pose, rgb, gt_masks)

    def frames(self, with_rgb: bool = True):
        for i in range(len(self)):
            yield self.load_frame(i, with_rgb)

    __iter__ = frames


def load_sequence(root) -> Sequence:
    seq = Sequence(root)
    if len(seq) == 0:
        raise SequenceError(f"{root}: sequence has no frames")
    return seq


def write_refined_masks(masks_per_frame, out_dir, shape) -> list:
    """Write one 16-bit segment-id image per frame (0 = unlabeled).

    Where refined masks overlap, the mask later in the frame's list wins.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, masks in enumerate(masks_per_frame):
        path = out_dir / f"{index:06d}.png"
        write_u16_png(path, encode_masks(masks, shape))
        paths.append(path)
    return paths


def read_mask_dir(directory, manifest: SequenceManifest) -> list:
    """Masks for every ``%06d.png`` in `directory`, frame by frame."""
    directory = Path(directory)
    out = []
    for index in range(manifest.frame_count):
        path = directory / f"{index:06d}.png"
        try:
            out.append(decode_masks(read_u16_png(path), manifest))
        except (OSError, ValueError) as exc:
            raise SequenceError(f"frame {index}: {path}: {exc}") from exc
    return out


# -- synthetic scenes -------------------------------------------------------

@dataclass
class Primitive:
    kind: str  # "plane" | "sphere" | "box"
    params: tuple
    segment_id: int


@dataclass
class SyntheticSceneSpec:
    kind: str
    trajectory: list
    intrinsics: CameraIntrinsics
    primitives: list = None
    classes: dict = None
    segments: dict = None
    depth_sigma: float = 0.0
    hole_probability: float = 0.0
    leak_probability: float = 0.0
    leak_radius: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"scene kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        if not self.trajectory:
            raise ValueError("need at least one camera pose")
        for name in ("hole_probability", "leak_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.depth_sigma < 0:
            raise ValueError("depth_sigma must be non-negative")
        if self.leak_radius < 1:
            raise ValueError("leak_radius must be at least 1 pixel")
        if self.primitives is None:
            prims, classes, segments = default_scene(self.kind)
            self.primitives = prims
            self.classes = classes if self.classes is None else self.classes
            self.segments = segments if self.segments is None else self.segments


SCENE_KINDS = ("plane", "sphere", "boxes-room")


def default_scene(kind: str):
    """Primitives, class table and segment table for a named scene (z-up world)."""
    if kind == "plane":
        prims = [Primitive("plane", ((0.0, 0.0, 2.0), (0.0, 0.0, -1.0)), 1)]
        return prims, {1: ClassInfo("wall", False)}, {1: 1}
    if kind == "sphere":
        prims = [Primitive("sphere", ((0.0, 0.0, 0.0), 1.0), 1)]
        return prims, {1: ClassInfo("ball", True)}, {1: 1}
    if kind == "boxes-room":
        classes = {
            1: ClassInfo("wall", False),
            2: ClassInfo("floor", False),
            3: ClassInfo("box", True),
            4: ClassInfo("cabinet", True),
        }
        # objects are wall- or shelf-mounted: none touches the floor or another object
        prims = [
            Primitive("plane", ((0.0, 0.0, 0.0), (0.0, 0.0, 1.0)), 1),
            Primitive("plane", ((3.0, 0.0, 0.0), (-1.0, 0.0, 0.0)), 2),
            Primitive("plane", ((-3.0, 0.0, 0.0), (1.0, 0.0, 0.0)), 2),
            Primitive("plane", ((0.0, 3.0, 0.0), (0.0, -1.0, 0.0)), 2),
            Primitive("plane", ((0.0, -3.0, 0.0), (0.0, 1.0, 0.0)), 2),
            Primitive("box", ((-0.9, -0.5, 0.45), (-0.5, -0.1, 0.85)), 10),
            Primitive("box", ((0.4, -0.8, 0.6), (0.9, -0.4, 0.95)), 11),
            Primitive("box", ((0.5, 0.5, 0.35), (0.8, 0.8, 1.05)), 12),
            Primitive("box", ((-0.7, 0.4, 0.9), (-0.3, 0.9, 1.2)), 13),
            Primitive("box", ((-0.1, -0.15, 0.55), (0.2, 0.15, 0.8)), 14),
            Primitive("box", ((0.0, 0.3, 1.15), (0.25, 0.55, 1.35)), 15),
        ]
        segments = {1: 2, 2: 1, 10: 3, 11: 4, 12: 4, 13: 3, 14: 3, 15: 3}
        return prims, classes, segments
    raise ValueError(f"unknown scene kind {kind!r}")


def orbit_trajectory(frames: int, radius: float, height: float, target=(0.0, 0.0, 0.0), arc: float = 2 * math.pi) -> list:
    """Cameras on a horizontal circle around `target`, all looking at it (z-up)."""
    target = np.asarray(target, dtype=np.float64)
    poses = []
    for i in range(frames):
        a = arc * i / max(frames, 1)
        eye = target + np.array([radius * math.cos(a), radius * math.sin(a), height - target[2]])
        poses.append(Pose.look_at(eye, target, up=(0.0, 0.0, 1.0)))
    return poses


def default_trajectory(kind: str, frames: int) -> list:
    if kind == "plane":
        poses = []
        for i in range(frames):
            a = 2 * math.pi * i / max(frames, 1)
            eye = np.array([0.3 * math.cos(a), 0.3 * math.sin(a), 0.2 * math.sin(2 * a)])
            poses.append(Pose.look_at(eye, (0.1 * math.sin(a), 0.1 * math.cos(a), 2.0)))
        return poses
    if kind == "sphere":
        poses = []
        for i in range(frames):
            a = 2 * math.pi * i / max(frames, 1)
            height = 1.2 * math.sin(3 * a)
            poses.append(Pose.look_at((3.0 * math.cos(a), 3.0 * math.sin(a), height), (0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)))
        return poses
    return orbit_trajectory(frames, 2.2, 1.4, target=(0.0, 0.0, 0.8))


def _camera_rays(intr: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def _intersect(prim: Primitive, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Ray parameter of the first hit per ray (inf for misses); rays are o + s * d."""
    with np.errstate(divide="ignore", invalid="ignore"):
        if prim.kind == "plane":
            point, normal = (np.asarray(p, dtype=np.float64) for p in prim.params)
            denom = dirs @ normal
            s = ((point - origin) @ normal) / denom
            return np.where((np.abs(denom) > 1e-12) & (s > 0), s, np.inf)
        if prim.kind == "sphere":
            center, radius = np.asarray(prim.params[0], dtype=np.float64), float(prim.params[1])
            oc = origin - center
            a = np.einsum("...i,...i", dirs, dirs)
            b = 2.0 * (dirs @ oc)
            c = oc @ oc - radius * radius
            disc = b * b - 4 * a * c
            root = np.sqrt(np.maximum(disc, 0.0))
            s0 = (-b - root) / (2 * a)
            s1 = (-b + root) / (2 * a)
            s = np.where(s0 > 0, s0, s1)
            return np.where((disc >= 0) & (s > 0), s, np.inf)
        if prim.kind == "box":
            lo, hi = (np.asarray(p, dtype=np.float64) for p in prim.params)
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
            # fmax/fmin skip the NaNs from rays parallel to a slab face
            tmin = np.fmax.reduce(np.minimum(t1, t2), axis=-1)
            tmax = np.fmin.reduce(np.maximum(t1, t2), axis=-1)
            s = np.where(tmin > 0, tmin, tmax)
            return np.where((tmax >= tmin) & (s > 0), s, np.inf)
    raise ValueError(f"unknown primitive kind {prim.kind!r}")


def render_frame(primitives, intr: CameraIntrinsics, pose: Pose):
    """Noise-free camera-frame depth (0 = no hit) and segment-id image."""
    rays = _camera_rays(intr)
    dirs = rays @ pose.rotation.T
    best = np.full(rays.shape[:2], np.inf)
    seg = np.zeros(rays.shape[:2], dtype=np.uint16)
    for prim in primitives:
        s = _intersect(prim, pose.translation, dirs)
        closer = s < best
        best[closer] = s[closer]
        seg[closer] = prim.segment_id
    # camera rays have unit z, so the ray parameter is the depth
    depth = np.where(np.isfinite(best), best, 0.0)
    return depth, seg


def leak_masks(gt_masks, uniform: np.ndarray, probability: float, radius: int) -> list:
    """Corrupt thing masks with background pixels from a dilated ring.

    A ring pixel leaks in when ``uniform < probability``. Pixels of other
    things are never taken, so every predicted mask still covers its own
    ground truth.
    """
    out = []
    structure = ndimage.generate_binary_structure(2, 1)
    things = np.zeros(uniform.shape, dtype=bool)
    for m in gt_masks:
        if m.label.is_thing:
            things |= m.bitmap
    for m in gt_masks:
        if not m.label.is_thing or probability <= 0 or not m.bitmap.any():
            out.append(m.with_bitmap(m.bitmap.copy()))
            continue
        ring = ndimage.binary_dilation(m.bitmap, structure, iterations=radius) & ~things
        out.append(m.with_bitmap(m.bitmap | (ring & (uniform < probability))))
    return out


def _palette_rgb(segment_ids: np.ndarray) -> np.ndarray:
    lut = np.zeros((int(segment_ids.max(initial=0)) + 1, 3), dtype=np.uint8)
    for sid in range(1, lut.shape[0]):
        lut[sid] = palette_color(sid)
    return lut[segment_ids]


def generate_synthetic(spec: SyntheticSceneSpec, out_dir) -> SequenceManifest:
    """Render the scene along the trajectory and write a dataset directory."""
    out = Path(out_dir)
    try:
        for sub in ("rgb", "depth", "mask", "gt_mask", "pose"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SequenceError(f"cannot write to {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise SequenceError(f"cannot write to {out}")

    intr = spec.intrinsics
    manifest = SequenceManifest(out, len(spec.trajectory), intr, dict(spec.classes), dict(spec.segments))
    rng = np.random.default_rng(spec.seed)
    for index, pose in enumerate(spec.trajectory):
        depth, seg = render_frame(spec.primitives, intr, pose)
        # draw every random field each frame so outputs for different
        # probabilities share the same underlying noise
        noise = rng.standard_normal(depth.shape)
        hole_u = rng.random(depth.shape)
        leak_u = rng.random(depth.shape)

        if spec.depth_sigma > 0:
            depth = np.where(depth > 0, np.maximum(depth + spec.depth_sigma * noise, 0.0), 0.0)
        depth = np.where(hole_u < spec.hole_probability, 0.0, depth)
        raw = encode_depth(depth, intr.depth_scale)

        gt_masks = decode_masks(seg, manifest)
        pred = leak_masks(gt_masks, leak_u, spec.leak_probability, spec.leak_radius)

        files = manifest.frame_files(index)
        write_u16_png(files["depth"], raw)
        write_u16_png(files["gt_mask"], seg)
        write_u16_png(files["mask"], encode_masks(pred, depth.shape))
        Image.fromarray(_palette_rgb(seg)).save(files["rgb"], compress_level=1)
        write_pose(files["pose"], pose)
    write_manifest(manifest, out / "manifest.txt")
    log.info("wrote %d synthetic %s frames to %s", len(spec.trajectory), spec.kind, out)
    return manifest


# -- PVM1 maps --------------------------------------------------------------

def save_map(voxel_map: PanopticVoxelMap, path):
    data = voxel_map.to_arrays()
    n = len(data["coords"])
    if data["vote_class"].size and (data["vote_class"].max() > 0xFFFF or data["vote_instance"].max() > 0xFFFFFFFF):
        raise MapFormatError("label ids do not fit the map format")
    nvotes = np.bincount(data["vote_voxel"], minlength=n).astype(np.int64)
    if n and nvotes.max() > 0xFFFF:
        raise MapFormatError("too many labels on a single voxel")

    voxels = np.zeros(n, dtype=_VOXEL_DTYPE)
    voxels["ijk"] = data["coords"]
    voxels["tsdf"] = data["tsdf"]
    voxels["weight"] = data["weight"]
    voxels["nvotes"] = nvotes
    votes = np.zeros(data["vote_voxel"].size, dtype=_VOTE_DTYPE)
    votes["class_id"] = data["vote_class"]
    votes["instance_id"] = data["vote_instance"]
    votes["weight"] = data["vote_weight"]

    vsize, tsize = _VOXEL_DTYPE.itemsize, _VOTE_DTYPE.itemsize
    starts = np.arange(n, dtype=np.int64) * vsize + np.concatenate([[0], np.cumsum(nvotes)[:-1]]).astype(np.int64) * tsize
    body = np.zeros(n * vsize + votes.size * tsize, dtype=np.uint8)
    if n:
        body[starts[:, None] + np.arange(vsize)] = voxels.view(np.uint8).reshape(n, vsize)
    if votes.size:
        # votes are sorted by voxel, so each vote's rank within its voxel follows from a cumsum
        first = np.concatenate([[0], np.cumsum(nvotes)[:-1]])
        rank = np.arange(votes.size) - first[data["vote_voxel"]]
        vstart = starts[data["vote_voxel"]] + vsize + rank * tsize
        body[vstart[:, None] + np.arange(tsize)] = votes.view(np.uint8).reshape(-1, tsize)

    header = _MAP_HEADER.pack(
        MAP_MAGIC, MAP_VERSION, voxel_map.voxel_size, voxel_map.truncation, *voxel_map.origin.tolist(), n
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def load_map(path, weighting: str = "constant") -> PanopticVoxelMap:
    blob = Path(path).read_bytes()
    if len(blob) < _MAP_HEADER.size:
        raise MapFormatError(f"{path}: truncated header")
    magic, version, voxel_size, truncation, ox, oy, oz, n = _MAP_HEADER.unpack_from(blob, 0)
    if magic != MAP_MAGIC:
        raise MapFormatError(f"{path}: bad magic {magic!r}")
    if version != MAP_VERSION:
        raise MapFormatError(f"{path}: unsupported version {version}")
    vsize, tsize = _VOXEL_DTYPE.itemsize, _VOTE_DTYPE.itemsize
    body = memoryview(blob)[_MAP_HEADER.size :]
    starts = np.empty(n, dtype=np.int64)
    counts = np.empty(n, dtype=np.int64)
    offset = 0
    count_at = vsize - 2
    for i in range(n):
        if offset + vsize > len(body):
            raise MapFormatError(f"{path}: truncated at voxel {i}")
        c = body[offset + count_at] | (body[offset + count_at + 1] << 8)
        starts[i] = offset
        counts[i] = c
        offset += vsize + c * tsize
    if offset > len(body):
        raise MapFormatError(f"{path}: truncated vote table")
    if offset != len(body):
        raise MapFormatError(f"{path}: {len(body) - offset} trailing bytes")

    raw = np.frombuffer(body, dtype=np.uint8)
    voxels = raw[starts[:, None] + np.arange(vsize)].reshape(-1).view(_VOXEL_DTYPE) if n else np.zeros(0, _VOXEL_DTYPE)
    total_votes = int(counts.sum())
    vote_voxel = np.repeat(np.arange(n), counts)
    if total_votes:
        first = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rank = np.arange(total_votes) - first[vote_voxel]
        vstart = starts[vote_voxel] + vsize + rank * tsize
        votes = raw[vstart[:, None] + np.arange(tsize)].reshape(-1).view(_VOTE_DTYPE)
    else:
        votes = np.zeros(0, _VOTE_DTYPE)
    arrays = {
        "coords": voxels["ijk"].astype(np.int32),
        "tsdf": voxels["tsdf"].astype(np.float32),
        "weight": voxels["weight"].astype(np.float32),
        "vote_voxel": vote_voxel,
        "vote_class": votes["class_id"].astype(np.int64),
        "vote_instance": votes["instance_id"].astype(np.int64),
        "vote_weight": votes["weight"].astype(np.float32),
    }
    try:
        return PanopticVoxelMap.from_arrays(arrays, voxel_size, truncation, (ox, oy, oz), weighting)
    except ValueError as exc:
        raise MapFormatError(f"{path}: {exc}") from exc


# -- PLY --------------------------------------------------------------------

UNLABELED_COLOR = (128, 128, 128)


def palette_color(key: int) -> tuple:
    """Deterministic color for an id; hues follow the golden-ratio sequence."""
    if key <= 0:
        return UNLABELED_COLOR
    hue = (key * 0.618033988749895) % 1.0
    sat = 0.65 + 0.3 * ((key * 7) % 3) / 2
    val = 0.95 - 0.25 * ((key // 3) % 3) / 2
    r, g, b = colorsys.hsv_to_rgb(hue, sat, val)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def export_ply(points, path, color_mode: str = "instance"):
    """Write (point, label, weight) tuples as a binary little-endian colored PLY."""
    if color_mode not in ("instance", "class"):
        raise ValueError("color_mode must be 'instance' or 'class'")
    verts = np.zeros(len(points), dtype=[("xyz", "<f4", (3,)), ("rgb", "u1", (3,))])
    for i, (p, label, _w) in enumerate(points):
        verts["xyz"][i] = p
        if label is None:
            verts["rgb"][i] = UNLABELED_COLOR
        else:
            key = label.instance_id if color_mode == "instance" else label.class_id
            if color_mode == "instance" and key == 0:
                # stuff has no instance; color it by class
                key = label.class_id
            verts["rgb"][i] = palette_color(key)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(verts)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(verts.tobytes())


def read_ply(path):
    """Vertices and colors from a file written by :func:`export_ply`."""
    blob = Path(path).read_bytes()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    count = None
    for line in blob[:end].decode("ascii").splitlines():
        if line.startswith("element vertex"):
            count = int(line.split()[2])
    verts = np.frombuffer(blob[end:], dtype=[("xyz", "<f4", (3,)), ("rgb", "u1", (3,))], count=count)
    return verts["xyz"].copy(), verts["rgb"].copy()
