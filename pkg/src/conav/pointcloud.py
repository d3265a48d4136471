"""RGB-D to point-cloud pipeline and the point-encoder grouping front end.

Clouds are ``(N, 6)`` float arrays: xyz in meters followed by rgb in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scene import Camera, Scene

CameraParams = Camera

NUM_POINTS = 8192
NUM_GROUPS = 512
GROUP_SIZE = 32

CLOUD_MAGIC = b"PC6\0"
CLOUD_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class EmptyCloudError(ValueError):
    pass


class CloudFileError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    label: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 6)
        if pts.ndim != 2 or pts.shape[1] != 6:
            raise ValueError(f"point array must be (N, 6), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        if pts.shape[0] and (pts[:, 3:].min() < 0.0 or pts[:, 3:].max() > 1.0):
            raise ValueError("colors must lie in [0, 1]")
        self.points = pts

    @classmethod
    def empty(cls, label: str | None = None) -> "PointCloud":
        return cls(np.zeros((0, 6)), label)

    @property
    def is_empty(self) -> bool:
        return self.points.shape[0] == 0

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def rgb(self) -> np.ndarray:
        return self.points[:, 3:]

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.points, other.points)


@dataclass
class ObjectMask:
    label: str
    bitmap: np.ndarray

    def __post_init__(self):
        self.bitmap = np.asarray(self.bitmap, dtype=bool)
        if self.bitmap.ndim != 2:
            raise ValueError("mask bitmap must be 2-D")
        if not self.bitmap.any():
            raise ValueError(f"mask {self.label!r} has no true pixels")


@dataclass(frozen=True)
class PatchGrouping:
    center_indices: np.ndarray
    patches: np.ndarray

    @property
    def m(self) -> int:
        return int(self.center_indices.shape[0])

    @property
    def k(self) -> int:
        return int(self.patches.shape[1])


@dataclass
class PointCloudOptions:
    """Knobs for building the per-step cloud fed to the belief source."""

    enabled: bool = True
    num_points: int = NUM_POINTS
    num_groups: int = NUM_GROUPS
    group_size: int = GROUP_SIZE
    remove_outliers: bool = False
    outlier_neighbors: int = 16
    outlier_std_ratio: float = 2.0
    headings: list[int] | None = field(default=None)


def _check_frame(rgb: np.ndarray, depth: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    rgb = np.asarray(rgb)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth shape {depth.shape} does not match camera {(cam.height, cam.width)}")
    if rgb.shape[:2] != depth.shape or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"rgb shape {rgb.shape} does not match depth {depth.shape}")
    return rgb, depth


def _normalize_colors(rgb: np.ndarray) -> np.ndarray:
    if np.issubdtype(rgb.dtype, np.integer):
        return rgb.astype(np.float64) / 255.0
    out = rgb.astype(np.float64)
    if out.size and (out.min() < 0.0 or out.max() > 1.0):
        raise ValueError("float rgb frames must already be in [0, 1]")
    return out


def unproject(rgb, depth, cam: Camera, mask: np.ndarray | None = None, label: str | None = None) -> PointCloud:
    """Lift every pixel with valid depth into world coordinates.

    Depth is in meters; zero and NaN mark missing readings. Pixel ``(u, v)`` is
    column ``u``, row ``v``.
    """
    rgb, depth = _check_frame(rgb, depth, cam)
    valid = np.isfinite(depth) & (depth > 0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth.shape:
            raise ValueError(f"mask shape {mask.shape} does not match frame {depth.shape}")
        valid &= mask
    v, u = np.nonzero(valid)
    if u.size == 0:
        return PointCloud.empty(label)
    d = depth[v, u]
    cam_pts = np.stack(
        [(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d, np.ones_like(d)], axis=1
    )
    world = cam_pts @ cam.pose_matrix.T
    colors = _normalize_colors(rgb[v, u])
    return PointCloud(np.hstack([world[:, :3], colors]), label)


def project(xyz: np.ndarray, cam: Camera) -> np.ndarray:
    """World points to ``(u, v, depth)`` rows; inverse of :func:`unproject`."""
    xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
    homo = np.hstack([xyz, np.ones((xyz.shape[0], 1))])
    cam_pts = homo @ np.linalg.inv(cam.pose_matrix).T
    z = cam_pts[:, 2]
    return np.stack([cam.fx * cam_pts[:, 0] / z + cam.cx, cam.fy * cam_pts[:, 1] / z + cam.cy, z], axis=1)


def extract_object(rgb, depth, cam: Camera, mask: ObjectMask) -> PointCloud:
    return unproject(rgb, depth, cam, mask=mask.bitmap, label=mask.label)


def merge(clouds: Sequence[PointCloud], label: str | None = None) -> PointCloud:
    if not clouds:
        raise ValueError("merge needs at least one cloud")
    if len(clouds) == 1 and label is None:
        return clouds[0]
    parts = [c.points for c in clouds if not c.is_empty]
    if not parts:
        return PointCloud.empty(label)
    return PointCloud(np.concatenate(parts, axis=0), label)


def uniform_sample(cloud: PointCloud, num_points: int, seed: int) -> PointCloud:
    """Draw exactly ``num_points`` points.

    Larger clouds are subsampled without replacement (original order kept);
    smaller clouds keep every point and are topped up by sampling with
    replacement.
    """
    if num_points < 1:
        raise ValueError("num_points must be >= 1")
    if cloud.is_empty:
        raise EmptyCloudError("cannot sample from an empty cloud")
    n = len(cloud)
    if n == num_points:
        return PointCloud(cloud.points.copy(), cloud.label)
    rng = np.random.default_rng(seed)
    if n > num_points:
        idx = np.sort(rng.choice(n, size=num_points, replace=False))
    else:
        idx = np.concatenate([np.arange(n), rng.choice(n, size=num_points - n, replace=True)])
    return PointCloud(cloud.points[idx], cloud.label)


def fps_centers(cloud: PointCloud, m: int, seed: int | None = None, start: int | None = None) -> np.ndarray:
    """Farthest-point sampling over xyz.

    The first center is ``start`` if given, otherwise drawn from ``seed``. Ties
    go to the lowest index; chosen points are never picked twice.
    """
    n = len(cloud)
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > n:
        raise ValueError(f"cannot pick {m} centers from {n} points")
    xyz = cloud.xyz
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    centers = np.empty(m, dtype=np.int64)
    centers[0] = start
    mind = np.sum((xyz - xyz[start]) ** 2, axis=1)
    mind[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        centers[i] = nxt
        mind = np.minimum(mind, np.sum((xyz - xyz[nxt]) ** 2, axis=1))
        mind[centers[: i + 1]] = -1.0
    return centers


def coverage_radius(cloud: PointCloud, centers: Sequence[int]) -> float:
    xyz = cloud.xyz
    c = xyz[np.asarray(centers)]
    d2 = np.min(np.sum((xyz[:, None, :] - c[None, :, :]) ** 2, axis=2), axis=1)
    return float(np.sqrt(d2.max()))


def knn_group(cloud: PointCloud, centers: Sequence[int], k: int) -> PatchGrouping:
    """The ``k`` nearest points to each center; the center itself always comes first."""
    n = len(cloud)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds cloud size {n}")
    centers = np.asarray(centers, dtype=np.int64)
    if centers.size and (centers.min() < 0 or centers.max() >= n):
        raise ValueError("center index out of range")
    xyz = cloud.xyz
    patches = np.empty((centers.size, k), dtype=np.int64)
    for start in range(0, centers.size, 64):
        block = centers[start : start + 64]
        d2 = np.sum((xyz[block][:, None, :] - xyz[None, :, :]) ** 2, axis=2)
        d2[np.arange(block.size), block] = -1.0
        order = np.argsort(d2, axis=1, kind="stable")
        patches[start : start + block.size] = order[:, :k]
    return PatchGrouping(centers, patches)


def group(cloud: PointCloud, m: int = NUM_GROUPS, k: int = GROUP_SIZE, seed: int = 0) -> PatchGrouping:
    return knn_group(cloud, fps_centers(cloud, m, seed=seed), k)


def remove_outliers(cloud: PointCloud, neighbors: int = 16, std_ratio: float = 2.0) -> PointCloud:
    """Drop points whose mean neighbor distance exceeds mean + ``std_ratio`` * std."""
    from scipy.spatial import cKDTree

    n = len(cloud)
    if n <= neighbors:
        return cloud
    dist, _ = cKDTree(cloud.xyz).query(cloud.xyz, k=neighbors + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    keep = mean_d <= mean_d.mean() + std_ratio * mean_d.std()
    return PointCloud(cloud.points[keep], cloud.label)


def write_cloud(cloud: PointCloud, path: str | Path) -> None:
    data = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CLOUD_MAGIC, CLOUD_VERSION, data.shape[0]))
        f.write(data.tobytes())


def read_cloud(path: str | Path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CloudFileError(f"{path}: truncated header")
    magic, version, count = _HEADER.unpack_from(raw)
    if magic != CLOUD_MAGIC:
        raise CloudFileError(f"{path}: bad magic {magic!r}")
    if version != CLOUD_VERSION:
        raise CloudFileError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size :]
    if len(body) != count * 24:
        raise CloudFileError(f"{path}: expected {count} points, body has {len(body)} bytes")
    pts = np.frombuffer(body, dtype="<f4").reshape(count, 6).astype(np.float64)
    try:
        return PointCloud(pts)
    except ValueError as e:
        raise CloudFileError(f"{path}: {e}") from e


def write_ply(cloud: PointCloud, path: str | Path) -> None:
    """ASCII PLY with 8-bit colors, for external viewers."""
    rgb8 = np.rint(cloud.rgb * 255.0).astype(int)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for (x, y, z), (r, g, b) in zip(cloud.xyz, rgb8):
        lines.append(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}")
    Path(path).write_text("\n".join(lines) + "\n")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path: str | Path) -> PointCloud:
    """Read vertex positions (and colors, if present) from an ASCII or binary PLY."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise CloudFileError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                # only trailing elements (faces) may carry lists; they are never read
                if len(elements) == 1:
                    raise CloudFileError(f"{path}: list properties on vertices are not supported")
                continue
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if not elements or elements[0][0] != "vertex":
        raise CloudFileError(f"{path}: first element must be vertex")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    if fmt == "ascii":
        rows = raw[body_start:].decode("ascii").split("\n")[:count]
        arr = np.array([[float(x) for x in r.split()[: len(props)]] for r in rows], dtype=np.float64)
        arr = arr.reshape(count, len(props))
        cols = {n: arr[:, i] for i, n in enumerate(names)}
        types = dict(props)
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        order = "<" if fmt == "binary_little_endian" else ">"
        dtype = np.dtype([(n, order + t) for n, t in props])
        rec = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
        cols = {n: rec[n].astype(np.float64) for n in names}
        types = dict(props)
    else:
        raise CloudFileError(f"{path}: unknown PLY format {fmt!r}")
    xyz = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    if all(c in cols for c in ("red", "green", "blue")):
        rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
        if types["red"].startswith("u1"):
            rgb = rgb / 255.0
    else:
        rgb = np.zeros_like(xyz)
    return PointCloud(np.hstack([xyz, rgb]))


def load_frame(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    raise ValueError(f"unsupported frame format {path.suffix!r} (expected .npy)")


def load_masks(path: str | Path) -> list[ObjectMask]:
    """Masks stored as an ``.npz`` archive mapping label -> boolean bitmap."""
    with np.load(path) as data:
        return [ObjectMask(label, data[label]) for label in data.files]


def viewpoint_cloud(
    scene: Scene,
    viewpoint: str,
    masks: dict[int, list[ObjectMask]] | None = None,
    headings: Sequence[int] | None = None,
) -> PointCloud:
    """Merge the clouds of every frame at ``viewpoint``.

    With ``masks`` (heading -> object masks), each frame contributes only the
    union of its per-object clouds.
    """
    vp = scene.viewpoints[viewpoint]
    parts = []
    for h in sorted(vp.frames):
        if headings is not None and h not in headings:
            continue
        fr = vp.frames[h]
        rgb_path, depth_path = fr.resolve(scene.base_dir)
        if depth_path is None:
            raise FileNotFoundError(f"{viewpoint} heading {h}: no depth frame")
        depth = load_frame(depth_path)
        rgb = load_frame(rgb_path) if rgb_path is not None else np.zeros(depth.shape + (3,), np.uint8)
        if masks is not None and h in masks:
            parts.extend(extract_object(rgb, depth, fr.camera, m) for m in masks[h])
        else:
            parts.append(unproject(rgb, depth, fr.camera))
    if not parts:
        return PointCloud.empty()
    return merge(parts)


def build_cloud(scene: Scene, viewpoint: str, options: PointCloudOptions, seed: int) -> PointCloud | None:
    """The sampled ``p_t`` for a viewpoint, or ``None`` when it has no imagery."""
    if not options.enabled or not scene.viewpoints[viewpoint].frames:
        return None
    cloud = viewpoint_cloud(scene, viewpoint, headings=options.headings)
    if cloud.is_empty:
        return None
    if options.remove_outliers:
        cloud = remove_outliers(cloud, options.outlier_neighbors, options.outlier_std_ratio)
    return uniform_sample(cloud, options.num_points, seed)
