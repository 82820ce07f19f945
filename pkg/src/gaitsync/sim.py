"""Synthetic asynchronous multi-camera capture of a deforming foot-like shape.

The foot proxy is a lat-long sphere mesh warped into a tapered superellipsoid
with a wide forefoot lobe (x = length, y = width, z = height).  Its
deformation over one gait cycle is a length scaling, a width scaling, a
vertical bend of the forefoot and a rigid vertical lift of the whole foot; neither
the bend nor the rigid motion changes x- or y-extents, so the programmed
dimension variations are exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Frame, PointCloud, TriMesh


@dataclass(frozen=True)
class DeformingShape:
    """Parametric foot proxy with a periodic gait deformation.

    ``length_variation`` is the peak-to-peak length change as a fraction of
    the mean length; ``width_variation`` is the peak-to-peak width change as a
    fraction of the mean *length* (foot-dimension variations are usually
    reported against average foot length).
    """

    length: float = 243.0
    width: float = 95.0
    height: float = 70.0
    length_variation: float = 0.03
    width_variation: float = 0.05
    bend_amplitude: float = 12.0
    sway_amplitude: float = 0.0
    lift_amplitude: float = 40.0
    period: float = 1.0
    width_phase: float = 0.25 * np.pi
    bend_phase: float = 0.5 * np.pi
    n_lat: int = 32
    n_lon: int = 56

    def __post_init__(self):
        for name in ("length", "width", "height", "period"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _unit_sphere(n_lat: int, n_lon: int):
    """Lat-long sphere with poles on the x axis."""
    theta = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0.0, 2 * np.pi, n_lon, endpoint=False)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([-np.cos(tt), np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp)], axis=-1).reshape(-1, 3)
    verts = np.vstack([[-1.0, 0.0, 0.0], ring, [1.0, 0.0, 0.0]])
    faces = []
    n_rings = n_lat - 1
    idx = lambda r, c: 1 + r * n_lon + (c % n_lon)  # noqa: E731
    for c in range(n_lon):
        faces.append((0, idx(0, c + 1), idx(0, c)))
    for r in range(n_rings - 1):
        for c in range(n_lon):
            a, b = idx(r, c), idx(r, c + 1)
            d, e = idx(r + 1, c), idx(r + 1, c + 1)
            faces.append((a, b, e))
            faces.append((a, e, d))
    last = len(verts) - 1
    for c in range(n_lon):
        faces.append((last, idx(n_rings - 1, c), idx(n_rings - 1, c + 1)))
    return verts, np.array(faces, dtype=np.int64)


def _rest_vertices(shape: DeformingShape, sphere: np.ndarray) -> np.ndarray:
    a, b, c = sphere[:, 0], sphere[:, 1], sphere[:, 2]
    s = np.sqrt(np.clip(1.0 - a * a, 0.0, None))
    # width profile: narrow heel, wide ball around 65-70 % of length, rounded toes
    lobe = 0.72 + 0.28 * np.exp(-((a - 0.35) / 0.45) ** 2)
    # height profile: tall instep, flat toes
    rise = 0.45 + 0.55 * np.exp(-((a + 0.1) / 0.6) ** 2)
    # superellipse cross-section (exponent 3 gives a boxier sole)
    p = 3.0
    ang = np.arctan2(c, b)
    cb, sb = np.cos(ang), np.sin(ang)
    yb = np.sign(cb) * np.abs(cb) ** (2.0 / p)
    zb = np.sign(sb) * np.abs(sb) ** (2.0 / p)
    x = 0.5 * shape.length * a
    y = 0.5 * shape.width * lobe * s * yb
    z = 0.5 * shape.height * rise * s * zb
    v = np.stack([x, y, z], axis=1)
    # rescale so the rest width extent is exactly shape.width
    v[:, 1] *= shape.width / (v[:, 1].max() - v[:, 1].min())
    return v


@dataclass(frozen=True)
class _ShapeCache:
    rest: np.ndarray
    faces: np.ndarray


_CACHE: dict = {}


def _cached(shape: DeformingShape) -> _ShapeCache:
    key = (shape.length, shape.width, shape.height, shape.n_lat, shape.n_lon)
    if key not in _CACHE:
        sphere, faces = _unit_sphere(shape.n_lat, shape.n_lon)
        _CACHE[key] = _ShapeCache(_rest_vertices(shape, sphere), faces)
    return _CACHE[key]


def deformation_factors(t: float, shape: DeformingShape):
    """Return (length scale, width scale, bend offset in mm) at time ``t``."""
    phase = 2.0 * np.pi * (t / shape.period)
    s_len = 1.0 + 0.5 * shape.length_variation * np.cos(phase)
    # peak-to-peak width change equals width_variation * length
    w_amp = 0.5 * shape.width_variation * shape.length / shape.width
    s_wid = 1.0 + w_amp * np.cos(phase + shape.width_phase)
    bend = shape.bend_amplitude * np.sin(phase + shape.bend_phase)
    return s_len, s_wid, bend


def template_mesh(shape: DeformingShape | None = None) -> TriMesh:
    """The undeformed (mean) foot proxy."""
    shape = shape or DeformingShape()
    c = _cached(shape)
    return TriMesh(c.rest, c.faces)


def shape_at(t: float, shape: DeformingShape | None = None) -> TriMesh:
    shape = shape or DeformingShape()
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    c = _cached(shape)
    s_len, s_wid, bend = deformation_factors(t, shape)
    v = c.rest.copy()
    xr = v[:, 0] / (0.5 * shape.length)  # -1 heel .. +1 toe
    v[:, 0] *= s_len
    v[:, 1] *= s_wid
    # forefoot flexes about the arch; heel stays put
    v[:, 2] += bend * np.clip(xr + 0.2, 0.0, None) ** 2
    v += gait_translation(t, shape)
    return TriMesh(v, c.faces)


def gait_translation(t: float, shape: DeformingShape) -> np.ndarray:
    """Rigid fore-aft sway and vertical lift of the whole foot (mm)."""
    phase = 2.0 * np.pi * (t / shape.period)
    return np.array([shape.sway_amplitude * np.sin(phase), 0.0,
                     shape.lift_amplitude * (1.0 - np.cos(phase + 0.3))])


@dataclass(frozen=True)
class VirtualCamera:
    """A depth camera: pose, nominal frame rate and accumulative delay model.

    Frame ``k`` is acquired at ``k / fps + k * delay + jitter_k`` (seconds)
    while the camera's own clock labels it ``k / fps``.
    """

    camera_id: int
    position: tuple
    target: tuple = (0.0, 0.0, 0.0)
    fps: float = 15.0
    delay_per_frame: float = 0.002
    jitter: float = 0.0005
    half_angle_deg: float = 80.0

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.delay_per_frame < 0 or self.jitter < 0:
            raise ValueError("delays must be non-negative")

    def view_direction(self) -> np.ndarray:
        d = np.asarray(self.target, float) - np.asarray(self.position, float)
        return d / np.linalg.norm(d)


def default_cameras(n: int = 6, radius: float = 420.0, delay_per_frame: float = 0.002,
                    jitter: float = 0.0005, fps: float = 15.0, half_angle_deg: float = 80.0):
    """Ring of cameras around the foot: the first half below the sole plane,
    the second half above it, interleaved in azimuth.

    Camera 1 is the timing reference and has no delay.
    """
    cams = []
    n_low = (n + 1) // 2
    for j in range(n):
        low = j < n_low
        slot = j if low else j - n_low
        az = np.deg2rad(360.0 * slot / max(n_low, 1) + (0.0 if low else 180.0 / max(n_low, 1)))
        el = np.deg2rad(-35.0 if low else 35.0)
        pos = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(VirtualCamera(
            camera_id=j + 1, position=tuple(pos), fps=fps,
            delay_per_frame=0.0 if j == 0 else delay_per_frame,
            jitter=0.0 if j == 0 else jitter, half_angle_deg=half_angle_deg))
    return cams


def render_view(mesh: TriMesh, camera: VirtualCamera, noise_sigma: float = 0.0,
                n_points: int = 2000, rng=None, return_provenance: bool = False):
    """Sample ``n_points`` surface points whose outward normal faces the camera.

    Returns an empty cloud when nothing is visible.  With
    ``return_provenance`` also returns (face index, barycentric coordinates).
    """
    rng = np.random.default_rng(rng)
    v, f = mesh.vertices, mesh.faces
    fn = mesh.face_normals()
    area = 0.5 * np.linalg.norm(fn, axis=1)
    normals = fn / np.maximum(2 * area, 1e-300)[:, None]
    centers = v[f].mean(axis=1)
    to_cam = np.asarray(camera.position, float) - centers
    to_cam /= np.linalg.norm(to_cam, axis=1, keepdims=True)
    cos_lim = np.cos(np.deg2rad(camera.half_angle_deg))
    visible = np.einsum("ij,ij->i", normals, to_cam) >= cos_lim - 1e-12
    if not np.any(visible) or n_points <= 0:
        empty = PointCloud.empty()
        return (empty, (np.zeros(0, int), np.zeros((0, 3)))) if return_provenance else empty
    vis_idx = np.flatnonzero(visible)
    w = area[vis_idx] / area[vis_idx].sum()
    face = vis_idx[rng.choice(len(vis_idx), size=n_points, p=w)]
    r1 = np.sqrt(rng.random(n_points))
    r2 = rng.random(n_points)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    pts = np.einsum("ij,ijk->ik", bary, v[f[face]])
    if noise_sigma > 0:
        pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
    cloud = PointCloud(pts)
    return (cloud, (face, bary)) if return_provenance else cloud


@dataclass
class CaptureTruth:
    """Ground truth for a simulated session.

    ``sample_times[cam][k]`` is when frame ``k`` of ``cam`` was really
    acquired; ``reference_frame[cam][k]`` the nearest camera-1 frame.
    """

    fps: float
    n_reference_frames: int
    sample_times: dict = field(default_factory=dict)
    reference_frame: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def offsets(self, cam: int) -> np.ndarray:
        ref = np.asarray(self.reference_frame[cam])
        return ref - np.arange(len(ref))

    def to_dict(self) -> dict:
        return {
            "fps": self.fps,
            "n_reference_frames": self.n_reference_frames,
            "cameras": {
                str(c): {
                    "sample_times": [float(x) for x in self.sample_times[c]],
                    "reference_frame": [int(x) for x in self.reference_frame[c]],
                }
                for c in sorted(self.sample_times)
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> CaptureTruth:
        truth = cls(fps=float(d["fps"]), n_reference_frames=int(d["n_reference_frames"]))
        for c, rec in d["cameras"].items():
            truth.sample_times[int(c)] = np.asarray(rec["sample_times"], float)
            truth.reference_frame[int(c)] = np.asarray(rec["reference_frame"], int)
        return truth


def sample_times(camera: VirtualCamera, n_frames: int, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    k = np.arange(n_frames)
    jit = rng.uniform(-camera.jitter, camera.jitter, n_frames) if camera.jitter > 0 else np.zeros(n_frames)
    delay = np.maximum(k * camera.delay_per_frame + jit, 0.0)
    return k / camera.fps + delay


def simulate_session(shape: DeformingShape | None = None, cameras=None, duration: float = 3.0,
                     noise_sigma: float = 0.3, n_points: int = 2000, seed: int = 42):
    """Simulate every camera over ``duration`` seconds.

    Returns ``(frames, truth)`` where ``frames[cam]`` is the camera's list of
    :class:`Frame` objects in capture order.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    shape = shape or DeformingShape()
    cameras = cameras if cameras is not None else default_cameras()
    ref = cameras[0]
    n_frames = int(round(duration * ref.fps))
    truth = CaptureTruth(fps=ref.fps, n_reference_frames=n_frames)
    frames = {}
    for cam in cameras:
        # independent, reproducible streams per camera
        ss = np.random.SeedSequence([seed, cam.camera_id])
        timing_rng, render_seed = [np.random.default_rng(s) for s in ss.spawn(2)]
        nf = int(round(duration * cam.fps))
        times = sample_times(cam, nf, timing_rng)
        ref_idx = np.clip(np.rint(times * ref.fps), 0, n_frames - 1).astype(int)
        truth.sample_times[cam.camera_id] = times
        truth.reference_frame[cam.camera_id] = ref_idx
        seq, prov = [], []
        for k, t in enumerate(times):
            mesh = shape_at(t, shape)
            cloud, (face, bary) = render_view(mesh, cam, noise_sigma, n_points, render_seed,
                                              return_provenance=True)
            seq.append(Frame(cam.camera_id, k, k / cam.fps, cloud))
            prov.append((face, bary))
        frames[cam.camera_id] = seq
        truth.provenance[cam.camera_id] = prov
    return frames, truth
