"""Procedural cartoon faces with smooth pose sweeps and drifting expressions.

Coordinates are normalized to ``[-1, 1]`` (x right, y down) on the same
pixel-center grid the network uses. Each face exports five landmarks:
left eye, right eye, nose tip, left and right mouth corners.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

MIN_SIZE = 32
LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")


@dataclass(frozen=True)
class SyntheticScene:
    # pose at rest
    center: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0
    scale: float = 0.8
    # sinusoidal pose sweep: amplitude, cycles per sequence, phase
    shift_amplitude: tuple[float, float] = (0.08, 0.06)
    rotation_amplitude: float = 0.15
    scale_amplitude: float = 0.04
    cycles: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    phases: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    # expression baselines and random-walk step size
    eye_open: float = 0.8
    mouth_open: float = 0.3
    mouth_curve: float = 0.2
    expression_step: float = 0.08
    # appearance
    background: tuple[float, float, float] = (0.35, 0.45, 0.55)
    skin: tuple[float, float, float] = (0.85, 0.7, 0.55)
    hair: tuple[float, float, float] = (0.25, 0.15, 0.1)
    iris: tuple[float, float, float] = (0.2, 0.35, 0.6)
    mouth: tuple[float, float, float] = (0.6, 0.15, 0.2)
    face_aspect: float = 1.2
    seed: int = 0

    def still(self) -> "SyntheticScene":
        """Same face with every trajectory amplitude set to zero."""
        return replace(self, shift_amplitude=(0.0, 0.0), rotation_amplitude=0.0,
                       scale_amplitude=0.0, expression_step=0.0)


def random_scene(rng: np.random.Generator) -> SyntheticScene:
    def color(lo=0.1, hi=0.9):
        return tuple(float(v) for v in rng.uniform(lo, hi, 3))

    return SyntheticScene(
        center=(float(rng.uniform(-0.08, 0.08)), float(rng.uniform(-0.08, 0.08))),
        rotation=float(rng.uniform(-0.1, 0.1)),
        scale=float(rng.uniform(0.75, 0.9)),
        shift_amplitude=(float(rng.uniform(0.03, 0.12)), float(rng.uniform(0.03, 0.1))),
        rotation_amplitude=float(rng.uniform(0.05, 0.25)),
        scale_amplitude=float(rng.uniform(0.0, 0.06)),
        cycles=tuple(float(v) for v in rng.uniform(0.5, 1.5, 4)),
        phases=tuple(float(v) for v in rng.uniform(0, 2 * np.pi, 4)),
        eye_open=float(rng.uniform(0.5, 1.0)),
        mouth_open=float(rng.uniform(0.1, 0.5)),
        mouth_curve=float(rng.uniform(-0.3, 0.4)),
        expression_step=float(rng.uniform(0.04, 0.12)),
        background=color(0.1, 0.6),
        skin=color(0.45, 0.95),
        hair=color(0.0, 0.5),
        iris=color(0.0, 0.7),
        mouth=color(0.3, 0.8),
        face_aspect=float(rng.uniform(1.1, 1.35)),
        seed=int(rng.integers(2 ** 31)),
    )


@dataclass
class FramePose:
    center: np.ndarray
    rotation: float
    scale: float
    eye_open: float
    mouth_open: float
    mouth_curve: float = field(default=0.0)


def trajectory(scene: SyntheticScene, num_frames: int) -> list[FramePose]:
    t = np.arange(num_frames) / max(num_frames, 1)
    ang = [2 * np.pi * c * t + ph for c, ph in zip(scene.cycles, scene.phases)]
    # sin(phase) is subtracted so every sweep starts from the rest pose
    sweep = [np.sin(a) - np.sin(ph) for a, ph in zip(ang, scene.phases)]
    rng = np.random.default_rng(scene.seed)
    steps = rng.standard_normal((num_frames, 2)) * scene.expression_step
    steps[0] = 0.0
    walk = np.cumsum(steps, axis=0)
    poses = []
    for i in range(num_frames):
        poses.append(FramePose(
            center=np.array([scene.center[0] + scene.shift_amplitude[0] * sweep[0][i],
                             scene.center[1] + scene.shift_amplitude[1] * sweep[1][i]]),
            rotation=scene.rotation + scene.rotation_amplitude * sweep[2][i],
            scale=scene.scale * (1.0 + scene.scale_amplitude * sweep[3][i]),
            eye_open=float(np.clip(scene.eye_open + walk[i, 0], 0.15, 1.0)),
            mouth_open=float(np.clip(scene.mouth_open + walk[i, 1], 0.0, 0.8)),
            mouth_curve=scene.mouth_curve,
        ))
    return poses


# face-local layout, in units of the face scale
_EYE = (0.24, -0.12)
_NOSE = (0.0, 0.12)
_MOUTH = (0.0, 0.42)
_MOUTH_HALF_WIDTH = 0.22


def _to_world(pose: FramePose, local: np.ndarray) -> np.ndarray:
    c, s = np.cos(pose.rotation), np.sin(pose.rotation)
    rot = np.array([[c, -s], [s, c]])
    return pose.center + pose.scale * local @ rot.T


def landmarks(pose: FramePose) -> np.ndarray:
    local = np.array([[-_EYE[0], _EYE[1]], [_EYE[0], _EYE[1]], list(_NOSE),
                      [-_MOUTH_HALF_WIDTH, _MOUTH[1]], [_MOUTH_HALF_WIDTH, _MOUTH[1]]])
    return _to_world(pose, local)


def _coverage(sd: np.ndarray, pixel: float) -> np.ndarray:
    return np.clip(0.5 - sd / pixel, 0.0, 1.0)


def _ellipse_sd(u, v, cx, cy, a, b):
    r = np.sqrt(((u - cx) / a) ** 2 + ((v - cy) / b) ** 2)
    return (r - 1.0) * min(a, b)


def render_frame(scene: SyntheticScene, pose: FramePose, size: int) -> np.ndarray:
    """Render one ``[3, size, size]`` frame with values in [0, 1]."""
    coords = (2.0 * np.arange(size) + 1.0) / size - 1.0
    gx, gy = np.meshgrid(coords, coords)
    # world -> face-local
    c, s = np.cos(pose.rotation), np.sin(pose.rotation)
    dx, dy = gx - pose.center[0], gy - pose.center[1]
    u = (c * dx + s * dy) / pose.scale
    v = (-s * dx + c * dy) / pose.scale
    pixel = 2.0 / size / pose.scale

    bg = np.array(scene.background)[:, None, None]
    shade = 0.85 + 0.15 * (gy[None] + 1.0) / 2.0
    img = bg * shade * np.ones((3, size, size))

    def paint(color, alpha):
        nonlocal img
        col = np.asarray(color, dtype=np.float64)[:, None, None]
        img = img * (1.0 - alpha) + col * alpha

    aspect = scene.face_aspect
    paint(scene.hair, _coverage(_ellipse_sd(u, v, 0.0, -0.25, 0.9, 0.75 * aspect), pixel))
    paint(scene.skin, _coverage(_ellipse_sd(u, v, 0.0, 0.05, 0.78, 0.78 * aspect), pixel))
    ex, ey = _EYE
    eye_h = 0.11 * pose.eye_open + 0.01
    for side in (-1.0, 1.0):
        paint((0.97, 0.97, 0.97), _coverage(_ellipse_sd(u, v, side * ex, ey, 0.15, eye_h), pixel))
        iris_sd = np.maximum(_ellipse_sd(u, v, side * ex, ey, 0.07, 0.07),
                             _ellipse_sd(u, v, side * ex, ey, 0.15, eye_h))
        paint(scene.iris, _coverage(iris_sd, pixel))
    nose_col = tuple(0.8 * np.asarray(scene.skin))
    paint(nose_col, _coverage(_ellipse_sd(u, v, _NOSE[0], _NOSE[1], 0.07, 0.1), pixel))
    # mouth: curved band whose thickness follows the openness
    mx, my = _MOUTH
    w = _MOUTH_HALF_WIDTH
    t = np.clip((u - mx) / w, -1.0, 1.0)
    center_line = my - pose.mouth_curve * 0.12 * (1.0 - t ** 2)
    half = 0.02 + 0.1 * pose.mouth_open * (1.0 - t ** 2)
    band = np.maximum(np.abs(v - center_line) - half, np.abs(u - mx) - w)
    paint(scene.mouth, _coverage(band, pixel))
    return np.clip(img, 0.0, 1.0)


def render_sequence(scene: SyntheticScene, num_frames: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Frames ``[F, 3, size, size]`` and landmark tracks ``[F, 5, 2]``."""
    if size < MIN_SIZE:
        raise ValueError(f"image size must be >= {MIN_SIZE}, got {size}")
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    poses = trajectory(scene, num_frames)
    frames = np.stack([render_frame(scene, p, size) for p in poses])
    marks = np.stack([landmarks(p) for p in poses])
    return frames, marks


def write_dataset(out_dir, sequences: int, frames: int, size: int, seed: int,
                  manifest_name: str = "manifest.txt"):
    """Render ``sequences`` random faces to ``out_dir`` as PPM files plus a manifest.

    Landmark tracks go to ``seqNNN/landmarks.txt`` (one frame per row,
    x/y pairs in normalized coordinates). Returns the manifest path.
    """
    from pathlib import Path

    from .imageio import write_ppm
    from .manifest import write_manifest

    if size < MIN_SIZE:
        raise ValueError(f"image size must be >= {MIN_SIZE}, got {size}")
    if sequences < 1 or frames < 1:
        raise ValueError("need at least one sequence of one frame")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    listing = []
    for s in range(sequences):
        scene = random_scene(rng)
        imgs, marks = render_sequence(scene, frames, size)
        folder = out / f"seq{s:03d}"
        folder.mkdir(exist_ok=True)
        paths = []
        for f, img in enumerate(imgs):
            name = f"frame{f:04d}.ppm"
            write_ppm(folder / name, img)
            paths.append(f"{folder.name}/{name}")
        np.savetxt(folder / "landmarks.txt", marks.reshape(frames, -1), fmt="%.6f")
        listing.append(paths)
    manifest = out / manifest_name
    write_manifest(manifest, listing)
    return manifest
