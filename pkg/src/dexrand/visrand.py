"""Appearance randomization draws, image post-augmentation and pose augmentation.

There is no renderer here: a ``SceneDraw`` is structured data meant for an
external rendering backend. Every array field may carry a leading batch axis
so large Monte-Carlo checks stay vectorized.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dexrand import quat

N_CAMERAS = 3
MIN_LIGHTS, MAX_LIGHTS = 4, 6
CAMERA_POS_MM = 1.5
CAMERA_ROT_DEG = 3.0
CAMERA_FOV_DEG = 1.0
ROBOT_METALLIC = (0.05, 0.25)
ROBOT_GLOSSINESS = (0.0, 1.0)
OBJECT_HUE = 0.01
OBJECT_SV = 0.15
OBJECT_METALLIC = (0.05, 0.15)
OBJECT_GLOSSINESS = (0.05, 0.15)
LIGHT_RELATIVE = (1.0, 5.0)
LIGHT_TOTAL = (0.0, 15.0)
CONTRAST = (0.5, 1.5)
NOISE_FRACTION = 0.1
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class CalibratedColor:
    """Measured object colour in HSV, each component in [0, 1]."""

    hue: float
    saturation: float
    value: float

    def check(self) -> "CalibratedColor":
        for name in ("hue", "saturation", "value"):
            v = getattr(self, name)
            if v is None or not np.isfinite(v) or not 0.0 <= v <= 1.0:
                raise ValueError(f"calibrated {name} must be a number in [0, 1], got {v!r}")
        return self


@dataclass
class SceneDraw:
    """One appearance draw (or a batch of them along a leading axis).

    Units: camera offsets in metres, rotation and field of view in degrees,
    colours and material levels as fractions, light positions as unit
    vectors. Light slots past ``light_count`` hold zeros.
    """

    camera_offset: np.ndarray  # (..., 3 cameras, 3)
    camera_axis: np.ndarray  # (..., 3, 3)
    camera_angle_deg: np.ndarray  # (..., 3)
    camera_fov_deg: np.ndarray  # (..., 3)
    robot_rgb: np.ndarray  # (..., 3)
    robot_metallic: np.ndarray
    robot_glossiness: np.ndarray
    object_hsv: np.ndarray  # (..., 3)
    object_metallic: np.ndarray
    object_glossiness: np.ndarray
    light_count: np.ndarray  # int
    light_position: np.ndarray  # (..., 6, 3)
    light_relative: np.ndarray  # (..., 6)
    light_total: np.ndarray
    light_intensity: np.ndarray  # (..., 6), sums to light_total
    calibrated: CalibratedColor = field(default=None)

    def __len__(self) -> int:
        return int(np.size(self.light_count))

    def item(self, i: int) -> "SceneDraw":
        vals = {k: np.asarray(getattr(self, k))[i] for k in _ARRAY_FIELDS}
        return SceneDraw(**vals, calibrated=self.calibrated)


_ARRAY_FIELDS = ("camera_offset", "camera_axis", "camera_angle_deg", "camera_fov_deg", "robot_rgb", "robot_metallic",
                 "robot_glossiness", "object_hsv", "object_metallic", "object_glossiness", "light_count",
                 "light_position", "light_relative", "light_total", "light_intensity")


def _sv_bounds(c: float) -> tuple[float, float]:
    return max(0.0, c - OBJECT_SV), min(1.0, c + OBJECT_SV)


def sample_scene_draw(calibrated: CalibratedColor | None, rng: np.random.Generator, size: int | None = None) -> SceneDraw:
    """Draw every field uniformly within its range.

    Hue is an offset of at most 0.01 around the calibrated hue and wraps
    around the colour circle; saturation and value offsets are cut at the
    ends of [0, 1].
    """
    if calibrated is None:
        raise ValueError("sample_scene_draw needs calibrated hue, saturation and value")
    calibrated.check()
    n = 1 if size is None else int(size)
    u = rng.uniform

    cam_off = u(-CAMERA_POS_MM, CAMERA_POS_MM, (n, N_CAMERAS, 3)) * 1e-3
    cam_axis = quat.random_axis(rng, (n, N_CAMERAS))
    cam_angle = u(0.0, CAMERA_ROT_DEG, (n, N_CAMERAS))
    cam_fov = u(-CAMERA_FOV_DEG, CAMERA_FOV_DEG, (n, N_CAMERAS))

    robot_rgb = u(0.0, 1.0, (n, 3))
    robot_met = u(*ROBOT_METALLIC, n)
    robot_gloss = u(*ROBOT_GLOSSINESS, n)

    hue = np.mod(calibrated.hue + u(-OBJECT_HUE, OBJECT_HUE, n), 1.0)
    sat = u(*_sv_bounds(calibrated.saturation), n)
    val = u(*_sv_bounds(calibrated.value), n)
    obj_met = u(*OBJECT_METALLIC, n)
    obj_gloss = u(*OBJECT_GLOSSINESS, n)

    count = rng.integers(MIN_LIGHTS, MAX_LIGHTS + 1, n)
    used = np.arange(MAX_LIGHTS)[None, :] < count[:, None]
    pos = quat.random_axis(rng, (n, MAX_LIGHTS))
    pos[..., 2] = np.abs(pos[..., 2])
    rel = u(*LIGHT_RELATIVE, (n, MAX_LIGHTS))
    total = u(*LIGHT_TOTAL, n)
    pos = np.where(used[..., None], pos, 0.0)
    rel = np.where(used, rel, 0.0)
    intensity = rel / rel.sum(axis=1, keepdims=True) * total[:, None]

    draw = SceneDraw(cam_off, cam_axis, cam_angle, cam_fov, robot_rgb, robot_met, robot_gloss,
                     np.stack([hue, sat, val], axis=-1), obj_met, obj_gloss, count, pos, rel, total, intensity,
                     calibrated)
    return draw.item(0) if size is None else draw


def _outside(x, lo, hi) -> np.ndarray:
    x = np.asarray(x)
    bad = ~((x >= lo) & (x <= hi))
    return bad.reshape(bad.shape[0], -1).any(axis=1) if bad.ndim > 1 else bad


def range_violations(draw: SceneDraw) -> dict[str, int]:
    """Count draws per field that fall outside their declared range (batched draws only)."""
    c = draw.calibrated
    used = np.arange(MAX_LIGHTS)[None, :] < draw.light_count[:, None]
    hue_gap = np.abs((draw.object_hsv[:, 0] - c.hue + 0.5) % 1.0 - 0.5)
    axis_norm = np.linalg.norm(draw.camera_axis, axis=-1)
    checks = {
        "camera_offset": _outside(draw.camera_offset, -CAMERA_POS_MM * 1e-3, CAMERA_POS_MM * 1e-3),
        "camera_axis": _outside(np.abs(axis_norm - 1.0), 0.0, 1e-9),
        "camera_angle_deg": _outside(draw.camera_angle_deg, 0.0, CAMERA_ROT_DEG),
        "camera_fov_deg": _outside(draw.camera_fov_deg, -CAMERA_FOV_DEG, CAMERA_FOV_DEG),
        "robot_rgb": _outside(draw.robot_rgb, 0.0, 1.0),
        "robot_metallic": _outside(draw.robot_metallic, *ROBOT_METALLIC),
        "robot_glossiness": _outside(draw.robot_glossiness, *ROBOT_GLOSSINESS),
        "object_hue": _outside(hue_gap, 0.0, OBJECT_HUE + 1e-12),
        "object_saturation": _outside(draw.object_hsv[:, 1], *_sv_bounds(c.saturation)),
        "object_value": _outside(draw.object_hsv[:, 2], *_sv_bounds(c.value)),
        "object_metallic": _outside(draw.object_metallic, *OBJECT_METALLIC),
        "object_glossiness": _outside(draw.object_glossiness, *OBJECT_GLOSSINESS),
        "light_count": _outside(draw.light_count, MIN_LIGHTS, MAX_LIGHTS),
        "light_position": (used & ((np.abs(np.linalg.norm(draw.light_position, axis=-1) - 1.0) > 1e-9)
                                   | (draw.light_position[..., 2] < 0.0))).any(axis=1),
        "light_relative": (used & ((draw.light_relative < LIGHT_RELATIVE[0])
                                   | (draw.light_relative > LIGHT_RELATIVE[1]))).any(axis=1),
        "light_total": _outside(draw.light_total, *LIGHT_TOTAL),
        "light_intensity": np.abs(draw.light_intensity.sum(axis=1) - draw.light_total) > 1e-9 * (1 + draw.light_total),
    }
    return {k: int(np.sum(v)) for k, v in checks.items()}


def draw_record(draw: SceneDraw) -> dict:
    """Structured-text record of a single draw with explicit units."""
    k = int(draw.light_count)

    def fl(x):
        return np.asarray(x, dtype=float).tolist()

    return {
        "cameras": [
            {"offset_m": fl(draw.camera_offset[i]), "rotation_axis": fl(draw.camera_axis[i]),
             "rotation_deg": float(draw.camera_angle_deg[i]), "fov_offset_deg": float(draw.camera_fov_deg[i])}
            for i in range(N_CAMERAS)
        ],
        "robot": {"rgb": fl(draw.robot_rgb), "metallic_fraction": float(draw.robot_metallic),
                  "glossiness_fraction": float(draw.robot_glossiness)},
        "object": {"hsv": fl(draw.object_hsv), "metallic_fraction": float(draw.object_metallic),
                   "glossiness_fraction": float(draw.object_glossiness)},
        "lights": {"count": k, "position_unit": fl(draw.light_position[:k]), "relative": fl(draw.light_relative[:k]),
                   "total_intensity": float(draw.light_total), "intensity": fl(draw.light_intensity[:k])},
        "calibrated_hsv": [draw.calibrated.hue, draw.calibrated.saturation, draw.calibrated.value],
    }


def draw_from_record(rec: dict) -> SceneDraw:
    lights = rec["lights"]
    k = lights["count"]

    def pad(x, shape):
        out = np.zeros(shape)
        out[:k] = np.asarray(x, dtype=float).reshape((k,) + shape[1:])
        return out

    cams = rec["cameras"]
    return SceneDraw(
        camera_offset=np.array([c["offset_m"] for c in cams]),
        camera_axis=np.array([c["rotation_axis"] for c in cams]),
        camera_angle_deg=np.array([c["rotation_deg"] for c in cams]),
        camera_fov_deg=np.array([c["fov_offset_deg"] for c in cams]),
        robot_rgb=np.array(rec["robot"]["rgb"]),
        robot_metallic=np.float64(rec["robot"]["metallic_fraction"]),
        robot_glossiness=np.float64(rec["robot"]["glossiness_fraction"]),
        object_hsv=np.array(rec["object"]["hsv"]),
        object_metallic=np.float64(rec["object"]["metallic_fraction"]),
        object_glossiness=np.float64(rec["object"]["glossiness_fraction"]),
        light_count=np.int64(k),
        light_position=pad(lights["position_unit"], (MAX_LIGHTS, 3)),
        light_relative=pad(lights["relative"], (MAX_LIGHTS,)),
        light_total=np.float64(lights["total_intensity"]),
        light_intensity=pad(lights["intensity"], (MAX_LIGHTS,)),
        calibrated=CalibratedColor(*rec["calibrated_hsv"]),
    )


def write_draws(path, draws: list[SceneDraw]) -> None:
    with open(path, "w") as fh:
        for d in draws:
            fh.write(json.dumps(draw_record(d)) + "\n")


def read_draws(path) -> list[SceneDraw]:
    with open(path) as fh:
        return [draw_from_record(json.loads(line)) for line in fh if line.strip()]


# images ---------------------------------------------------------------------

@dataclass
class ImageBuffer:
    pixels: np.ndarray  # (H, W, 3)
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 3 or self.pixels.size == 0:
            raise ValueError(f"image must be a nonempty H x W x C array, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image contains non-finite values")


@dataclass
class AugmentTrace:
    """Intermediate results of one augment_image call, in pipeline order."""

    normalized: np.ndarray
    contrast_factor: float
    contrasted: np.ndarray
    noise_sigma: float
    output: np.ndarray


def augment_trace(img: ImageBuffer, rng: np.random.Generator, contrast: float | None = None,
                  noise_sigma: float | None = None) -> AugmentTrace:
    """Normalize, randomize contrast, add per-pixel noise; ``contrast``/``noise_sigma`` pin a stage."""
    x = img.pixels
    mean = x.mean()
    centered = x - mean
    std = np.sqrt(np.mean(centered**2))
    normalized = centered / max(std, STD_FLOOR)
    f = rng.uniform(*CONTRAST) if contrast is None else float(contrast)
    mu = normalized.mean()
    contrasted = mu + f * (normalized - mu)
    spread = float(np.ptp(normalized))
    sigma = rng.uniform(0.0, NOISE_FRACTION * spread) if noise_sigma is None else float(noise_sigma)
    out = contrasted + sigma * rng.standard_normal(x.shape) if sigma > 0 else contrasted.copy()
    return AugmentTrace(normalized, f, contrasted, sigma, out)


def augment_image(img: ImageBuffer, rng: np.random.Generator, contrast: float | None = None,
                  noise_sigma: float | None = None) -> ImageBuffer:
    out = augment_trace(img, rng, contrast, noise_sigma).output
    return ImageBuffer(out, (float(out.min()), float(out.max())))


_IMAGE_MAGIC = b"DXIM"
_HEADER = struct.Struct("<4sIIIdd")  # magic, height, width, channels, range low, range high


def write_image(path, img: ImageBuffer) -> None:
    h, w, c = img.pixels.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_IMAGE_MAGIC, h, w, c, *map(float, img.value_range)))
        fh.write(np.ascontiguousarray(img.pixels, dtype="<f8").tobytes())


def read_image(path) -> ImageBuffer:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: file too short for an image header")
    magic, h, w, c, lo, hi = _HEADER.unpack_from(raw)
    if magic != _IMAGE_MAGIC:
        raise ValueError(f"{path}: not an image buffer file")
    body = raw[_HEADER.size:]
    if len(body) != h * w * c * 8:
        raise ValueError(f"{path}: expected {h * w * c} values, found {len(body) // 8}")
    return ImageBuffer(np.frombuffer(body, dtype="<f8").reshape(h, w, c).copy(), (lo, hi))


# pose augmentation ----------------------------------------------------------

@dataclass(frozen=True)
class PoseAugmentConfig:
    p_identity: float = 0.2
    p_flip: float = 0.4
    position_sigma: float = 0.005  # m
    rotation_sigma: float = 0.05  # rad

    def check(self) -> "PoseAugmentConfig":
        if not (0 <= self.p_identity and 0 <= self.p_flip and self.p_identity + self.p_flip <= 1):
            raise ValueError("pose augmentation probabilities must be non-negative and sum to at most 1")
        if self.position_sigma < 0 or self.rotation_sigma < 0:
            raise ValueError("pose jitter sigmas must be non-negative")
        return self


IDENTITY, FLIP, JITTER = 0, 1, 2
_AXES = np.eye(3)


def pose_branch(rng: np.random.Generator, cfg: PoseAugmentConfig = PoseAugmentConfig(), size=None):
    u = rng.random(size)
    return np.where(u < cfg.p_identity, IDENTITY, np.where(u < cfg.p_identity + cfg.p_flip, FLIP, JITTER))


def pose_augment(position, orientation, rng: np.random.Generator, cfg: PoseAugmentConfig = PoseAugmentConfig(),
                 branch: int | None = None):
    """Returns ``(position, orientation, branch)``.

    The quarter turn is composed on the object side, i.e. about one of the
    object's own axes.
    """
    position = np.asarray(position, dtype=float)
    orientation = np.asarray(orientation, dtype=float)
    quat.check_unit(orientation)
    b = int(pose_branch(rng, cfg)) if branch is None else int(branch)
    if b == IDENTITY:
        return position.copy(), orientation.copy(), b
    if b == FLIP:
        axis = _AXES[rng.integers(3)] * (1.0 if rng.random() < 0.5 else -1.0)
        turn = quat.from_axis_angle(axis, np.pi / 2)
        return position.copy(), quat.normalize(quat.mul(orientation, turn)), b
    if b == JITTER:
        pos = position + cfg.position_sigma * rng.standard_normal(3)
        turn = quat.from_axis_angle(quat.random_axis(rng), cfg.rotation_sigma * rng.standard_normal())
        return pos, quat.normalize(quat.mul(turn, orientation)), b
    raise ValueError(f"unknown pose augmentation branch {branch}")
