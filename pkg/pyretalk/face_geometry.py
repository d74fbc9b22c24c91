"""Landmark smoothing, face alignment and 3DMM coefficient manipulation."""
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import cv2
import numpy as np
from scipy.signal import savgol_coeffs, savgol_filter

from pyretalk.exceptions import (BadWindow, DegenerateAnchors, DimensionMismatch, NonInvertibleTransform,
                                 RatioOutOfRange)

_LOGGER = logging.getLogger(__name__)

CROP_SIZE = 256

LEFT_EYE = slice(36, 42)
RIGHT_EYE = slice(42, 48)
NOSE_TIP = 30

# Canonical anchors as fractions of the crop size: left eye, right eye, nose tip
CANONICAL_ANCHORS = np.array([[0.35, 0.4], [0.65, 0.4], [0.5, 0.6]])

MIN_ANCHOR_AREA = 1e-3


@dataclass
class LandmarkTrack:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[-1] != 2:
            raise DimensionMismatch(f"Expected (T, K, 2) landmarks, got {self.points.shape}")

    def __len__(self):
        return len(self.points)

    def within(self, shape, slack: float = 0.0) -> bool:
        height, width = shape[:2]
        x, y = self.points[..., 0], self.points[..., 1]
        return bool(np.all((x >= -slack) & (x <= width - 1 + slack) & (y >= -slack) & (y <= height - 1 + slack)))


@dataclass
class AlignmentTransform:
    """Similarity x' = s R(theta) x + t from frame pixels into the crop."""

    scale: float
    rotation: float
    tx: float
    ty: float
    size: int = CROP_SIZE

    def __post_init__(self):
        if not np.isfinite([self.scale, self.rotation, self.tx, self.ty]).all() or self.scale <= 0:
            raise NonInvertibleTransform(f"Transform with scale {self.scale} can't be inverted")

    def matrix(self) -> np.ndarray:
        a = self.scale * np.cos(self.rotation)
        b = self.scale * np.sin(self.rotation)
        return np.array([[a, -b, self.tx], [b, a, self.ty], [0.0, 0.0, 1.0]])

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrix())

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix()[:2, :2].T + self.matrix()[:2, 2]

    def invert(self, points: np.ndarray) -> np.ndarray:
        inverse = self.inverse()
        return np.asarray(points, dtype=np.float64) @ inverse[:2, :2].T + inverse[:2, 2]


@dataclass
class CoeffSequence:
    expression: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        self.expression = np.asarray(self.expression, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.expression.ndim != 2 or self.pose.ndim != 2 or len(self.expression) != len(self.pose):
            raise DimensionMismatch(
                f"Expression {self.expression.shape} and pose {self.pose.shape} must be (T, E) and (T, P)")
        if not (np.isfinite(self.expression).all() and np.isfinite(self.pose).all()):
            raise DimensionMismatch("Coefficients must be finite")

    def __len__(self):
        return len(self.expression)

    def stacked(self) -> np.ndarray:
        """(T, E + P) expression followed by pose."""
        return np.concatenate([self.expression, self.pose], axis=1)

    def windows(self, length: int) -> np.ndarray:
        """(T, length, E + P) centered windows with edge replication."""
        if length % 2 != 1:
            raise BadWindow(f"Coefficient window must be odd, got {length}")
        half = length // 2
        padded = np.pad(self.stacked(), ((half, half), (0, 0)), mode='edge')
        return np.stack([padded[index:index + length] for index in range(len(self))])


@dataclass
class ExpressionTemplate:
    expression: np.ndarray
    label: str = ''
    description: str = field(default='', compare=False)

    def __post_init__(self):
        self.expression = np.asarray(self.expression, dtype=np.float64)
        if self.expression.ndim != 1 or not np.isfinite(self.expression).all():
            raise DimensionMismatch(f"Template must be a finite vector, got shape {self.expression.shape}")


def load_template(name_or_path) -> ExpressionTemplate:
    """Load a bundled template by name ('neutral', 'smile') or a JSON file."""
    path = Path(name_or_path)
    if path.suffix == '.json' or path.exists():
        text = path.read_text()
    else:
        text = resources.files('pyretalk').joinpath('templates', f"{name_or_path}.json").read_text()
    data = json.loads(text)
    return ExpressionTemplate(np.asarray(data['expression']), data.get('label', path.stem),
                              data.get('description', ''))


def save_template(template: ExpressionTemplate, path):
    data = {'label': template.label, 'expression': [float(v) for v in template.expression]}
    if template.description:
        data['description'] = template.description
    Path(path).write_text(json.dumps(data, indent=2))


def smooth_landmarks(track: LandmarkTrack, window: int = 7, polyorder: int = 2) -> LandmarkTrack:
    """Savitzky-Golay filter along time.

    The first and last `window // 2` frames are fit on the truncated one-sided
    window, at a lower degree when that window is too short for `polyorder`.
    """
    if window % 2 != 1 or window < 1:
        raise BadWindow(f"Window must be a positive odd integer, got {window}")
    if not 0 <= polyorder < window:
        raise BadWindow(f"Polyorder {polyorder} must be below window {window}")
    if len(track) < window:
        raise BadWindow(f"Track of {len(track)} frames is shorter than window {window}")
    points = np.asarray(track.points, dtype=np.float64)
    smoothed = savgol_filter(points, window, polyorder, axis=0)
    half = window // 2
    for offset in range(half):
        length = half + 1 + offset
        degree = min(polyorder, length - 1)
        smoothed[offset] = np.tensordot(savgol_coeffs(length, degree, pos=offset, use='dot'),
                                        points[:length], axes=1)
        smoothed[-1 - offset] = np.tensordot(savgol_coeffs(length, degree, pos=half, use='dot'),
                                             points[-length:], axes=1)
    return LandmarkTrack(smoothed)


def anchors(landmarks: np.ndarray) -> np.ndarray:
    """(3, 2) left eye center, right eye center, nose tip."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape[0] <= RIGHT_EYE.stop - 1:
        raise DegenerateAnchors(f"Need 68-point landmarks, got {landmarks.shape[0]}")
    return np.stack([landmarks[LEFT_EYE].mean(axis=0), landmarks[RIGHT_EYE].mean(axis=0), landmarks[NOSE_TIP]])


def estimate_alignment(landmarks: np.ndarray, size: int = CROP_SIZE) -> AlignmentTransform:
    """Least-squares similarity taking the three anchors onto the canonical ones."""
    source = anchors(landmarks)
    (x0, y0), (x1, y1), (x2, y2) = source
    area = 0.5 * abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))
    if not np.isfinite(area) or area < MIN_ANCHOR_AREA:
        raise DegenerateAnchors(f"Anchor triangle area {area:.3g} is degenerate")

    target = CANONICAL_ANCHORS * size
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(source, target):
        rows.append([x, -y, 1.0, 0.0])
        rhs.append(u)
        rows.append([y, x, 0.0, 1.0])
        rhs.append(v)
    (a, b, tx, ty), *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    return AlignmentTransform(float(np.hypot(a, b)), float(np.arctan2(b, a)), float(tx), float(ty), size)


def warp_to_crop(frame: np.ndarray, transform: AlignmentTransform) -> np.ndarray:
    return cv2.warpAffine(frame, transform.matrix()[:2], (transform.size, transform.size),
                          flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def align_face(frame: np.ndarray, landmarks: np.ndarray, size: int = CROP_SIZE) -> tuple:
    """-> (size x size crop, AlignmentTransform)."""
    transform = estimate_alignment(landmarks, size)
    _LOGGER.debug("Aligned face: scale %.3f rotation %.4f", transform.scale, transform.rotation)
    return warp_to_crop(frame, transform), transform


def replace_expression(coeffs: CoeffSequence, template: ExpressionTemplate) -> CoeffSequence:
    if coeffs.expression.shape[1] != template.expression.shape[0]:
        raise DimensionMismatch(
            f"Template has {template.expression.shape[0]} dims, coefficients have {coeffs.expression.shape[1]}")
    expression = np.repeat(template.expression[None, :], len(coeffs), axis=0)
    return CoeffSequence(expression, coeffs.pose.copy())


def interpolate_templates(a: ExpressionTemplate, b: ExpressionTemplate, ratio: float) -> ExpressionTemplate:
    if not 0.0 <= ratio <= 1.0:
        raise RatioOutOfRange(f"Ratio {ratio} outside [0, 1]")
    if a.expression.shape != b.expression.shape:
        raise DimensionMismatch(f"Templates differ in shape: {a.expression.shape} vs {b.expression.shape}")
    return ExpressionTemplate((1.0 - ratio) * a.expression + ratio * b.expression, f"{a.label}:{b.label}@{ratio:g}")


@dataclass
class FaceTrack:
    landmarks: LandmarkTrack
    smoothed: LandmarkTrack
    transforms: list
    crops: np.ndarray

    def __len__(self):
        return len(self.transforms)


def track_faces(frames: np.ndarray, detector, size: int = CROP_SIZE, window: int = 7,
                polyorder: int = 2) -> FaceTrack:
    """Detect, smooth along time and align every frame of a clip.

    Clips shorter than the smoothing window are aligned on raw landmarks.
    """
    from pyretalk.providers import KIND_LANDMARKS, guarded

    raw = LandmarkTrack(np.stack([guarded(KIND_LANDMARKS, detector.detect, frame) for frame in frames]))
    if len(raw) >= window:
        smoothed = smooth_landmarks(raw, window, polyorder)
    else:
        _LOGGER.warning("Clip of %d frames is shorter than the smoothing window %d", len(raw), window)
        smoothed = raw
    transforms = [estimate_alignment(points, size) for points in smoothed.points]
    crops = np.stack([warp_to_crop(frame, transform) for frame, transform in zip(frames, transforms)])
    _LOGGER.debug("Tracked %d frames into %dx%d crops", len(frames), size, size)
    return FaceTrack(raw, smoothed, transforms, crops)
