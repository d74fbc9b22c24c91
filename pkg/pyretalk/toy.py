"""
Toy avatars.

Procedurally rendered talking heads whose mouth aperture is, by
construction, the amplitude envelope of their audio. They stand in for real
talking-head corpora in training smoke runs and directional checks, and come
with landmark and coefficient providers that read the known geometry back.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np

from pyretalk.exceptions import LandmarkFailure, RetalkDataException
from pyretalk.face_geometry import anchors
from pyretalk.media_io import SAMPLE_RATE, AudioTrack, VideoClip
from pyretalk.providers import CoefficientProvider, LandmarkProvider

_LOGGER = logging.getLogger(__name__)

EYE_COLOR = (20, 20, 20)
NOSE_COLOR = (40, 60, 210)
MOUTH_COLOR = (170, 25, 45)

# Face-relative geometry in units of the face radius; v points down
EYE_OFFSET = (0.38, -0.25)
EYE_RADIUS = 0.07
NOSE_OFFSET = 0.257
NOSE_RADIUS = 0.06
MOUTH_OFFSET = 0.58
MOUTH_HALF_WIDTH = 0.35
MOUTH_MAX_HALF_HEIGHT = 0.2
SMILE_WIDENING = 0.3
REFERENCE_RADIUS = 0.32

SHIFT = 4


@dataclass
class AvatarIdentity:
    background: tuple
    skin: tuple
    radius: float
    smile: float
    f0: float
    carrier_phases: tuple
    motion: tuple


@dataclass
class Envelope:
    centers: np.ndarray
    widths: np.ndarray
    heights: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)[..., None]
        bumps = self.heights * np.exp(-(t - self.centers) ** 2 / (2.0 * self.widths ** 2))
        return np.clip(bumps.sum(axis=-1), 0.0, 1.0)


@dataclass
class ToySample:
    clip_id: str
    video: VideoClip
    audio: AudioTrack
    aperture: np.ndarray
    poses: np.ndarray
    identity: AvatarIdentity
    envelope: Envelope

    def __len__(self):
        return len(self.video)


def _rotate(angle: float, u: float, v: float) -> np.ndarray:
    cos, sin = np.cos(angle), np.sin(angle)
    return np.array([cos * u - sin * v, sin * u + cos * v])


def _fixed(point) -> tuple:
    return tuple(int(round(c * (1 << SHIFT))) for c in point)


def render_avatar(identity: AvatarIdentity, aperture: float, pose, size: int) -> np.ndarray:
    """One RGB frame. pose = (dx, dy, angle) in pixels and radians."""
    frame = np.empty((size, size, 3), np.uint8)
    frame[:] = identity.background
    dx, dy, angle = pose
    center = np.array([size / 2 + dx, size / 2 + dy])
    radius = identity.radius * size
    degrees = float(np.degrees(angle))

    def at(u, v):
        return center + _rotate(angle, u * radius, v * radius)

    cv2.circle(frame, _fixed(center), int(round(radius * (1 << SHIFT))), identity.skin, -1, cv2.LINE_AA, SHIFT)
    for side in (-1, 1):
        eye = at(side * EYE_OFFSET[0], EYE_OFFSET[1])
        cv2.circle(frame, _fixed(eye), int(round(EYE_RADIUS * radius * (1 << SHIFT))), EYE_COLOR, -1,
                   cv2.LINE_AA, SHIFT)
    cv2.circle(frame, _fixed(at(0.0, NOSE_OFFSET)), int(round(NOSE_RADIUS * radius * (1 << SHIFT))), NOSE_COLOR,
               -1, cv2.LINE_AA, SHIFT)
    half_width = MOUTH_HALF_WIDTH * (1.0 + SMILE_WIDENING * identity.smile) * radius
    half_height = max(1.0, aperture * MOUTH_MAX_HALF_HEIGHT * radius)
    axes = _fixed((half_width, half_height))
    cv2.ellipse(frame, _fixed(at(0.0, MOUTH_OFFSET)), axes, degrees, 0, 360, MOUTH_COLOR, -1, cv2.LINE_AA, SHIFT)
    return frame


def _identity(rng: np.random.Generator) -> AvatarIdentity:
    background = tuple(int(v) for v in (rng.integers(90, 150), rng.integers(130, 180), rng.integers(100, 150)))
    skin = tuple(int(v) for v in (rng.integers(200, 240), rng.integers(150, 190), rng.integers(120, 160)))
    motion = tuple(float(v) for v in np.concatenate([
        rng.uniform(0.005, 0.03, size=2),
        rng.uniform(0.0, np.radians(6.0), size=1),
        rng.uniform(1.5, 4.0, size=3),
        rng.uniform(0.0, 2 * np.pi, size=3),
    ]))
    return AvatarIdentity(background=background, skin=skin, radius=float(rng.uniform(0.30, 0.34)),
                          smile=float(rng.uniform(0.0, 1.0)), f0=float(rng.uniform(110.0, 220.0)),
                          carrier_phases=tuple(float(p) for p in rng.uniform(0, 2 * np.pi, size=6)),
                          motion=motion)


def _envelope(rng: np.random.Generator, seconds: float) -> Envelope:
    centers = []
    position = 0.15
    while position < seconds - 0.1:
        centers.append(position)
        position += rng.uniform(0.18, 0.35)
    count = len(centers)
    heights = rng.uniform(0.5, 1.0, size=count)
    heights[rng.uniform(size=count) < 0.25] = 0.0
    return Envelope(np.array(centers), rng.uniform(0.03, 0.07, size=count), heights)


def poses_for(identity: AvatarIdentity, times: np.ndarray, size: int) -> np.ndarray:
    """(T, 3) head translation in pixels and roll in radians."""
    amp_x, amp_y, amp_angle, per_x, per_y, per_angle, ph_x, ph_y, ph_angle = identity.motion
    return np.stack([
        amp_x * size * np.sin(2 * np.pi * times / per_x + ph_x),
        amp_y * size * np.sin(2 * np.pi * times / per_y + ph_y),
        amp_angle * np.sin(2 * np.pi * times / per_angle + ph_angle),
    ], axis=1)


def synthesize_audio(identity: AvatarIdentity, envelope: Envelope, seconds: float) -> AudioTrack:
    t = np.arange(int(round(seconds * SAMPLE_RATE))) / SAMPLE_RATE
    carrier = sum(np.sin(2 * np.pi * k * identity.f0 * t + phase) / k
                  for k, phase in enumerate(identity.carrier_phases, start=1))
    carrier /= sum(1.0 / k for k in range(1, len(identity.carrier_phases) + 1))
    return AudioTrack((0.8 * envelope(t) * carrier).astype(np.float32), SAMPLE_RATE)


def render_clip(identity: AvatarIdentity, apertures: np.ndarray, poses: np.ndarray, size: int) -> np.ndarray:
    return np.stack([render_avatar(identity, a, pose, size) for a, pose in zip(apertures, poses)])


def make_toy_sample(seed: int, index: int, seconds: float = 4.0, fps: int = 25, frame_size: int = 256) -> ToySample:
    rng = np.random.default_rng([seed, index])
    identity = _identity(rng)
    envelope = _envelope(rng, seconds)
    frame_times = np.arange(int(round(seconds * fps))) / fps
    aperture = envelope(frame_times)
    poses = poses_for(identity, frame_times, frame_size)
    frames = render_clip(identity, aperture, poses, frame_size)
    return ToySample(clip_id=f"toy-{seed}-{index:03d}", video=VideoClip(frames, fps),
                     audio=synthesize_audio(identity, envelope, seconds), aperture=aperture, poses=poses,
                     identity=identity, envelope=envelope)


def generate_toy_dataset(n_clips: int = 10, seconds: float = 4.0, seed: int = 0, fps: int = 25,
                         frame_size: int = 256) -> list:
    if n_clips < 1:
        raise RetalkDataException(f"Need at least one clip, got {n_clips}")
    samples = [make_toy_sample(seed, index, seconds, fps, frame_size) for index in range(n_clips)]
    _LOGGER.info("Generated %d toy clips (%d frames)", n_clips, sum(len(s) for s in samples))
    return samples


def _digest(sample: ToySample) -> str:
    digest = hashlib.sha256()
    digest.update(sample.video.frames.tobytes())
    digest.update(sample.audio.samples.tobytes())
    return digest.hexdigest()


def save_toy_dataset(samples: list, directory) -> Path:
    """One .npz per clip plus a manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for sample in samples:
        np.savez_compressed(directory / f"{sample.clip_id}.npz", frames=sample.video.frames,
                            audio=sample.audio.samples, aperture=sample.aperture, poses=sample.poses,
                            centers=sample.envelope.centers, widths=sample.envelope.widths,
                            heights=sample.envelope.heights)
        records.append({'clip_id': sample.clip_id, 'fps': str(sample.video.fps), 'frames': len(sample),
                        'identity': asdict(sample.identity), 'sha256': _digest(sample)})
    manifest = directory / 'manifest.json'
    manifest.write_text(json.dumps({'clips': records}, indent=2))
    _LOGGER.info("Saved %d toy clips to '%s'", len(samples), directory)
    return manifest


def load_toy_dataset(directory) -> list:
    directory = Path(directory)
    manifest = json.loads((directory / 'manifest.json').read_text())
    samples = []
    for record in manifest['clips']:
        with np.load(directory / f"{record['clip_id']}.npz") as data:
            identity = record['identity']
            identity = AvatarIdentity(**{key: tuple(value) if isinstance(value, list) else value
                                         for key, value in identity.items()})
            samples.append(ToySample(
                clip_id=record['clip_id'], video=VideoClip(data['frames'], record['fps']),
                audio=AudioTrack(data['audio']), aperture=data['aperture'], poses=data['poses'],
                identity=identity, envelope=Envelope(data['centers'], data['widths'], data['heights'])))
    return samples


def _mask_centroid(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None, 0
    return np.array([xs.mean(), ys.mean()]), len(xs)


def feature_masks(frame: np.ndarray) -> dict:
    frame = np.asarray(frame).astype(np.int16)
    r, g, b = frame[..., 0], frame[..., 1], frame[..., 2]
    return {
        'eyes': (r < 70) & (g < 70) & (b < 70),
        'nose': (b > 150) & (r < 110) & (g < 130),
        'mouth': (r > 120) & (g < 90) & (b < 110),
    }


class ToyLandmarkProvider(LandmarkProvider):
    """Reads 68 landmarks off the colored features of a toy avatar."""

    provider_id = 'toy'

    def __init__(self, landmark_count: int = 68):
        if landmark_count != 68:
            raise LandmarkFailure(f"Toy landmarks come in the 68-point layout, not {landmark_count}")

    def detect(self, frame: np.ndarray) -> np.ndarray:
        masks = feature_masks(frame)
        ys, xs = np.nonzero(masks['eyes'])
        if len(xs) < 2:
            raise LandmarkFailure("No eyes found")
        split = xs.mean()
        left_mask = np.zeros_like(masks['eyes'])
        left_mask[ys[xs < split], xs[xs < split]] = True
        left, left_count = _mask_centroid(left_mask)
        right, right_count = _mask_centroid(masks['eyes'] & ~left_mask)
        nose, _ = _mask_centroid(masks['nose'])
        if left is None or right is None or nose is None:
            raise LandmarkFailure("Eyes or nose missing")

        across = right - left
        eye_distance = np.linalg.norm(across)
        if eye_distance < 1.0:
            raise LandmarkFailure("Eyes coincide")
        u = across / eye_distance
        n = np.array([-u[1], u[0]])
        radius = eye_distance / (2 * EYE_OFFSET[0])
        middle = (left + right) / 2
        center = middle - EYE_OFFSET[1] * radius * n

        ys, xs = np.nonzero(masks['mouth'])
        if len(xs):
            offsets = np.stack([xs, ys], axis=1) - center
            along, down = offsets @ u, offsets @ n
            half_width = (along.max() - along.min()) / 2 + 0.5
            half_height = (down.max() - down.min()) / 2 + 0.5
            mouth = center + (along.max() + along.min()) / 2 * u + (down.max() + down.min()) / 2 * n
        else:
            half_width = MOUTH_HALF_WIDTH * radius
            half_height = 0.0
            mouth = center + MOUTH_OFFSET * radius * n

        eye_radius = np.sqrt(max(left_count, right_count) / np.pi)
        points = np.zeros((68, 2))
        for i in range(17):
            phi = np.pi - np.pi * i / 16
            points[i] = center + radius * (np.cos(phi) * u + np.sin(phi) * n)
        for j in range(5):
            points[17 + j] = left + (j - 2) * 0.06 * radius * u - 0.15 * radius * n
            points[22 + j] = right + (j - 2) * 0.06 * radius * u - 0.15 * radius * n
        for k in range(4):
            points[27 + k] = middle + k / 3 * (nose - middle)
        for j in range(5):
            points[31 + j] = nose + (j - 2) * 0.05 * radius * u + 0.05 * radius * n
        for k in range(6):
            phi = np.pi - k * np.pi / 3
            ring = eye_radius * (np.cos(phi) * u - np.sin(phi) * n)
            points[36 + k] = left + ring
            points[42 + k] = right + ring
        for k in range(7):
            phi = np.pi - np.pi * k / 6
            points[48 + k] = mouth + half_width * np.cos(phi) * u - half_height * np.sin(phi) * n
        for k in range(1, 6):
            phi = np.pi * k / 6
            points[54 + k] = mouth + half_width * np.cos(phi) * u + half_height * np.sin(phi) * n
        for k in range(4):
            phi = np.pi - np.pi * k / 3
            points[60 + k] = mouth + 0.8 * half_width * np.cos(phi) * u - 0.8 * half_height * np.sin(phi) * n
        for k in range(1, 5):
            phi = np.pi * k / 4
            points[63 + k] = mouth + 0.8 * half_width * np.cos(phi) * u + 0.8 * half_height * np.sin(phi) * n
        return points


def _face_frame(landmarks: np.ndarray) -> tuple:
    left, right, _ = anchors(landmarks)
    across = right - left
    u = across / np.linalg.norm(across)
    n = np.array([-u[1], u[0]])
    radius = np.linalg.norm(across) / (2 * EYE_OFFSET[0])
    center = (left + right) / 2 - EYE_OFFSET[1] * radius * n
    return center, u, n, radius


def expression_from_landmarks(landmarks: np.ndarray) -> tuple:
    """(aperture, smile) in [0, 1] from the outer lip contour."""
    center, u, n, radius = _face_frame(landmarks)
    lips = np.asarray(landmarks)[48:60] - center
    half_width = (np.ptp(lips @ u)) / 2
    half_height = (np.ptp(lips @ n)) / 2
    aperture = np.clip((half_height - 1.0) / (MOUTH_MAX_HALF_HEIGHT * radius), 0.0, 1.0)
    smile = np.clip((half_width / (MOUTH_HALF_WIDTH * radius) - 1.0) / SMILE_WIDENING, 0.0, 1.0)
    return float(aperture), float(smile)


class ToyCoefficientProvider(CoefficientProvider):
    """expression[0] = mouth aperture, expression[1] = smile; pose = (0, 0, roll, x, y, log scale)."""

    provider_id = 'toy'

    def __init__(self, expression_dim: int = 64):
        self.expression_dim = expression_dim

    def extract(self, frame: np.ndarray, landmarks: np.ndarray) -> tuple:
        size = frame.shape[0]
        center, u, _, radius = _face_frame(landmarks)
        expression = np.zeros(self.expression_dim)
        expression[:2] = expression_from_landmarks(landmarks)
        pose = np.array([0.0, 0.0, np.arctan2(u[1], u[0]), center[0] / size - 0.5, center[1] / size - 0.5,
                         np.log(radius / (REFERENCE_RADIUS * size))])
        return expression, pose


def measure_aperture(frame: np.ndarray) -> float:
    """Mouth aperture in [0, 1] from the mouth-colored area; 0 when no mouth is visible."""
    masks = feature_masks(frame)
    ys, xs = np.nonzero(masks['mouth'])
    if len(xs) == 0:
        return 0.0
    try:
        _, _, _, radius = _face_frame(ToyLandmarkProvider().detect(frame))
    except LandmarkFailure:
        radius = REFERENCE_RADIUS * frame.shape[0]
    half_width = max((xs.max() - xs.min()) / 2 + 0.5, 1.0)
    half_height = len(xs) / (np.pi * half_width)
    return float(np.clip((half_height - 1.0) / (MOUTH_MAX_HALF_HEIGHT * radius), 0.0, 1.0))
