"""
Compositing.

Face parsing masks, the teeth enhancement hook, multi-band Laplacian
pyramid blending and paste-back of generated crops into the original frame.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from pyretalk.exceptions import BadShape, NonInvertibleTransform, ShapeMismatch, TooManyLevels
from pyretalk.face_geometry import AlignmentTransform
from pyretalk.providers import (KIND_PARSER, KIND_RESTORATION, EllipseParser, FaceParse, ParsingProvider,
                                RestorationProvider, guarded)

_LOGGER = logging.getLogger(__name__)

TEETH_FEATHER = 5
PARSE_AGREEMENT = 0.5


@dataclass
class Pyramid:
    gaussian: list
    laplacian: list

    @property
    def levels(self) -> int:
        return len(self.laplacian)

    @property
    def residual(self) -> np.ndarray:
        return self.gaussian[-1]


def max_levels(shape) -> int:
    return int(np.floor(np.log2(min(shape[:2]))))


def build_pyramid(image: np.ndarray, levels: int) -> Pyramid:
    """Gaussian levels G_0..G_L (5-tap binomial) and Laplacians L_k = G_k - up(G_k+1)."""
    image = np.asarray(image, dtype=np.float32)
    if levels < 1 or min(image.shape[:2]) < 2 ** levels:
        raise TooManyLevels(f"{levels} levels need at least {2 ** levels} px per side, got {image.shape[:2]}")
    gaussian = [image]
    for _ in range(levels):
        gaussian.append(cv2.pyrDown(gaussian[-1]))
    laplacian = []
    for fine, coarse in zip(gaussian[:-1], gaussian[1:]):
        up = cv2.pyrUp(coarse, dstsize=(fine.shape[1], fine.shape[0]))
        laplacian.append(fine - up.reshape(fine.shape))
    return Pyramid(gaussian, laplacian)


def reconstruct(pyramid: Pyramid) -> np.ndarray:
    image = pyramid.residual
    for band in reversed(pyramid.laplacian):
        image = cv2.pyrUp(image, dstsize=(band.shape[1], band.shape[0])).reshape(band.shape) + band
    return image


def blend(source: np.ndarray, target: np.ndarray, mask: np.ndarray, levels: int = 4) -> np.ndarray:
    """Multi-band blend: mask selects source, (1 - mask) selects target, band by band."""
    source = np.asarray(source, dtype=np.float32)
    target = np.asarray(target, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    if source.shape != target.shape or mask.shape != source.shape[:2]:
        raise ShapeMismatch(f"Source {source.shape}, target {target.shape} and mask {mask.shape} must align")
    pyr_source = build_pyramid(source, levels)
    pyr_target = build_pyramid(target, levels)
    pyr_mask = build_pyramid(mask, levels)

    def mix(weight, a, b):
        if a.ndim == 3:
            weight = weight[..., None]
        return weight * a + (1.0 - weight) * b

    bands = [mix(m, a, b) for m, a, b in zip(pyr_mask.gaussian, pyr_source.laplacian, pyr_target.laplacian)]
    residual = mix(pyr_mask.residual, pyr_source.residual, pyr_target.residual)
    return reconstruct(Pyramid(gaussian=[residual], laplacian=bands))


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a > 0.5, b > 0.5
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def parse_face(frame: np.ndarray, landmarks=None, parser: ParsingProvider = None) -> FaceParse:
    """Soft mask and regions from the parser; a non-default parser is cross-checked against the ellipse."""
    default = EllipseParser()
    parser = parser or default
    parse = guarded(KIND_PARSER, parser.parse, frame, landmarks)
    mask = np.clip(np.asarray(parse.mask, dtype=np.float32), 0.0, 1.0)
    if mask.shape != frame.shape[:2]:
        raise ShapeMismatch(f"Parser mask {mask.shape} doesn't match frame {frame.shape[:2]}")
    if not isinstance(parser, EllipseParser):
        agreement = _iou(mask, default.parse(frame, landmarks).mask)
        if agreement < PARSE_AGREEMENT:
            _LOGGER.warning("Parser '%s' disagrees with the default mask (IoU %.2f)",
                            getattr(parser, 'provider_id', type(parser).__name__), agreement)
    return FaceParse(mask, dict(parse.regions))


def teeth_mask(shape, box, feather: int = TEETH_FEATHER) -> np.ndarray:
    """Feathered box mask that is exactly zero outside the box."""
    height, width = shape[:2]
    x0, y0, x1, y1 = box
    inside = np.zeros((height, width), np.float32)
    inside[y0:y1, x0:x1] = 1.0
    inner = np.zeros_like(inside)
    inner[y0 + feather:y1 - feather, x0 + feather:x1 - feather] = 1.0
    kernel = 2 * feather + 1
    return cv2.GaussianBlur(inner, (kernel, kernel), 0) * inside


def enhance_teeth(frame: np.ndarray, box, restoration: RestorationProvider, feather: int = TEETH_FEATHER):
    """Restore the teeth box and feather it back; pixels outside the box are untouched."""
    frame = np.asarray(frame, dtype=np.float32)
    height, width = frame.shape[:2]
    x0, y0, x1, y1 = (int(v) for v in box)
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, width), min(y1, height)
    if x1 <= x0 or y1 <= y0:
        raise BadShape(f"Teeth region {box} is empty inside a {width}x{height} frame")
    region = frame[y0:y1, x0:x1]
    restored = np.asarray(guarded(KIND_RESTORATION, restoration.restore, region), dtype=np.float32)
    if restored.shape != region.shape:
        restored = cv2.resize(restored, (x1 - x0, y1 - y0), interpolation=cv2.INTER_AREA)
    mask = teeth_mask(frame.shape, (x0, y0, x1, y1), feather)[y0:y1, x0:x1, None]
    out = frame.copy()
    out[y0:y1, x0:x1] = np.where(mask > 0, mask * restored + (1.0 - mask) * region, region)
    return out


def paste_back(original: np.ndarray, crop: np.ndarray, transform, mask: np.ndarray, levels: int = 4):
    """Warp the crop and its mask back into the frame and blend; pixels with zero mask keep the original."""
    matrix = transform.matrix() if isinstance(transform, AlignmentTransform) else np.asarray(transform, float)
    if matrix.shape == (2, 3):
        matrix = np.vstack([matrix, [0.0, 0.0, 1.0]])
    if not np.isfinite(matrix).all() or abs(np.linalg.det(matrix[:2, :2])) < 1e-12:
        raise NonInvertibleTransform("Alignment transform is singular")
    inverse = np.linalg.inv(matrix)[:2]

    dtype = np.asarray(original).dtype
    scale = 255.0 if dtype == np.uint8 else 1.0
    frame = np.asarray(original, dtype=np.float32) / scale
    crop = np.asarray(crop, dtype=np.float32) / (255.0 if np.asarray(crop).dtype == np.uint8 else 1.0)
    height, width = frame.shape[:2]

    warped = cv2.warpAffine(crop, inverse, (width, height), flags=cv2.INTER_LINEAR,
                            borderMode=cv2.BORDER_REPLICATE)
    warped_mask = cv2.warpAffine(np.asarray(mask, np.float32), inverse, (width, height), flags=cv2.INTER_LINEAR,
                                 borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    warped_mask = np.clip(warped_mask, 0.0, 1.0)
    blended = blend(warped, frame, warped_mask, min(levels, max_levels(frame.shape)))
    keep = (warped_mask == 0)[..., None]
    out = np.where(keep, frame, np.clip(blended, 0.0, 1.0))
    if dtype == np.uint8:
        return np.where(keep, original, np.round(out * 255.0)).astype(np.uint8)
    return out.astype(dtype)


def dump_debug(debug_dir, index: int, mask: np.ndarray, pyramid: Pyramid = None):
    """Write the mask and pyramid levels of one frame as PNGs."""
    directory = Path(debug_dir)
    directory.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(directory / f"{index:05d}_mask.png"), np.round(np.clip(mask, 0, 1) * 255).astype(np.uint8))
    if pyramid is not None:
        for level, band in enumerate(pyramid.laplacian):
            scaled = np.clip(band * 0.5 + 0.5, 0, 1) * 255
            cv2.imwrite(str(directory / f"{index:05d}_band{level}.png"), np.round(scaled).astype(np.uint8))
