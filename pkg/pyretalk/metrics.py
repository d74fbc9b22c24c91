"""
Quality and sync metrics.

FID on provider embeddings, the no-reference CPBD sharpness score, and
evaluate(), which runs a synthesis function over a dataset under the paired
or unpaired protocol and collects a MetricReport.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from pyretalk.exceptions import ClipTooShort, DatasetEmpty, TooFewSamples
from pyretalk.framepool import FramePool
from pyretalk.layers import frames_to_tensor
from pyretalk.media_io import compute_mel
from pyretalk.providers import KIND_FEATURES, FeatureProvider, RandomPyramidFeatures, guarded
from pyretalk.sync_expert import lse_metrics

_LOGGER = logging.getLogger(__name__)

PROTOCOL_PAIRED = 'paired'
PROTOCOL_UNPAIRED = 'unpaired'

BETA = 3.6
BLOCK_SIZE = 64
EDGE_BLOCK_RATIO = 0.002
LOW_CONTRAST = 50
JNB_LOW_CONTRAST = 5
JNB_HIGH_CONTRAST = 3
DETECTION_THRESHOLD = 0.63


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((sigma_a sigma_b)^1/2) as Tr((A^1/2 B A^1/2)^1/2)."""
    root = _psd_sqrt(sigma_a)
    values = np.linalg.eigvalsh(root @ sigma_b @ root)
    return float(np.sqrt(np.clip(values, 0.0, None)).sum())


def frechet_distance(embed_a: np.ndarray, embed_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two (N, D) embedding sets."""
    embed_a = np.asarray(embed_a, dtype=np.float64)
    embed_b = np.asarray(embed_b, dtype=np.float64)
    if len(embed_a) < 2 or len(embed_b) < 2:
        raise TooFewSamples(f"FID needs at least two samples per set, got {len(embed_a)} and {len(embed_b)}")
    mu_a, mu_b = embed_a.mean(axis=0), embed_b.mean(axis=0)
    sigma_a = np.atleast_2d(np.cov(embed_a, rowvar=False))
    sigma_b = np.atleast_2d(np.cov(embed_b, rowvar=False))
    cross = 0.5 * (_trace_sqrt_product(sigma_a, sigma_b) + _trace_sqrt_product(sigma_b, sigma_a))
    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    return max(mean_term + (float(np.trace(sigma_a)) + float(np.trace(sigma_b))) - 2.0 * cross, 0.0)


def embed_images(images, features: FeatureProvider, batch_size: int = 32) -> np.ndarray:
    """uint8 (N, H, W, 3) frames or (N, 3, H, W) tensors in [0, 1] -> (N, D) float64."""
    if not isinstance(images, torch.Tensor):
        images = frames_to_tensor(np.asarray(images))
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            chunks.append(guarded(KIND_FEATURES, features.embed, chunk).double().cpu().numpy())
    return np.concatenate(chunks) if chunks else np.zeros((0, 0))


def fid(set_a, set_b, features: FeatureProvider) -> float:
    if len(set_a) < 2 or len(set_b) < 2:
        raise TooFewSamples(f"FID needs at least two images per set, got {len(set_a)} and {len(set_b)}")
    return frechet_distance(embed_images(set_a, features), embed_images(set_b, features))


def _gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    scaled = image.astype(np.float64) if image.dtype == np.uint8 else np.asarray(image, np.float64) * 255.0
    if scaled.ndim == 3:
        scaled = scaled[..., :3] @ np.array([0.299, 0.587, 0.114])
    return scaled


def _vertical_edges(gray: np.ndarray) -> tuple:
    """Thinned Sobel edges of the horizontal gradient with the 4 x mean(g^2) cutoff."""
    gx = cv2.Sobel(gray, cv2.CV_64F, 1, 0, ksize=3)
    strength = gx ** 2
    cutoff = 4.0 * strength.mean()
    left = np.pad(strength, ((0, 0), (1, 0)))[:, :-1]
    right = np.pad(strength, ((0, 0), (0, 1)))[:, 1:]
    edges = (strength > cutoff) & (strength > left) & (strength >= right)
    return edges, gx


def _edge_width(row: np.ndarray, x: int, rising: bool) -> int:
    """Distance between the local extrema on either side of an edge pixel."""
    sign = 1.0 if rising else -1.0
    left = x
    while left > 0 and sign * (row[left - 1] - row[left]) < 0:
        left -= 1
    right = x
    while right < len(row) - 1 and sign * (row[right + 1] - row[right]) > 0:
        right += 1
    return right - left


def cpbd(image: np.ndarray) -> float:
    """Cumulative probability of blur detection in [0, 1]; 0 when no edge is found."""
    gray = _gray(image)
    edges, gx = _vertical_edges(gray)
    height, width = gray.shape
    threshold = EDGE_BLOCK_RATIO * BLOCK_SIZE * BLOCK_SIZE
    probabilities = []
    for top in range(0, height - BLOCK_SIZE + 1, BLOCK_SIZE):
        for left in range(0, width - BLOCK_SIZE + 1, BLOCK_SIZE):
            block_edges = edges[top:top + BLOCK_SIZE, left:left + BLOCK_SIZE]
            if block_edges.sum() <= threshold:
                continue
            block = gray[top:top + BLOCK_SIZE, left:left + BLOCK_SIZE]
            jnb = JNB_LOW_CONTRAST if np.ptp(block) <= LOW_CONTRAST else JNB_HIGH_CONTRAST
            for dy, dx in zip(*np.nonzero(block_edges)):
                y, x = top + dy, left + dx
                edge_width = _edge_width(gray[y], x, gx[y, x] > 0)
                if edge_width > 0:
                    probabilities.append(1.0 - np.exp(-(edge_width / jnb) ** BETA))
    if not probabilities:
        return 0.0
    return float(np.mean(np.asarray(probabilities) <= DETECTION_THRESHOLD))


@dataclass
class MetricReport:
    fid: float
    cpbd: float
    lse_d: float
    lse_c: float
    config_hash: str
    protocol: str = PROTOCOL_UNPAIRED
    clips: list = field(default_factory=list)
    windows: int = 0

    def headline(self) -> dict:
        return {'fid': self.fid, 'cpbd': self.cpbd, 'lse_d': self.lse_d, 'lse_c': self.lse_c,
                'config_hash': self.config_hash}

    def lse(self) -> dict:
        """The sync part of the report; `windows` counts the scored mel windows over all clips."""
        return {'lse_d': self.lse_d, 'lse_c': self.lse_c, 'windows': self.windows}

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        _LOGGER.info("Wrote metric report to '%s'", path)
        return path


def pair_indices(count: int, protocol: str) -> list:
    """Audio source index per clip; unpaired pairs clip i with clip (i + 1) mod n."""
    if protocol == PROTOCOL_PAIRED:
        return list(range(count))
    if protocol != PROTOCOL_UNPAIRED:
        raise ValueError(f"Unknown protocol '{protocol}'")
    if count < 2:
        raise TooFewSamples("The unpaired protocol needs at least two clips")
    return [(index + 1) % count for index in range(count)]


def _mean(values: list):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate(dataset: list, synthesize, protocol: str = PROTOCOL_UNPAIRED, features: FeatureProvider = None,
             sync_model=None, lower_faces=None, config_hash: str = '', frame_stride: int = 1,
             max_offset: int = 15, pool: FramePool = None) -> MetricReport:
    """Run `synthesize(video, audio) -> video` over the dataset and score the results.

    FID compares full source frames to full output frames; CPBD is the mean over
    output frames. LSE needs `sync_model` and `lower_faces(video) -> (T, 3, 48, 96)`;
    clips too short for the offset scan report None.
    """
    if not dataset:
        raise DatasetEmpty("Nothing to evaluate")
    pool = pool or FramePool()
    sources = pair_indices(len(dataset), protocol)
    real_frames, fake_frames, clips = [], [], []
    for index, (sample, audio_index) in enumerate(zip(dataset, sources)):
        audio = dataset[audio_index].audio
        output = synthesize(sample.video, audio)
        frames = output.frames[::frame_stride]
        sharpness = pool.map(lambda _, frame: cpbd(frame), frames)
        record = {'clip': getattr(sample, 'clip_id', str(index)), 'audio_from': audio_index,
                  'cpbd': float(np.mean(sharpness)), 'lse_d': None, 'lse_c': None, 'windows': 0}
        if sync_model is not None and lower_faces is not None:
            try:
                lse = lse_metrics(sync_model, lower_faces(output), compute_mel(audio), output.fps,
                                  max_offset=max_offset)
                record.update(lse_d=lse.lse_d, lse_c=lse.lse_c, av_offset=lse.av_offset, windows=lse.windows)
            except ClipTooShort as error:
                _LOGGER.warning("Skipping LSE for clip %s: %s", record['clip'], error)
        clips.append(record)
        real_frames.append(sample.video.frames[::frame_stride])
        fake_frames.append(frames)
        _LOGGER.info("Evaluated clip %s (audio from %d)", record['clip'], audio_index)

    features = features or RandomPyramidFeatures()
    report = MetricReport(
        fid=fid(np.concatenate(real_frames), np.concatenate(fake_frames), features),
        cpbd=_mean([clip['cpbd'] for clip in clips]),
        lse_d=_mean([clip['lse_d'] for clip in clips]),
        lse_c=_mean([clip['lse_c'] for clip in clips]),
        config_hash=config_hash, protocol=protocol, clips=clips,
        windows=sum(clip['windows'] for clip in clips))
    _LOGGER.info("FID %.4f CPBD %.4f LSE-D %s LSE-C %s", report.fid, report.cpbd, report.lse_d, report.lse_c)
    return report


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2)
    return float('inf') if mse == 0 else float(10.0 * np.log10(peak ** 2 / mse))
