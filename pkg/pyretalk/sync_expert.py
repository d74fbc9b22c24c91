"""
Lip-sync expert.

A SyncNet-style pair of embedders for five lower-half face crops and the
matching 0.2 s mel window, the cosine sync probability and its -log loss,
contrastive training, and the LSE-D / LSE-C offset-scan metrics.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from pyretalk.exceptions import BadShape, ClipTooShort, EmptyDataset, ZeroVector
from pyretalk.layers import AudioEncoder, ConvBNAct, frames_to_tensor, resize
from pyretalk.media_io import MelSpectrogram, mel_windows

_LOGGER = logging.getLogger(__name__)

EPS = 1e-7
ZERO_NORM = 1e-12
FRAMES = 5
FACE_SHAPE = (3 * FRAMES, 48, 96)
MEL_SHAPE = (80, 16)


class FaceEncoder(nn.Module):
    def __init__(self, embed_dim: int = 512, base: int = 32):
        super().__init__()
        c = base
        self.blocks = nn.Sequential(
            ConvBNAct(FACE_SHAPE[0], c, kernel_size=7, padding=3),
            ConvBNAct(c, 2 * c, stride=(1, 2)),
            ConvBNAct(2 * c, 2 * c, residual=True),
            ConvBNAct(2 * c, 4 * c, stride=2),
            ConvBNAct(4 * c, 4 * c, residual=True),
            ConvBNAct(4 * c, 8 * c, stride=2),
            ConvBNAct(8 * c, 8 * c, residual=True),
            ConvBNAct(8 * c, 16 * c, stride=2),
            ConvBNAct(16 * c, 16 * c, stride=2),
            ConvBNAct(16 * c, embed_dim, padding=0),
        )
        self.head = nn.Conv2d(embed_dim, embed_dim, kernel_size=1)

    def forward(self, faces):
        return self.head(self.blocks(faces)).flatten(1)


class SyncNet(nn.Module):
    def __init__(self, embed_dim: int = 512, base_channels: int = 32):
        super().__init__()
        self.face_encoder = FaceEncoder(embed_dim, base_channels)
        self.audio_encoder = AudioEncoder(embed_dim, base_channels)

    @classmethod
    def from_config(cls, config) -> 'SyncNet':
        return cls(config.sync['embed_dim'], config.sync['base_channels'])

    def embed_video(self, faces: torch.Tensor) -> torch.Tensor:
        """(B, 15, 48, 96) or (B, 5, 3, 48, 96) lower-half crops -> (B, D)."""
        if faces.ndim == 5:
            faces = faces.flatten(1, 2)
        if faces.ndim != 4 or tuple(faces.shape[1:]) != FACE_SHAPE:
            raise BadShape(f"Expected five 3x48x96 lower-half crops, got {tuple(faces.shape)}")
        return self.face_encoder(faces)

    def embed_audio(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, 80, 16) or (B, 1, 80, 16) -> (B, D)."""
        if mel.ndim == 3:
            mel = mel.unsqueeze(1)
        if mel.ndim != 4 or tuple(mel.shape[1:]) != (1,) + MEL_SHAPE:
            raise BadShape(f"Expected (B, 80, 16) mel windows, got {tuple(mel.shape)}")
        return self.audio_encoder(mel)

    def forward(self, faces, mel):
        return sync_probability(self.embed_video(faces), self.embed_audio(mel))


def sync_probability(v: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """clamp(v.a / max(|v||a|, eps), eps, 1) per row."""
    v_norm = torch.linalg.vector_norm(v, dim=-1)
    a_norm = torch.linalg.vector_norm(a, dim=-1)
    if torch.any((v_norm < ZERO_NORM) & (a_norm < ZERO_NORM)):
        raise ZeroVector("Both sync embeddings have zero norm")
    cosine = (v * a).sum(dim=-1) / torch.clamp(v_norm * a_norm, min=EPS)
    return cosine.clamp(EPS, 1.0)


def sync_loss(v: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Batch mean of -log P_sync."""
    return -torch.log(sync_probability(v, a)).mean()


@dataclass
class SyncExample:
    faces: torch.Tensor
    mel: torch.Tensor
    label: float


def make_sync_examples(lower_faces: torch.Tensor, mel: MelSpectrogram, fps, rng: np.random.Generator,
                       count: int, max_offset: int = 15, negative_min_offset: int = 5) -> list:
    """Half in-sync, half offset windows from one clip.

    lower_faces: (T, 3, 48, 96). Negatives pair video at t with audio at t + o,
    negative_min_offset <= |o| <= max_offset.
    """
    length = len(lower_faces)
    if length < FRAMES + negative_min_offset:
        raise ClipTooShort(f"Clip of {length} frames is too short for sync examples")
    windows = torch.from_numpy(mel_windows(mel, length, fps))
    last = length - FRAMES
    examples = []
    for index in range(count):
        start = int(rng.integers(0, last + 1))
        label = 1.0 if index % 2 == 0 else 0.0
        audio_start = start
        if not label:
            candidates = [start + o for o in range(-max_offset, max_offset + 1)
                          if abs(o) >= negative_min_offset and 0 <= start + o <= last]
            audio_start = int(rng.choice(candidates))
        examples.append(SyncExample(lower_faces[start:start + FRAMES].flatten(0, 1), windows[audio_start], label))
    return examples


def sync_step(model: SyncNet, optimizer, batch: list) -> float:
    faces = torch.stack([example.faces for example in batch])
    mel = torch.stack([example.mel for example in batch])
    labels = torch.tensor([example.label for example in batch], dtype=faces.dtype)
    device = next(model.parameters()).device
    probability = model(faces.to(device), mel.to(device))
    loss = F.binary_cross_entropy(probability, labels.to(device))
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss)


def train_syncnet(model: SyncNet, dataset: list, iterations: int, lr: float = 1e-4, batch_size: int = 16,
                  seed: int = 0, log_every: int = 100) -> list:
    """Binary cross-entropy on P_sync; returns the per-iteration loss history."""
    if not dataset:
        raise EmptyDataset("SyncNet training needs at least one example")
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    history = []
    for iteration in range(1, iterations + 1):
        picks = rng.integers(0, len(dataset), size=min(batch_size, len(dataset)))
        history.append(sync_step(model, optimizer, [dataset[i] for i in picks]))
        if iteration % log_every == 0:
            _LOGGER.info("syncnet iteration %d: bce %.4f", iteration, history[-1])
    return history


@dataclass
class LSEResult:
    lse_d: float
    lse_c: float
    av_offset: int
    min_dist: float
    windows: int

    def as_dict(self) -> dict:
        return {'lse_d': self.lse_d, 'lse_c': self.lse_c, 'av_offset': self.av_offset,
                'min_dist': self.min_dist, 'windows': self.windows}


def lse_metrics(model: SyncNet, lower_faces: torch.Tensor, mel: MelSpectrogram, fps, stride: int = 1,
                max_offset: int = 15, batch_size: int = 64) -> LSEResult:
    """Offset-scan sync metrics on L2-normalized embeddings.

    For every window position t the distances d_t(o) = |v_t - a_{t+o}| are
    taken over o in [-max_offset, max_offset]. LSE-D is the mean of d_t(0),
    LSE-C the mean of median_o d_t(o) - min_o d_t(o).
    """
    length = len(lower_faces)
    if length < FRAMES + 2 * max_offset:
        raise ClipTooShort(f"LSE needs at least {FRAMES + 2 * max_offset} frames, got {length}")
    windows = torch.from_numpy(mel_windows(mel, length, fps))
    starts = list(range(0, length - FRAMES + 1))
    positions = list(range(max_offset, length - FRAMES - max_offset + 1, stride))

    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    with torch.no_grad():
        video = []
        audio = []
        for begin in range(0, len(starts), batch_size):
            chunk = starts[begin:begin + batch_size]
            faces = torch.stack([lower_faces[s:s + FRAMES].flatten(0, 1) for s in chunk]).to(device)
            video.append(F.normalize(model.embed_video(faces), dim=1))
            audio.append(F.normalize(model.embed_audio(windows[chunk].to(device)), dim=1))
        video = torch.cat(video).double()
        audio = torch.cat(audio).double()
    model.train(was_training)

    offsets = torch.arange(-max_offset, max_offset + 1)
    distances = torch.stack([
        torch.linalg.vector_norm(video[t] - audio[t + offsets], dim=1) for t in positions])
    aligned = distances[:, max_offset]
    confidence = distances.median(dim=1).values - distances.min(dim=1).values
    curve = distances.mean(dim=0)
    result = LSEResult(lse_d=float(aligned.mean()), lse_c=float(confidence.mean()),
                       av_offset=int(offsets[int(curve.argmin())]), min_dist=float(curve.min()),
                       windows=len(positions))
    _LOGGER.debug("LSE over %d windows: D %.4f C %.4f", result.windows, result.lse_d, result.lse_c)
    return result


def lower_face_crops(crops: np.ndarray) -> torch.Tensor:
    """Aligned uint8 face crops (T, S, S, 3) -> lower halves at 96 px, (T, 3, 48, 96)."""
    faces = resize(frames_to_tensor(crops), FACE_SHAPE[2])
    return faces[..., FACE_SHAPE[2] // 2:, :]
