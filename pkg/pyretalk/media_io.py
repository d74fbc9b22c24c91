"""
Media ingestion.

Decodes video and audio, resamples audio to 16 kHz mono, computes the 80-band
log-mel spectrogram and cuts the 0.2 s mel window that conditions each video
frame.
"""
import logging
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import librosa
import numpy as np
import soundfile

from pyretalk.exceptions import (DecodeFailure, EmptyAudio, MissingStream, OutOfRange,
                                 RetalkMediaException, UnsupportedCodec)

_LOGGER = logging.getLogger(__name__)

SAMPLE_RATE = 16000
N_FFT = 800
HOP = 200
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-5
MEL_FPS = SAMPLE_RATE // HOP
WINDOW_COLUMNS = 16

SILENCE = float(np.log(LOG_FLOOR))


@dataclass
class VideoClip:
    frames: np.ndarray
    fps: Fraction

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or len(self.frames) < 1:
            raise DecodeFailure(f"Expected (T, H, W, 3) frames, got {self.frames.shape}")
        self.fps = Fraction(self.fps).limit_denominator(1001)
        if self.fps <= 0:
            raise DecodeFailure(f"Non-positive frame rate {self.fps}")

    def __len__(self):
        return len(self.frames)

    @property
    def duration(self) -> float:
        return len(self.frames) / float(self.fps)


@dataclass
class AudioTrack:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise DecodeFailure(f"Non-positive sample rate {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DecodeFailure("Audio contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray
    hop: int = HOP
    win: int = N_FFT

    @property
    def columns(self) -> int:
        return self.values.shape[1]


@dataclass
class MelWindow:
    values: np.ndarray
    frame_index: int


def resample_audio(samples: np.ndarray, sample_rate: int) -> AudioTrack:
    """Mix down to mono and resample to 16 kHz.

    Multichannel input may be (channels, N) or (N, channels).
    """
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim == 2:
        if samples.shape[0] > samples.shape[1]:
            samples = samples.T
        samples = librosa.to_mono(samples)
    if sample_rate != SAMPLE_RATE and len(samples):
        samples = librosa.resample(samples, orig_sr=sample_rate, target_sr=SAMPLE_RATE)
    return AudioTrack(np.clip(samples, -1.0, 1.0), SAMPLE_RATE)


def _classify(path, error) -> RetalkMediaException:
    message = f"Couldn't decode '{path}': {error}"
    if 'codec' in str(error).lower():
        return UnsupportedCodec(message)
    return DecodeFailure(message)


def load_media(path, require_audio: bool = True) -> tuple:
    """Decode a container into (VideoClip, AudioTrack).

    The audio track is None when absent and `require_audio` is False.
    """
    from moviepy.editor import VideoFileClip

    path = Path(path)
    if not path.exists():
        raise DecodeFailure(f"No such file '{path}'")

    try:
        clip = VideoFileClip(str(path))
    except (OSError, KeyError, ValueError) as error:
        raise _classify(path, error) from error

    try:
        if clip.fps is None or clip.size is None:
            raise MissingStream(f"'{path}' has no video stream")
        frames = [frame for frame in clip.iter_frames(dtype='uint8')]
        if not frames:
            raise DecodeFailure(f"'{path}' decoded to zero frames")
        video = VideoClip(np.stack(frames), Fraction(clip.fps))
        has_audio = clip.audio is not None
    finally:
        clip.close()

    audio = None
    if has_audio:
        try:
            samples, _ = librosa.load(str(path), sr=SAMPLE_RATE, mono=True)
        except Exception as error:
            raise _classify(path, error) from error
        audio = AudioTrack(samples, SAMPLE_RATE)
    elif require_audio:
        raise MissingStream(f"'{path}' has no audio stream")

    _LOGGER.info("Loaded '%s': %d frames at %s fps, %s audio samples",
                 path, len(video), video.fps, len(audio) if audio is not None else 'no')
    return video, audio


AUDIO_SUFFIXES = ('.wav', '.flac', '.mp3', '.ogg', '.m4a')


def load_audio(path) -> AudioTrack:
    """Driving audio from an audio file, or from the audio stream of a video container."""
    path = Path(path)
    if not path.exists():
        raise DecodeFailure(f"No such file '{path}'")
    if path.suffix.lower() not in AUDIO_SUFFIXES:
        return load_media(path)[1]
    try:
        samples, _ = librosa.load(str(path), sr=SAMPLE_RATE, mono=True)
    except Exception as error:
        raise _classify(path, error) from error
    if not len(samples):
        raise EmptyAudio(f"'{path}' holds no samples")
    return AudioTrack(samples, SAMPLE_RATE)


def write_media(path, video: VideoClip, audio: AudioTrack = None):
    """Encode frames (and optional audio) to a container, or audio alone to .wav."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == '.wav':
        soundfile.write(str(path), audio.samples, audio.sample_rate)
        return path

    from moviepy.audio.AudioClip import AudioArrayClip
    from moviepy.editor import ImageSequenceClip

    clip = ImageSequenceClip(list(video.frames), fps=float(video.fps))
    audio_codec = None
    if audio is not None:
        stereo = np.repeat(audio.samples[:, None], 2, axis=1)
        clip = clip.set_audio(AudioArrayClip(stereo, fps=audio.sample_rate))
        audio_codec = 'aac'
    clip.write_videofile(str(path), fps=float(video.fps), codec='libx264', audio_codec=audio_codec, logger=None)
    _LOGGER.info("Wrote '%s'", path)
    return path


@lru_cache(maxsize=1)
def _mel_basis() -> np.ndarray:
    return librosa.filters.mel(sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS, fmin=FMIN, fmax=FMAX)


def mel_basis() -> np.ndarray:
    """(80, N_FFT // 2 + 1) mel filterbank."""
    return _mel_basis().copy()


def compute_mel(audio: AudioTrack) -> MelSpectrogram:
    """80 x (N // 200 + 1) log-mel magnitudes with centered framing."""
    if audio.sample_rate != SAMPLE_RATE:
        raise RetalkMediaException(f"Expected {SAMPLE_RATE} Hz audio, got {audio.sample_rate}")
    samples = np.asarray(audio.samples, dtype=np.float32)
    if samples.ndim != 1 or len(samples) == 0:
        raise EmptyAudio(f"Need a non-empty mono track, got shape {samples.shape}")

    pad = N_FFT // 2
    # reflect needs more samples than the pad width
    padded = np.pad(samples, pad, mode='reflect' if len(samples) > pad else 'constant')
    spectrum = np.abs(librosa.stft(padded, n_fft=N_FFT, hop_length=HOP, win_length=N_FFT,
                                   window='hann', center=False))
    mel = _mel_basis() @ spectrum
    values = np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)
    return MelSpectrogram(values)


def window_start(frame_index: int, fps) -> int:
    return int(Fraction(frame_index) * MEL_FPS // Fraction(fps).limit_denominator(1001))


def mel_window(mel: MelSpectrogram, frame_index: int, fps) -> MelWindow:
    if frame_index < 0:
        raise OutOfRange(f"Negative frame index {frame_index}")
    start = window_start(frame_index, fps)
    if start + WINDOW_COLUMNS > mel.columns:
        raise OutOfRange(f"Frame {frame_index} needs mel columns [{start}, {start + WINDOW_COLUMNS}) "
                         f"of {mel.columns}")
    return MelWindow(mel.values[:, start:start + WINDOW_COLUMNS], frame_index)


def pad_mel(mel: MelSpectrogram, columns: int) -> MelSpectrogram:
    """Extend with silence columns up to `columns`."""
    missing = columns - mel.columns
    if missing <= 0:
        return mel
    values = np.pad(mel.values, ((0, 0), (0, missing)), constant_values=SILENCE)
    return MelSpectrogram(values, mel.hop, mel.win)


def mel_windows(mel: MelSpectrogram, frame_count: int, fps) -> np.ndarray:
    """(frame_count, 80, 16) windows, silence-padded past the end of the audio."""
    needed = window_start(frame_count - 1, fps) + WINDOW_COLUMNS
    mel = pad_mel(mel, needed)
    return np.stack([mel_window(mel, index, fps).values for index in range(frame_count)])


def write_mel_fixture(path, mel: MelSpectrogram):
    rows, cols = mel.values.shape
    with open(path, 'wb') as fh:
        fh.write(np.array([rows, cols], dtype='<u4').tobytes())
        fh.write(np.ascontiguousarray(mel.values, dtype='<f4').tobytes())


def read_mel_fixture(path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    rows, cols = np.frombuffer(raw[:8], dtype='<u4')
    values = np.frombuffer(raw[8:], dtype='<f4')
    if values.size != rows * cols:
        raise DecodeFailure(f"Mel fixture '{path}' holds {values.size} values, header says {rows}x{cols}")
    return MelSpectrogram(values.reshape(int(rows), int(cols)).astype(np.float32))
