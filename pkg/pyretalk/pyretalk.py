import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from pyretalk.checkpoint import load_model
from pyretalk.compositing import build_pyramid, dump_debug, enhance_teeth, parse_face, paste_back
from pyretalk.config import PipelineConfig
from pyretalk.dnet import DNet, reenact_video
from pyretalk.enet import ENet
from pyretalk.exceptions import StageFailure
from pyretalk.face_geometry import (CoeffSequence, ExpressionTemplate, LandmarkTrack, estimate_alignment,
                                    interpolate_templates, load_template, replace_expression, smooth_landmarks,
                                    warp_to_crop)
from pyretalk.framepool import FramePool
from pyretalk.layers import frames_to_tensor, resize, tensor_to_frames
from pyretalk.lnet import FRAMES, LNet, InferenceReferences, build_lnet_input
from pyretalk.media_io import WINDOW_COLUMNS, AudioTrack, VideoClip, compute_mel, mel_windows, window_start
from pyretalk.providers import (KIND_COEFFICIENTS, KIND_LANDMARKS, KIND_PARSER, KIND_RESTORATION,
                                ProviderRegistry, guarded)

_LOGGER = logging.getLogger(__name__)

STAGE_CROP_ALIGN = 'crop_align'
STAGE_COEFFICIENTS = 'coefficients'
STAGE_REPLACE_EXPRESSION = 'replace_expression'
STAGE_DNET = 'dnet_reenact'
STAGE_SMOOTH_REALIGN = 'smooth_realign'
STAGE_LNET = 'lnet'
STAGE_ENET = 'enet'
STAGE_TEETH = 'teeth'
STAGE_PASTE_BACK = 'paste_back'

STAGE_ORDER = (STAGE_CROP_ALIGN, STAGE_COEFFICIENTS, STAGE_REPLACE_EXPRESSION, STAGE_DNET, STAGE_SMOOTH_REALIGN,
               STAGE_LNET, STAGE_ENET, STAGE_TEETH, STAGE_PASTE_BACK)

BUILDERS = {
    'dnet': DNet.from_config,
    'lnet': LNet.from_config,
    'enet': ENet.from_config,
}


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    template: str
    stages: list = field(default_factory=list)

    def record(self, stage: str, frames: int, status: str = 'done'):
        self.stages.append({'stage': stage, 'frames': frames, 'status': status})

    @property
    def order(self) -> list:
        return [entry['stage'] for entry in self.stages]

    def as_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True))
        return path


@dataclass
class FaceTrackState:
    landmarks: LandmarkTrack
    transforms: list
    crops: np.ndarray


class Retalk:
    """Audio-driven lip editing of a talking-head video.

    Stages run in a fixed order: crop and align, coefficient extraction,
    expression replacement, D-Net reenactment, landmark smoothing and
    re-alignment, L-Net, E-Net, the teeth hook and paste-back.
    """

    def __init__(self, config: PipelineConfig, registry: ProviderRegistry = None, models: dict = None,
                 pool: FramePool = None):
        self.config = config
        self.registry = registry or ProviderRegistry.from_config(config)
        self.models = dict(models or {})
        self.pool = pool or FramePool()
        self.device = torch.device(config.training['device'])
        self.manifest = None

    @classmethod
    def from_manifest(cls, path, registry: ProviderRegistry = None) -> 'Retalk':
        """Rebuild the pipeline a previous run's manifest describes."""
        manifest = json.loads(Path(path).read_text())
        return cls(PipelineConfig(manifest['config']), registry)

    def required_stages(self) -> list:
        mode = self.config.mode
        return [stage for stage, wanted in (('dnet', mode['use_dnet']), ('lnet', True), ('enet', mode['use_enet']))
                if wanted]

    def load(self, stages=None) -> 'Retalk':
        """Load every needed network from its checkpoint; raises MissingCheckpoint naming the stage."""
        for stage in stages or self.required_stages():
            if stage not in self.models:
                model = load_model(BUILDERS[stage](self.config), self.config.checkpoint_path(stage), stage)
                self.models[stage] = model.to(self.device)
            self.models[stage].eval()
        return self

    def template(self, name: str = None) -> ExpressionTemplate:
        mode = self.config.mode
        base = load_template(name or mode['template'])
        if name is not None or mode['interpolation_ratio'] is None:
            return base
        return interpolate_templates(base, load_template(mode['target_template']), mode['interpolation_ratio'])

    @contextmanager
    def _stage(self, stage: str, frames: int):
        _LOGGER.info("Stage %s on %d frames", stage, frames)
        try:
            yield
        except StageFailure:
            raise
        except Exception as error:
            raise StageFailure(stage, str(error)) from error
        self.manifest.record(stage, frames)

    def _skip(self, stage: str, frames: int):
        _LOGGER.info("Stage %s skipped", stage)
        self.manifest.record(stage, frames, 'skipped')

    def _track(self, frames: np.ndarray, size: int) -> FaceTrackState:
        detector = self.registry.get(KIND_LANDMARKS)
        points = self.pool.map(lambda _, frame: guarded(KIND_LANDMARKS, detector.detect, frame), frames)
        track = LandmarkTrack(np.stack(points))
        return self._align(frames, track, size)

    def _align(self, frames: np.ndarray, track: LandmarkTrack, size: int) -> FaceTrackState:
        transforms = [estimate_alignment(points, size) for points in track.points]
        crops = np.stack(self.pool.map(lambda index, frame: warp_to_crop(frame, transforms[index]), frames))
        return FaceTrackState(track, transforms, crops)

    def _coefficients(self, face: FaceTrackState) -> CoeffSequence:
        provider = self.registry.get(KIND_COEFFICIENTS)
        pairs = [guarded(KIND_COEFFICIENTS, provider.extract, crop, transform.apply(points))
                 for crop, points, transform in zip(face.crops, face.landmarks.points, face.transforms)]
        return CoeffSequence(np.stack([pair[0] for pair in pairs]), np.stack([pair[1] for pair in pairs]))

    def _smooth(self, track: LandmarkTrack) -> LandmarkTrack:
        window = self.config.geometry['smooth_window']
        if len(track) < window:
            _LOGGER.warning("Clip of %d frames is shorter than the smoothing window %d", len(track), window)
            return track
        return smooth_landmarks(track, window, self.config.geometry['smooth_polyorder'])

    @staticmethod
    def realign(crops: np.ndarray, source: list, target: list) -> np.ndarray:
        """Move crops made with the `source` transforms into the frames of the `target` transforms."""
        out = []
        for crop, before, after in zip(crops, source, target):
            matrix = (after.matrix() @ before.inverse())[:2]
            out.append(cv2.warpAffine(crop, matrix, (after.size, after.size), flags=cv2.INTER_LINEAR,
                                      borderMode=cv2.BORDER_REPLICATE))
        return np.stack(out)

    def lip_sync(self, targets: torch.Tensor, references: torch.Tensor, audio: AudioTrack, fps,
                 batch_size: int = 4) -> torch.Tensor:
        """L-Net over 5-frame chunks; the last chunk repeats its final frame. -> (T, 3, 96, 96)."""
        count = len(targets)
        mel = compute_mel(audio)
        needed = window_start(count - 1, fps) + WINDOW_COLUMNS
        if mel.columns < needed:
            _LOGGER.warning("Audio is shorter than the video, padding %d mel columns with silence",
                            needed - mel.columns)
        windows = torch.from_numpy(mel_windows(mel, count, fps)).to(self.device)
        references = references[torch.as_tensor(InferenceReferences().select(count, np.arange(count)))]
        chunks = [np.minimum(np.arange(start, start + FRAMES), count - 1) for start in range(0, count, FRAMES)]
        model = self.models['lnet']
        outputs = []
        with torch.no_grad():
            for begin in range(0, len(chunks), batch_size):
                group = torch.as_tensor(np.stack(chunks[begin:begin + batch_size]))
                inputs = build_lnet_input(targets[group], references[group], windows[group])
                outputs.append(model(inputs))
        out = torch.cat(outputs)
        return torch.cat([out[index, :min(FRAMES, count - index * FRAMES)] for index in range(len(chunks))])

    def enhance(self, low: torch.Tensor, references: torch.Tensor, batch_size: int = 4) -> torch.Tensor:
        model = self.models['enet']
        outputs = []
        with torch.no_grad():
            for start in range(0, len(low), batch_size):
                outputs.append(model(low[start:start + batch_size], references[start:start + batch_size]))
        return torch.cat(outputs)

    def run(self, video: VideoClip, audio: AudioTrack) -> VideoClip:
        """Edit `video` so that its lips follow `audio`."""
        self.load()
        mode = self.config.mode
        sizes = self.config.resolutions
        frames = video.frames
        count = len(video)
        template = self.template()
        self.manifest = RunManifest(self.config.as_dict(), self.config.config_hash(), template.label)

        with self._stage(STAGE_CROP_ALIGN, count):
            raw = self._track(frames, sizes['dnet'])
        with self._stage(STAGE_COEFFICIENTS, count):
            coeffs = self._coefficients(raw)
        with self._stage(STAGE_REPLACE_EXPRESSION, count):
            neutral = replace_expression(coeffs, template)
        if mode['use_dnet']:
            with self._stage(STAGE_DNET, count):
                references = reenact_video(self.models['dnet'], VideoClip(raw.crops, video.fps), neutral,
                                           mode=mode['reenact']).frames
        else:
            self._skip(STAGE_DNET, count)
            references = raw.crops
        with self._stage(STAGE_SMOOTH_REALIGN, count):
            face = self._align(frames, self._smooth(raw.landmarks), sizes['dnet'])
            references = self.realign(references, raw.transforms, face.transforms)
            targets = resize(frames_to_tensor(face.crops, self.device), sizes['lnet'])
            references = resize(frames_to_tensor(references, self.device), sizes['lnet'])
        with self._stage(STAGE_LNET, count):
            low = self.lip_sync(targets, references, audio, video.fps)
        if mode['use_enet']:
            with self._stage(STAGE_ENET, count):
                identity = self._align(frames, face.landmarks, sizes['enet']).crops
                high = self.enhance(low, frames_to_tensor(identity, self.device))
        else:
            self._skip(STAGE_ENET, count)
            high = low
        faces = tensor_to_frames(resize(high, sizes['dnet']))
        with self._stage(STAGE_TEETH, count):
            parser = self.registry.get(KIND_PARSER)
            restoration = self.registry.get(KIND_RESTORATION)
            composited = self.pool.map(lambda index, crop: self._teeth(crop, face, index, parser, restoration),
                                       faces)
        with self._stage(STAGE_PASTE_BACK, count):
            output = self._paste(frames, composited, face.transforms)
        _LOGGER.info("Edited %d frames through %s", count, ' -> '.join(self.manifest.order))
        return VideoClip(np.stack(output), video.fps)

    __call__ = run

    def reenact(self, video: VideoClip, template: str = None) -> VideoClip:
        """Expression editing only: every frame takes the template expression through D-Net."""
        self.load(['dnet'])
        count = len(video)
        target = self.template(template or self.config.mode['target_template'])
        self.manifest = RunManifest(self.config.as_dict(), self.config.config_hash(), target.label)
        with self._stage(STAGE_CROP_ALIGN, count):
            raw = self._track(video.frames, self.config.resolutions['dnet'])
        with self._stage(STAGE_COEFFICIENTS, count):
            coeffs = self._coefficients(raw)
        with self._stage(STAGE_REPLACE_EXPRESSION, count):
            edited = replace_expression(coeffs, target)
        with self._stage(STAGE_DNET, count):
            faces = reenact_video(self.models['dnet'], VideoClip(raw.crops, video.fps), edited,
                                  mode=self.config.mode['reenact']).frames
        with self._stage(STAGE_PASTE_BACK, count):
            parser = self.registry.get(KIND_PARSER)
            composited = [(face.astype(np.float32) / 255.0, parse_face(face, None, parser).mask) for face in faces]
            output = self._paste(video.frames, composited, raw.transforms)
        return VideoClip(np.stack(output), video.fps)

    def _teeth(self, crop: np.ndarray, face: FaceTrackState, index: int, parser, restoration) -> tuple:
        landmarks = face.transforms[index].apply(face.landmarks.points[index])
        parse = parse_face(crop, landmarks, parser)
        image = crop.astype(np.float32) / 255.0
        if parse.teeth_box is not None:
            image = enhance_teeth(image, parse.teeth_box, restoration)
        return image, parse.mask

    def _paste(self, frames: np.ndarray, composited: list, transforms: list) -> list:
        options = self.config.compositing
        levels = options['pyramid_levels']
        output = self.pool.map(
            lambda index, frame: paste_back(frame, composited[index][0], transforms[index], composited[index][1],
                                            levels),
            frames)
        if options['debug_dir']:
            for index, (crop, mask) in enumerate(composited):
                dump_debug(options['debug_dir'], index, mask, build_pyramid(crop, levels))
        return output
