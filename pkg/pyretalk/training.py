"""
Per-stage trainers.

Every module is trained on its own: the sync expert first, then D-Net in two
phases (mapping and warping, then everything), L-Net against the frozen sync
expert, and E-Net on top of the frozen L-Net. Trainers share the checkpoint
archive, log loss breakdowns every `log_every` steps and resume
deterministically.
"""
import logging
from dataclasses import dataclass

import cv2
import numpy as np
import torch

from pyretalk.checkpoint import Checkpoint, load_checkpoint, load_model, save_checkpoint
from pyretalk.config import STAGES
from pyretalk.dnet import DNet, dnet_loss
from pyretalk.enet import (DegradationConfig, EnhanceBatch, ENet, PatchDiscriminator, build_enhanced_dataset,
                           degrade, enet_objective)
from pyretalk.exceptions import DependencyMissing, EmptyDataset, RetalkConfigException
from pyretalk.face_geometry import CoeffSequence, estimate_alignment, track_faces, warp_to_crop
from pyretalk.layers import frames_to_tensor
from pyretalk.lnet import FRAMES, LNet, TrainingReferences, build_lnet_input, lnet_loss
from pyretalk.media_io import MelSpectrogram, compute_mel, mel_windows
from pyretalk.providers import (KIND_COEFFICIENTS, KIND_DATASET_RESTORATION, KIND_FEATURES, KIND_IDENTITY,
                                KIND_LANDMARKS, ProviderRegistry, guarded)
from pyretalk.sync_expert import SyncNet, lower_face_crops, make_sync_examples, sync_step

_LOGGER = logging.getLogger(__name__)


@dataclass
class PreparedClip:
    clip_id: str
    crops: np.ndarray
    crops_lnet: np.ndarray
    crops_enet: np.ndarray
    lower_faces: torch.Tensor
    coeffs: CoeffSequence
    mel: MelSpectrogram
    mel_windows: torch.Tensor
    fps: object

    def __len__(self):
        return len(self.crops)


def extract_coefficients(track, provider) -> CoeffSequence:
    """Coefficients of every aligned crop, landmarks mapped into crop coordinates."""
    expressions, poses = [], []
    for crop, points, transform in zip(track.crops, track.smoothed.points, track.transforms):
        expression, pose = guarded(KIND_COEFFICIENTS, provider.extract, crop, transform.apply(points))
        expressions.append(expression)
        poses.append(pose)
    return CoeffSequence(np.stack(expressions), np.stack(poses))


def prepare_clip(sample, registry: ProviderRegistry, config) -> PreparedClip:
    """Detect, smooth, align and extract coefficients once per clip, at every stage resolution."""
    geometry = config.geometry
    resolutions = config.resolutions
    frames = sample.video.frames
    track = track_faces(frames, registry.get(KIND_LANDMARKS), resolutions['dnet'],
                        geometry['smooth_window'], geometry['smooth_polyorder'])
    size = resolutions['lnet']
    crops_lnet = np.stack([cv2.resize(crop, (size, size), interpolation=cv2.INTER_AREA) for crop in track.crops])
    crops_enet = np.stack([warp_to_crop(frame, estimate_alignment(points, resolutions['enet']))
                           for frame, points in zip(frames, track.smoothed.points)])
    mel = compute_mel(sample.audio)
    return PreparedClip(
        clip_id=getattr(sample, 'clip_id', ''), crops=track.crops, crops_lnet=crops_lnet, crops_enet=crops_enet,
        lower_faces=lower_face_crops(track.crops),
        coeffs=extract_coefficients(track, registry.get(KIND_COEFFICIENTS)),
        mel=mel, mel_windows=torch.from_numpy(mel_windows(mel, len(frames), sample.video.fps)),
        fps=sample.video.fps)


class Trainer:
    """Shared loop, checkpointing and resume for one stage."""

    stage = None
    requires = ()

    def __init__(self, config, dataset: list, registry: ProviderRegistry = None, checkpoint_path=None):
        if not dataset:
            raise EmptyDataset(f"No clips to train {self.stage} on")
        self.config = config
        self.dataset = dataset
        self.registry = registry or ProviderRegistry.from_config(config)
        self.path = checkpoint_path or config.checkpoint_path(self.stage)
        self.device = torch.device(config.training['device'])
        self.step = 0
        self.history = []
        self._clips = None
        self.check_dependencies()
        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng([config.seed, STAGES.index(self.stage)])
        self.build()

    def check_dependencies(self):
        for dependency in self.requires:
            if not self.config.checkpoint_path(dependency).is_file():
                raise DependencyMissing(self.stage, dependency)

    @property
    def clips(self) -> list:
        if self._clips is None:
            self._clips = [prepare_clip(sample, self.registry, self.config) for sample in self.dataset]
            _LOGGER.info("Prepared %d clips for %s", len(self._clips), self.stage)
        return self._clips

    @property
    def total_iterations(self) -> int:
        raise NotImplementedError

    def build(self):
        raise NotImplementedError

    def modules(self) -> dict:
        raise NotImplementedError

    def optimizers(self) -> dict:
        raise NotImplementedError

    def train_step(self) -> dict:
        raise NotImplementedError

    def pick_clip(self) -> PreparedClip:
        return self.clips[int(self.rng.integers(0, len(self.clips)))]

    def state(self) -> Checkpoint:
        return Checkpoint(
            stage=self.stage, config_hash=self.config.config_hash(), step=self.step,
            params=self.modules()[self.stage].state_dict(),
            optimizers={name: opt.state_dict() for name, opt in self.optimizers().items()},
            rng={'numpy': self.rng.bit_generator.state, 'torch': torch.get_rng_state()},
            history=list(self.history),
            extra={name: module.state_dict() for name, module in self.modules().items() if name != self.stage})

    def restore(self, checkpoint: Checkpoint):
        self.modules()[self.stage].load_state_dict(checkpoint.params)
        for name, module in self.modules().items():
            if name in checkpoint.extra:
                module.load_state_dict(checkpoint.extra[name])
        for name, optimizer in self.optimizers().items():
            if name in checkpoint.optimizers:
                optimizer.load_state_dict(checkpoint.optimizers[name])
        self.rng.bit_generator.state = checkpoint.rng['numpy']
        torch.set_rng_state(checkpoint.rng['torch'])
        self.step = checkpoint.step
        self.history = list(checkpoint.history)
        if checkpoint.config_hash != self.config.config_hash():
            _LOGGER.warning("Resuming %s from a checkpoint written under another config", self.stage)

    def save(self):
        return save_checkpoint(self.path, self.state())

    def fit(self, iterations: int = None, resume: bool = False) -> list:
        """Train up to `iterations` total steps; returns the loss history."""
        if resume and self.path.is_file():
            self.restore(load_checkpoint(self.path, self.stage))
            _LOGGER.info("Resuming %s at step %d", self.stage, self.step)
        total = self.total_iterations if iterations is None else iterations
        log_every = self.config.training['log_every']
        checkpoint_every = self.config.training['checkpoint_every']
        for module in self.modules().values():
            module.train()
        while self.step < total:
            breakdown = self.train_step()
            self.step += 1
            self.history.append(breakdown)
            if self.step % log_every == 0:
                _LOGGER.info("%s step %d: %s", self.stage, self.step,
                             ' '.join(f"{key} {value:.4f}" for key, value in breakdown.items()))
            if self.step % checkpoint_every == 0:
                self.save()
        self.save()
        return self.history


class SyncNetTrainer(Trainer):
    stage = 'syncnet'

    @property
    def total_iterations(self):
        return self.config.sync['iterations']

    def build(self):
        options = self.config.sync
        self.model = SyncNet.from_config(self.config).to(self.device)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=options['lr'])

    def modules(self):
        return {self.stage: self.model}

    def optimizers(self):
        return {'model': self.optimizer}

    def examples(self, clip: PreparedClip, count: int) -> list:
        options = self.config.sync
        return make_sync_examples(clip.lower_faces, clip.mel, clip.fps, self.rng, count,
                                  options['max_offset'], options['negative_min_offset'])

    def train_step(self):
        batch = self.examples(self.pick_clip(), self.config.sync['batch_size'])
        return {'bce': sync_step(self.model, self.optimizer, batch)}

    def accuracy(self, count: int = 200) -> float:
        """In-sync vs offset classification accuracy at probability 0.5."""
        examples = []
        while len(examples) < count:
            examples.extend(self.examples(self.pick_clip(), min(16, count - len(examples))))
        self.model.eval()
        with torch.no_grad():
            faces = torch.stack([example.faces for example in examples]).to(self.device)
            mel = torch.stack([example.mel for example in examples]).to(self.device)
            predicted = (self.model(faces, mel) > 0.5).float().cpu()
        self.model.train()
        labels = torch.tensor([example.label for example in examples])
        return float((predicted == labels).float().mean())


class DNetTrainer(Trainer):
    """Phase one trains mapping and warping on L_Dw; phase two trains all of D-Net on L_Dw + L_De."""

    stage = 'dnet'

    @property
    def total_iterations(self):
        return self.config.dnet['phase1_iterations'] + self.config.dnet['phase2_iterations']

    @property
    def phase(self) -> int:
        return 1 if self.step < self.config.dnet['phase1_iterations'] else 2

    def build(self):
        lr = self.config.dnet['lr']
        self.model = DNet.from_config(self.config).to(self.device)
        self.features = self.registry.get(KIND_FEATURES)
        warp_params = list(self.model.mapping.parameters()) + list(self.model.warping.parameters())
        self.warp_optimizer = torch.optim.Adam(warp_params, lr=lr)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=lr)

    def modules(self):
        return {self.stage: self.model}

    def optimizers(self):
        return {'phase1': self.warp_optimizer, 'phase2': self.optimizer}

    def batch(self) -> tuple:
        sources, targets, windows = [], [], []
        for _ in range(self.config.dnet['batch_size']):
            clip = self.pick_clip()
            source, target = self.rng.integers(0, len(clip), size=2)
            sources.append(clip.crops[source])
            targets.append(clip.crops[target])
            windows.append(clip.coeffs.windows(self.model.window)[target])
        window = torch.as_tensor(np.stack(windows), dtype=torch.float32, device=self.device)
        return (frames_to_tensor(np.stack(sources), self.device), frames_to_tensor(np.stack(targets), self.device),
                window)

    def train_step(self):
        options = self.config.dnet
        source, target, window = self.batch()
        phase = self.phase
        out = self.model(source, window, edit=phase == 2)
        loss_warp, loss_edit, breakdown = dnet_loss(out, target, self.features, options['lambda_c'],
                                                    options['lambda_s'])
        optimizer = self.warp_optimizer if phase == 1 else self.optimizer
        loss = loss_warp if phase == 1 else loss_warp + loss_edit
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        breakdown['phase'] = float(phase)
        return breakdown


class LNetTrainer(Trainer):
    stage = 'lnet'
    requires = ('syncnet',)

    @property
    def total_iterations(self):
        return self.config.lnet['iterations']

    def build(self):
        self.model = LNet.from_config(self.config).to(self.device)
        self.features = self.registry.get(KIND_FEATURES)
        self.sync = load_model(SyncNet.from_config(self.config), self.config.checkpoint_path('syncnet'),
                               'syncnet').to(self.device)
        self.references = TrainingReferences(self.rng)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.config.lnet['lr'])

    def modules(self):
        return {self.stage: self.model}

    def optimizers(self):
        return {'model': self.optimizer}

    def batch(self) -> tuple:
        targets, references, mels = [], [], []
        for _ in range(self.config.lnet['batch_size']):
            clip = self.pick_clip()
            start = int(self.rng.integers(0, len(clip) - FRAMES + 1))
            indices = np.arange(start, start + FRAMES)
            targets.append(frames_to_tensor(clip.crops_lnet[indices]))
            references.append(frames_to_tensor(clip.crops_lnet[self.references.select(len(clip), indices)]))
            mels.append(clip.mel_windows[indices])
        return (torch.stack(targets).to(self.device), torch.stack(references).to(self.device),
                torch.stack(mels).to(self.device))

    def train_step(self):
        options = self.config.lnet
        target, reference, mel = self.batch()
        pred = self.model(build_lnet_input(target, reference, mel))
        loss, breakdown = lnet_loss(pred, target, mel, self.features, self.sync, options['lambda_l1'],
                                    options['lambda_p'], options['lambda_sync'])
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return breakdown


class ENetTrainer(Trainer):
    """E-Net on the frozen L-Net: O_LR = L-Net(degrade(I_HR)), O_HR = E-Net(O_LR, I_HR_ref) against I_GT."""

    stage = 'enet'
    requires = ('lnet',)

    @property
    def total_iterations(self):
        return self.config.enet['iterations']

    def build(self):
        options = self.config.enet
        self.model = ENet.from_config(self.config).to(self.device)
        self.discriminator = PatchDiscriminator(options['disc_channels']).to(self.device)
        self.lnet = load_model(LNet.from_config(self.config), self.config.checkpoint_path('lnet'),
                               'lnet').to(self.device)
        self.features = self.registry.get(KIND_FEATURES)
        self.identity = self.registry.get(KIND_IDENTITY)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=options['lr'])
        self.disc_optimizer = torch.optim.Adam(self.discriminator.parameters(), lr=options['lr'])
        self._targets = {}

    def modules(self):
        return {self.stage: self.model, 'discriminator': self.discriminator}

    def optimizers(self):
        return {'generator': self.optimizer, 'discriminator': self.disc_optimizer}

    def targets(self, clip: PreparedClip) -> np.ndarray:
        """I_GT: the restored high-resolution crops of a clip, built once."""
        if clip.clip_id not in self._targets:
            restoration = self.registry.get(KIND_DATASET_RESTORATION)
            dataset = build_enhanced_dataset(((index, crop, clip.clip_id) for index, crop in enumerate(clip.crops_enet)),
                                             restoration, self.config.resolutions['enet'])
            self._targets[clip.clip_id] = np.stack([entry['image'] for entry in dataset.samples])
        return self._targets[clip.clip_id]

    def batch(self) -> EnhanceBatch:
        low, high = self.config.enet['jpeg_quality']
        degradation = DegradationConfig(jpeg_quality=int(self.rng.integers(low, high + 1)))
        inputs, references, targets, mels = [], [], [], []
        for _ in range(self.config.enet['batch_size']):
            clip = self.pick_clip()
            start = int(self.rng.integers(0, len(clip) - FRAMES + 1))
            indices = np.arange(start, start + FRAMES)
            reference = int(self.rng.integers(0, len(clip)))
            inputs.append(frames_to_tensor(clip.crops_enet[indices]))
            references.append(frames_to_tensor(clip.crops_enet[[reference] * FRAMES]))
            targets.append(torch.from_numpy(self.targets(clip)[indices]).permute(0, 3, 1, 2))
            mels.append(clip.mel_windows[indices])
        i_hr = torch.stack(inputs).to(self.device)
        i_hr_ref = torch.stack(references).to(self.device)
        with torch.no_grad():
            low_target = degrade(i_hr.flatten(0, 1), degradation).unflatten(0, i_hr.shape[:2])
            low_reference = degrade(i_hr_ref.flatten(0, 1), degradation).unflatten(0, i_hr.shape[:2])
            o_lr = self.lnet(build_lnet_input(low_target, low_reference, torch.stack(mels).to(self.device)))
        return EnhanceBatch(i_hr=i_hr.flatten(0, 1), i_hr_ref=i_hr_ref.flatten(0, 1),
                            i_gt=torch.stack(targets).flatten(0, 1).to(self.device), o_lr=o_lr.flatten(0, 1))

    def train_step(self):
        options = self.config.enet
        batch = self.batch()
        batch.o_hr = self.model(batch.o_lr, batch.i_hr_ref)
        generator, critic, breakdown = enet_objective(batch, self.features, self.identity, self.discriminator,
                                                      options['lambda_l1'], options['lambda_p'],
                                                      options['lambda_adv'], options['lambda_id'])
        self.optimizer.zero_grad()
        generator.backward()
        self.optimizer.step()
        self.disc_optimizer.zero_grad()
        critic.backward()
        self.disc_optimizer.step()
        return breakdown


TRAINERS = {
    'syncnet': SyncNetTrainer,
    'dnet': DNetTrainer,
    'lnet': LNetTrainer,
    'enet': ENetTrainer,
}


def trainer_for(stage: str, config, dataset: list, registry: ProviderRegistry = None) -> Trainer:
    if stage not in TRAINERS:
        raise RetalkConfigException(f"Unknown stage '{stage}'")
    return TRAINERS[stage](config, dataset, registry)


def train(stage: str, config, dataset: list, registry: ProviderRegistry = None, iterations: int = None,
          resume: bool = False):
    """Train one stage and return the checkpoint path."""
    trainer = trainer_for(stage, config, dataset, registry)
    trainer.fit(iterations, resume)
    return trainer.path

