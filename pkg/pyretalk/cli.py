"""The `retalk` command line."""
import argparse
import json
import logging
import sys
from pathlib import Path

from pyretalk.checkpoint import load_model
from pyretalk.config import PRESETS, REENACT_ONE_SHOT, REENACT_VIDEO_TO_VIDEO, PipelineConfig
from pyretalk.exceptions import RetalkException
from pyretalk.face_geometry import track_faces
from pyretalk.media_io import load_audio, load_media, write_media
from pyretalk.metrics import PROTOCOL_PAIRED, PROTOCOL_UNPAIRED, evaluate
from pyretalk.providers import KIND_FEATURES, KIND_LANDMARKS
from pyretalk.pyretalk import Retalk
from pyretalk.sync_expert import SyncNet, lower_face_crops
from pyretalk.toy import generate_toy_dataset, load_toy_dataset, save_toy_dataset
from pyretalk.training import train

_LOGGER = logging.getLogger(__name__)

METRICS_ALL = 'all'
METRICS_LSE = 'lse'

ABLATIONS = {
    'L': {'use_dnet': False, 'use_enet': False},
    'L+E': {'use_dnet': False, 'use_enet': True},
    'L+E+D': {'use_dnet': True, 'use_enet': True},
}


def load_config(args) -> PipelineConfig:
    if args.config:
        config = PipelineConfig.load(args.config, args.preset)
        return config if args.seed is None else config.replace(seed=args.seed)
    return PipelineConfig.from_preset(args.preset, seed=args.seed or 0)


def load_dataset(config: PipelineConfig, data=None) -> list:
    if data:
        return load_toy_dataset(data)
    toy = config.toy
    return generate_toy_dataset(toy['clips'], toy['seconds'], config.seed, toy['fps'], toy['frame_size'])


def _mode_overrides(args) -> dict:
    mode = {}
    if getattr(args, 'template', None):
        mode['template'] = args.template
    if getattr(args, 'ratio', None) is not None:
        mode['interpolation_ratio'] = args.ratio
    if getattr(args, 'no_dnet', False):
        mode['use_dnet'] = False
    if getattr(args, 'no_enet', False):
        mode['use_enet'] = False
    return mode


def cmd_infer(args, config: PipelineConfig, use_dnet: bool = True):
    mode = _mode_overrides(args)
    if not use_dnet:
        mode['use_dnet'] = False
    if mode:
        config = config.replace(mode=mode)
    video, _ = load_media(args.video, require_audio=False)
    audio = load_audio(args.audio)
    pipeline = Retalk(config)
    edited = pipeline.run(video, audio)
    write_media(args.output, edited, audio)
    if args.manifest:
        pipeline.manifest.save(args.manifest)
    _LOGGER.info("Wrote '%s'", args.output)


def cmd_lipsync(args, config: PipelineConfig):
    cmd_infer(args, config, use_dnet=False)


def cmd_reenact(args, config: PipelineConfig):
    if args.mode:
        config = config.replace(mode={'reenact': args.mode})
    video, audio = load_media(args.video, require_audio=False)
    edited = Retalk(config).reenact(video, args.template)
    write_media(args.output, edited, audio)
    _LOGGER.info("Wrote '%s'", args.output)


def cmd_train(args, config: PipelineConfig):
    if getattr(args, 'lnet_checkpoint', None):
        config = config.replace(checkpoints={'lnet': args.lnet_checkpoint})
    dataset = load_dataset(config, args.data)
    path = train(args.stage, config, dataset, iterations=args.iterations, resume=args.resume)
    print(path)


def cmd_make_toy_data(args, config: PipelineConfig):
    toy = config.toy
    clips = args.clips or toy['clips']
    seconds = args.seconds or toy['seconds']
    dataset = generate_toy_dataset(clips, seconds, config.seed, toy['fps'], toy['frame_size'])
    print(save_toy_dataset(dataset, args.output))


def _evaluate(config: PipelineConfig, dataset: list, protocol: str, stride: int):
    pipeline = Retalk(config).load()
    sync = load_model(SyncNet.from_config(config), config.checkpoint_path('syncnet'), 'syncnet')
    geometry = config.geometry
    detector = pipeline.registry.get(KIND_LANDMARKS)

    def lower_faces(video):
        track = track_faces(video.frames, detector, config.resolutions['dnet'], geometry['smooth_window'],
                            geometry['smooth_polyorder'])
        return lower_face_crops(track.crops)

    return evaluate(dataset, pipeline, protocol, pipeline.registry.get(KIND_FEATURES), sync, lower_faces,
                    config.config_hash(), stride, config.sync['max_offset'], pipeline.pool)


def cmd_eval(args, config: PipelineConfig):
    dataset = load_dataset(config, args.data)
    report_path = Path(args.report)
    if args.ablation:
        runs = {name: config.replace(mode=mode) for name, mode in ABLATIONS.items()}
    elif args.template_sweep:
        runs = {f"ratio-{ratio:g}": config.replace(mode={'interpolation_ratio': ratio})
                for ratio in args.template_sweep}
    else:
        runs = {None: config}
    summary = {}
    for name, run_config in runs.items():
        report = _evaluate(run_config, dataset, args.protocol, args.stride)
        path = report_path if name is None else report_path.with_name(f"{report_path.stem}-{name}.json")
        if args.metrics == METRICS_LSE:
            path.write_text(json.dumps(report.lse(), indent=2, sort_keys=True))
            summary[name or 'report'] = report.lse()
        else:
            report.save(path)
            summary[name or 'report'] = report.headline()
    print(json.dumps(summary, indent=2, sort_keys=True))


def _ratios(value: str) -> list:
    try:
        return [float(part) for part in value.split(',') if part.strip()]
    except ValueError as error:
        raise argparse.ArgumentTypeError(f"Expected comma separated ratios, got '{value}'") from error


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='retalk', description="Audio-driven lip editing of talking-head videos")
    parser.add_argument('--config', help="JSON or TOML config merged over the preset")
    parser.add_argument('--preset', default='toy', choices=sorted(PRESETS))
    parser.add_argument('--seed', type=int, default=None)
    parser.add_argument('-v', '--verbose', action='store_true')
    commands = parser.add_subparsers(dest='command', required=True)

    for name, func, help_text in (('infer', cmd_infer, "full pipeline"),
                                  ('lipsync', cmd_lipsync, "lip sync without expression neutralization")):
        command = commands.add_parser(name, help=help_text)
        if name == 'infer':
            command.add_argument('video')
            command.add_argument('audio')
        else:
            command.add_argument('--video', required=True)
            command.add_argument('--audio', required=True, help="wav file or a video with a soundtrack")
        command.add_argument('-o', '--output', required=True)
        command.add_argument('--template')
        command.add_argument('--ratio', type=float)
        command.add_argument('--no-enet', action='store_true')
        command.add_argument('--manifest')
        if name == 'infer':
            command.add_argument('--no-dnet', action='store_true')
        command.set_defaults(func=func)

    command = commands.add_parser('reenact', help="expression editing with D-Net")
    command.add_argument('video')
    command.add_argument('-o', '--output', required=True)
    command.add_argument('--template', default=None, help="bundled template name or a JSON file")
    command.add_argument('--mode', choices=[REENACT_ONE_SHOT, REENACT_VIDEO_TO_VIDEO],
                         help="warp frame 0 for every output, or each frame itself")
    command.set_defaults(func=cmd_reenact)

    for stage in ('dnet', 'lnet', 'enet', 'syncnet'):
        command = commands.add_parser(f"train-{stage}", help=f"train {stage}")
        command.add_argument('--data', help="toy dataset directory; generated from the config when omitted")
        command.add_argument('--iterations', type=int)
        command.add_argument('--resume', action='store_true')
        if stage == 'enet':
            command.add_argument('--lnet-checkpoint', help="frozen L-Net to enhance; defaults to the configured path")
        command.set_defaults(func=cmd_train, stage=stage)

    command = commands.add_parser('eval', help="FID, CPBD and LSE metrics")
    command.add_argument('--data')
    command.add_argument('--protocol', default=PROTOCOL_UNPAIRED, choices=[PROTOCOL_PAIRED, PROTOCOL_UNPAIRED])
    command.add_argument('--report', default='report.json')
    command.add_argument('--stride', type=int, default=1, help="score every n-th frame")
    command.add_argument('--metrics', default=METRICS_ALL, choices=[METRICS_ALL, METRICS_LSE],
                         help="'lse' writes only {lse_d, lse_c, windows}")
    variants = command.add_mutually_exclusive_group()
    variants.add_argument('--ablation', action='store_true', help="evaluate L, L+E and L+E+D")
    variants.add_argument('--template-sweep', type=_ratios, help="e.g. 0,0.2,0.4,0.6,0.8,1")
    command.set_defaults(func=cmd_eval)

    command = commands.add_parser('make-toy-data', help="write a procedural avatar dataset")
    command.add_argument('output')
    command.add_argument('--clips', type=int)
    command.add_argument('--seconds', type=float)
    command.set_defaults(func=cmd_make_toy_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        args.func(args, load_config(args))
    except RetalkException as error:
        _LOGGER.error("%s", error)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
