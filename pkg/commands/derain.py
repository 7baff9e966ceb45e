import logging
from pathlib import Path

from datagen import DatasetManifest
from errors import MissingFilesError
from smrnet import LightMode, derain, load_checkpoint
from storage import read_image, read_raw, write_png, write_raw
from utils import ensure_dir, handle_errors, parallel_map, success_response

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser('derain', help='restore rainy images with a trained checkpoint')
    parser.add_argument('--checkpoint', required=True)
    parser.add_argument('--out', required=True, help='directory for <name>.png and <name>.drf')
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument('--input', nargs='+', help='rainy images (.png or .drf)')
    source.add_argument('--corpus', help='restore every observed image of a corpus, named by scene id')
    parser.add_argument('--light', default='brightest',
                        help="atmospheric light: 'brightest' or a value in [0, 1] (veil networks only)")
    parser.add_argument('--threads', type=int, help='worker threads (default DERAIN_THREADS)')
    parser.set_defaults(handler=cmd_derain)


def parse_light(text):
    if text == 'brightest':
        return LightMode.brightest_pixel()
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"--light must be 'brightest' or lie in [0, 1]: {text}")
    return LightMode.known(value)


@handle_errors
def cmd_derain(args):
    light = parse_light(args.light)
    params, config = load_checkpoint(args.checkpoint)
    out = ensure_dir(args.out)

    if args.corpus:
        manifest = DatasetManifest.read(args.corpus)
        jobs = [(entry.id, manifest.path(entry.observed)) for entry in manifest]
    else:
        paths = [Path(p) for p in args.input]
        missing = [p for p in paths if not p.is_file()]
        if missing:
            raise MissingFilesError(missing)
        jobs = [(p.stem, p) for p in paths]

    def _restore(job):
        name, path = job
        observed = read_raw(path) if args.corpus else read_image(path)
        restored, _ = derain(params, config, observed, light)
        write_raw(out / f"{name}.drf", restored)
        write_png(out / f"{name}.png", restored)
        return name

    names = parallel_map(_restore, jobs, threads=args.threads)
    logger.info("restored %d images into %s", len(names), out)
    return success_response({'images': len(names)}, message=str(out))
