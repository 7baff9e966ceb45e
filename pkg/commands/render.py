import logging

from config import Config
from datagen import MANIFEST_NAME, generate_dataset
from run_config_schema import load_run_config, scene_spec_from, write_run_config
from utils import ensure_dir, handle_errors, success_response

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser('render', help='synthesize a rainy-scene corpus')
    parser.add_argument('--config', help='run configuration file ([scene] section is used)')
    parser.add_argument('--count', type=int, default=32, help='number of scenes (default 32)')
    parser.add_argument('--out', required=True, help='output directory')
    parser.add_argument('--seed', type=int, help='master seed (default DERAIN_SEED)')
    parser.add_argument('--veil', choices=['on', 'off'], help='render the veiling effect')
    parser.add_argument('--size', help="image size as 'H,W'")
    parser.add_argument('--threads', type=int, help='worker threads (default DERAIN_THREADS)')
    parser.set_defaults(handler=cmd_render)


@handle_errors
def cmd_render(args):
    """Render a corpus and print the manifest path"""
    run_config = load_run_config(args.config, {
        'scene.seed': args.seed,
        'scene.veil_enabled': args.veil,
        'scene.image_size': args.size,
    })
    # flag, then file, then DERAIN_SEED; the resolved seed is echoed with the rest
    if run_config['scene']['seed'] is None:
        run_config['scene']['seed'] = Config.DEFAULT_SEED
    seed = run_config['scene']['seed']
    spec = scene_spec_from(run_config)
    out = ensure_dir(args.out)
    write_run_config(run_config, out)

    manifest = generate_dataset(spec, args.count, out, threads=args.threads)
    return success_response(
        data={'scenes': len(manifest), 'seed': seed, 'veil': 'on' if spec.veil_enabled else 'off'},
        message=str(out / MANIFEST_NAME),
    )
