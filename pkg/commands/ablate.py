import logging

from datagen import DatasetManifest
from run_config_schema import load_run_config, network_config_from, training_config_from, write_run_config
from trainer import ABLATION_CSV, run_ablation
from utils import ensure_dir, fmt, handle_errors, success_response

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser('ablate', help='compare recurrent-module counts under one training budget')
    parser.add_argument('--corpus', required=True, help='corpus directory or manifest file')
    parser.add_argument('--out', required=True, help=f'directory for {ABLATION_CSV}')
    parser.add_argument('--config', help='run configuration file ([network] and [train] sections)')
    parser.add_argument('--modules', type=int, nargs='+', default=[0, 3],
                        help='recurrent-module counts to compare (default: 0 3)')
    parser.add_argument('--epochs', type=int, help='training budget per variant')
    parser.add_argument('--seed', type=int, help='parameter initialisation seed shared by all variants')
    parser.set_defaults(handler=cmd_ablate)


@handle_errors
def cmd_ablate(args):
    run_config = load_run_config(args.config, {'train.epochs': args.epochs, 'network.seed': args.seed})
    if any(m < 0 for m in args.modules):
        raise ValueError(f"--modules values must be nonnegative: {args.modules}")
    manifest = DatasetManifest.read(args.corpus)
    out = ensure_dir(args.out)
    write_run_config(run_config, out)

    rows, counts = run_ablation(manifest, network_config_from(run_config), training_config_from(run_config),
                                modules=args.modules, out_dir=out)
    finals = {row.variant: row for row in rows}
    summary = {variant: f"{counts[variant]} params, final holdout PSNR {fmt(row.holdout_psnr, 3) or '-'}"
               for variant, row in finals.items()}
    return success_response(summary, message=str(out / ABLATION_CSV))
