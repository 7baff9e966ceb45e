import logging
import sys

from datagen import DatasetManifest
from run_config_schema import load_run_config, network_config_from, training_config_from, write_run_config
from smrnet import build_network, save_checkpoint
from trainer import TRAINING_LOG, train
from utils import ensure_dir, fmt, handle_errors, success_response

logger = logging.getLogger(__name__)

MODEL_NAME = 'model.smrc'


def register(subparsers):
    parser = subparsers.add_parser('train', help='train a deraining network on a corpus')
    parser.add_argument('--corpus', required=True, help='corpus directory or manifest file')
    parser.add_argument('--out', required=True, help='directory for checkpoints and the training log')
    parser.add_argument('--config', help='run configuration file ([network] and [train] sections)')
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--batch-size', type=int)
    parser.add_argument('--lr', type=float, help='learning rate')
    parser.add_argument('--optimizer', choices=['adam', 'sgd'])
    parser.add_argument('--seed', type=int, help='parameter initialisation seed')
    parser.add_argument('--scale-bins', type=int, help='recurrent sub-networks (0: direct baseline)')
    parser.add_argument('--veil', choices=['on', 'off'], help='add the inverse-transmittance head')
    parser.set_defaults(handler=cmd_train)


def training_overrides(args):
    return {
        'train.epochs': args.epochs,
        'train.batch_size': args.batch_size,
        'train.learning_rate': args.lr,
        'train.optimizer': args.optimizer,
        'network.seed': args.seed,
        'network.scale_bins': args.scale_bins,
        'network.veil_enabled': args.veil,
    }


@handle_errors
def cmd_train(args):
    run_config = load_run_config(args.config, training_overrides(args))
    network = network_config_from(run_config)
    training = training_config_from(run_config)
    manifest = DatasetManifest.read(args.corpus)
    out = ensure_dir(args.out)
    write_run_config(run_config, out)

    params = build_network(network)
    result = train(params, network, manifest, training, out_dir=out, progress=sys.stderr.isatty())
    model = save_checkpoint(out / MODEL_NAME, result.params, network)

    first, final = result.log[0], result.final
    return success_response(
        data={
            'epochs': len(result.log),
            'first_loss': fmt(first.train_loss),
            'final_loss': fmt(final.train_loss),
            'holdout_psnr': fmt(final.holdout_psnr, 3) or '-',
            'input_psnr': fmt(final.input_psnr, 3) or '-',
            'log': out / TRAINING_LOG,
        },
        message=str(model),
    )
