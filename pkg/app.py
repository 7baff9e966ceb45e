import argparse
import logging
import sys

from config import Config
from commands import register_all
from errors import EXIT_VALIDATION
from utils import error_response

logger = logging.getLogger(__name__)


def configure_logging(level=None):
    logging.basicConfig(
        level=(level or Config.LOG_LEVEL),
        format=Config.LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def create_app():
    """Application factory: the argument parser with every subcommand registered"""
    parser = argparse.ArgumentParser(
        prog='derain',
        description='Desk-scale image deraining laboratory: synthesis, training, restoration, evaluation',
    )
    parser.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='override DERAIN_LOG_LEVEL')
    subparsers = parser.add_subparsers(dest='command', metavar='command')
    register_all(subparsers)
    return parser


def main(argv=None):
    try:
        Config.validate()
    except ValueError as e:
        return error_response(str(e), 'validation_error', EXIT_VALIDATION)

    parser = create_app()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    if not getattr(args, 'handler', None):
        parser.print_help()
        return EXIT_VALIDATION
    logger.debug("running %s", args.command)
    return args.handler(args)


if __name__ == '__main__':
    sys.exit(main())
