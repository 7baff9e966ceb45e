from datagen import DatasetManifest, check_corpus
from errors import EXIT_VALIDATION
from utils import error_response, handle_errors, success_response


def register(subparsers):
    parser = subparsers.add_parser('check', help='verify every scene of a corpus against the rain model')
    parser.add_argument('--corpus', required=True, help='corpus directory or manifest file')
    parser.add_argument('--threads', type=int, help='worker threads (default DERAIN_THREADS)')
    parser.set_defaults(handler=cmd_check)


@handle_errors
def cmd_check(args):
    manifest = DatasetManifest.read(args.corpus)
    bad = check_corpus(manifest, threads=args.threads)
    if bad:
        for scene_id, errors in bad.items():
            for error in errors:
                print(f"{scene_id}: {error}")
        return error_response(f"{len(bad)} of {len(manifest)} scenes violate the rain model",
                              'validation_error', EXIT_VALIDATION)
    return success_response({'scenes': len(manifest)}, message='corpus is consistent')
