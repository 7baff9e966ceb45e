from pathlib import Path

from datagen import DatasetManifest
from metrics import METRICS_CSV, evaluate_corpus
from utils import ensure_dir, fmt, handle_errors, success_response


def register(subparsers):
    parser = subparsers.add_parser('evaluate', help='score restored images against clean backgrounds')
    parser.add_argument('--corpus', required=True, help='corpus directory or manifest file')
    parser.add_argument('--restored', required=True, help='directory holding <id>.drf or <id>.png')
    parser.add_argument('--out', help=f'metrics CSV path (default <restored>/{METRICS_CSV})')
    parser.add_argument('--threads', type=int, help='worker threads (default DERAIN_THREADS)')
    parser.set_defaults(handler=cmd_evaluate)


@handle_errors
def cmd_evaluate(args):
    manifest = DatasetManifest.read(args.corpus)
    out = Path(args.out) if args.out else Path(args.restored) / METRICS_CSV
    ensure_dir(out.parent)
    report = evaluate_corpus(manifest, args.restored, out_csv=out, threads=args.threads)
    return success_response(
        data={
            'images': len(report),
            'mean_psnr_db': fmt(report.mean('psnr_db'), 3) or '-',
            'mean_ssim': fmt(report.mean('ssim'), 4) or '-',
        },
        message=str(out),
    )
