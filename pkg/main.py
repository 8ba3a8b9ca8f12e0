# main.py
"""
Command line entry point.

    python main.py gen-corpus --out runs/demo --seed 7
    python main.py pretrain-quantizer --out runs/demo
    python main.py extract --out runs/demo
    python main.py train-seq2seq --out runs/demo --phase pretrain
    python main.py train-seq2seq --out runs/demo --phase finetune --target-size 20 --init <pretrain.ckpt>
    python main.py convert --out runs/demo --seq2seq <finetune.ckpt>
    python main.py eval --out runs/demo
    python main.py run-grid --out runs/demo
    python main.py serve --out runs/demo --seq2seq <finetune.ckpt>
"""
import argparse
import logging
import os
import sys

# Nothing in this block imports numpy, so the thread caps below still take effect.
from app.config import apply_thread_env, load_config
from app.errors import ConfigError, VQVCError
from app.schemas import PostprocessFlags

logger = logging.getLogger(__name__)

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI-style config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="run output directory")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                        help="overwrite an existing output directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS/OpenMP threads per process")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="worker processes for fan-out")
    common.add_argument("--log-level", dest="log_level", default=argparse.SUPPRESS)
    common.add_argument("--detect-anomaly", dest="detect_anomaly", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("--variant", default=argparse.SUPPRESS,
                        help="postprocess variant: none, separate, combine, combine+separate")

    parser = argparse.ArgumentParser(prog="vqvc", description="Desk-scale any-to-one voice conversion pipeline",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-corpus", parents=[common], help="render the synthetic multi-speaker corpus")

    p = sub.add_parser("pretrain-quantizer", parents=[common], help="contrastive pretraining of the quantizer")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("extract", parents=[common], help="quantize utterances into index dumps")
    p.add_argument("--quantizer", help="quantizer checkpoint (default: the run's)")
    p.add_argument("--split", action="append", help="manifest split, repeatable (default: all used splits)")

    p = sub.add_parser("train-seq2seq", parents=[common], help="train the index-to-feature model")
    p.add_argument("--phase", choices=["pretrain", "finetune", "scratch"], default="pretrain")
    p.add_argument("--init", help="checkpoint to finetune from")
    p.add_argument("--target-size", dest="target_size", type=int)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("convert", parents=[common], help="convert source utterances to the target speaker")
    p.add_argument("--quantizer")
    p.add_argument("--seq2seq", help="seq2seq checkpoint (default: finetune at the largest target size)")
    p.add_argument("--split", help="manifest split to convert (default: test)")
    p.add_argument("--input", nargs="+", help="signal files to convert instead of a split")
    p.add_argument("--output", help="output directory for converted feature files")

    p = sub.add_parser("eval", parents=[common], help="score converted features against oracle renders")
    p.add_argument("--converted", help="directory written by convert")

    p = sub.add_parser("run-grid", parents=[common], help="train and evaluate the variant x size grid")
    p.add_argument("--quantizer")
    p.add_argument("--render-only", dest="render_only", action="store_true",
                   help="re-render the last grid report from the registry")

    p = sub.add_parser("serve", parents=[common], help="HTTP conversion service")
    p.add_argument("--quantizer")
    p.add_argument("--seq2seq", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def config_overrides(args: argparse.Namespace) -> dict:
    overrides = {key: getattr(args, key, None) for key in ("seed", "out", "threads", "workers", "log_level")}
    if getattr(args, "force", False):
        overrides["force"] = True
    if getattr(args, "detect_anomaly", False):
        overrides["detect_anomaly"] = True
    variant = getattr(args, "variant", None)
    if variant:
        try:
            overrides["postprocess"] = PostprocessFlags.from_variant(variant).model_dump()
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return overrides


def serve(cfg, args: argparse.Namespace) -> int:
    import uvicorn
    from app.config import RunPaths
    from app.webhook import create_app

    paths = RunPaths(cfg.out)
    quantizer = os.path.abspath(args.quantizer or paths.quantizer_checkpoint)
    try:
        app = create_app(quantizer, os.path.abspath(args.seq2seq), paths.registry)
    except VQVCError as e:
        logger.error(f"❌ Cannot start the conversion service: {e}")
        return e.exit_code
    uvicorn.run(app, host=args.host, port=args.port, log_level=cfg.log_level.lower())
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(getattr(args, "config", None), config_overrides(args))
    except ConfigError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error(f"❌ {e}")
        return e.exit_code

    apply_thread_env(cfg.threads)
    logging.basicConfig(level=cfg.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command == "serve":
        return serve(cfg, args)

    # numpy is first imported here, after the thread caps are in place
    from app.handlers.command_router import route_command
    return route_command(args.command, cfg, args)


if __name__ == "__main__":
    sys.exit(main())
