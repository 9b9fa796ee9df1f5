"""Command-line interface.

Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.
``STYLEINV_RUN_DIR`` provides the default location for artifacts when a
command's path arguments are omitted.
"""

import argparse
import logging
import os
import sys

from . import evaluate, synthesis
from .backbone import load_pretrained, pretrain_backbone, save_pretrained
from .conditioning import build_vocabulary, save_vocabulary
from .config import (RunConfig, apply_overrides, config_hash, defaults,
                     load_config)
from .corpus import generate_corpus, reference_specs, render_style
from .diffusion import make_schedule
from .errors import InputError
from .inversion import direct_optimize, train_inversion
from .persist import (StyleRecord, load_image, load_style, save_image,
                      save_style, write_metrics_csv)

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); bad args are exit 1
        raise InputError(message)


def _run_dir() -> str:
    return os.environ.get("STYLEINV_RUN_DIR", ".")


def _default(path: str | None, name: str) -> str:
    return path if path is not None else os.path.join(_run_dir(), name)


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else defaults()
    if args.set:
        config = apply_overrides(config, args.set)
    return config


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file of 'section.key = value' lines")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def _bundle(args):
    return load_pretrained(_default(getattr(args, "ckpt", None), "backbone.ckpt"))


def cmd_gen_corpus(args) -> int:
    config = _load_run_config(args)
    out_dir = _default(args.out_dir, "corpus")
    os.makedirs(out_dir, exist_ok=True)
    h = config_hash(config)
    examples = generate_corpus(config.corpus.size, config.corpus.seed,
                               config.image.size)
    rows = []
    for i, ex in enumerate(examples):
        name = f"{i:05d}.png"
        save_image(os.path.join(out_dir, name), ex.image, h)
        rows.append(f"{name},{ex.caption}")
    with open(os.path.join(out_dir, "captions.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={h}\nfile,caption\n")
        fh.write("\n".join(rows) + "\n")
    refs_dir = os.path.join(out_dir, "refs")
    os.makedirs(refs_dir, exist_ok=True)
    for spec in reference_specs():
        image = render_style(spec, config.image.size)
        save_image(os.path.join(refs_dir, f"{spec.family}_{spec.palette}.png"),
                   image, h)
    print(f"wrote {len(examples)} corpus images and"
          f" {len(reference_specs())} held-out references to {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_run_config(args)
    out = _default(args.out, "backbone.ckpt")
    h = config_hash(config)
    sched = make_schedule(config.schedule.T, config.schedule.beta_start,
                          config.schedule.beta_end, config.schedule.sigma_mode)
    vocab = build_vocabulary(config.conditioning.embed_dim,
                             config.conditioning.embed_seed,
                             config.conditioning.embed_scale)
    corpus = generate_corpus(config.corpus.size, config.corpus.seed,
                             config.image.size)
    result = pretrain_backbone(corpus, sched, vocab, config)
    save_pretrained(out, config, result.model, vocab)
    save_vocabulary(os.path.join(os.path.dirname(out) or ".", "vocab.txt"), vocab, h)
    print(f"pretrained {result.param_count} parameters for"
          f" {len(result.losses)} steps; final loss {result.losses[-1]:.5f}")
    print(f"checkpoint: {out}")
    return 0


def cmd_invert(args) -> int:
    bundle = _bundle(args)
    config = bundle.config
    if args.template is not None:
        config.inversion.template = args.template
    if args.steps is not None:
        if args.steps < 1:
            raise InputError("--steps must be >= 1")
        config.inversion.steps = args.steps
    image, _ = load_image(args.image)
    train = direct_optimize if args.baseline else train_inversion
    result = train(image, bundle.model, bundle.codec, bundle.vocab, config,
                   bundle.sched, seed=args.seed, lr_override=args.lr_override)
    record = StyleRecord(embedding=result.embedding,
                         template=config.inversion.template,
                         variant=result.variant,
                         seed=config.inversion.seed if args.seed is None else args.seed,
                         steps=len(result.losses), config_hash=bundle.config_hash)
    out = _default(args.out, "style.style")
    save_style(out, record)
    print(f"{result.variant} inversion: {len(result.losses)} steps,"
          f" final loss {result.losses[-1]:.5f}")
    print(f"style record: {out}")
    return 0


def cmd_generate(args) -> int:
    bundle = _bundle(args)
    style = load_style(args.style, expected_hash=bundle.config_hash,
                       strict=args.strict_hash)
    req = synthesis.GenerationRequest(style=style, template=args.template,
                                      seed=args.seed, mode=args.mode)
    image = synthesis.txt2img(req, bundle.model, bundle.codec, bundle.vocab,
                              bundle.sched)
    save_image(args.out, image, bundle.config_hash)
    print(f"wrote {args.out}")
    return 0


def cmd_transfer(args) -> int:
    bundle = _bundle(args)
    style = load_style(args.style, expected_hash=bundle.config_hash,
                       strict=args.strict_hash)
    content, _ = load_image(args.content)
    template = args.template if args.template else style.template
    req = synthesis.GenerationRequest(style=style, template=template,
                                      seed=args.seed, mode=args.mode,
                                      content=content, strength=args.strength)
    image = synthesis.style_transfer(req, bundle.model, bundle.codec,
                                     bundle.vocab, bundle.sched,
                                     noise_source=args.noise)
    if args.tone == "match-reference":
        if not args.reference:
            raise InputError("--tone match-reference requires --reference")
        reference, _ = load_image(args.reference)
        image = synthesis.tone_transfer(image, reference)
    save_image(args.out, image, bundle.config_hash)
    print(f"wrote {args.out}")
    return 0


def cmd_bench_convergence(args) -> int:
    bundle = _bundle(args)
    config = bundle.config
    image, _ = load_image(args.image)
    report, rows = evaluate.run_convergence_benchmark(image, bundle, config)
    out_dir = _default(args.out_dir, "bench")
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(os.path.join(out_dir, "convergence.csv"), rows,
                      bundle.config_hash)
    for run in report.runs:
        print(f"  seed={run.seed % 100000:>5d} variant={run.variant:<9s}"
              f" steps_to_threshold={run.steps_to_threshold}")
    for line in report.diagnostics:
        print(f"  note: {line}")
    if report.failed or report.median_ratio is None:
        print("benchmark FAILED")
        return 2
    print(f"threshold {report.threshold:.5f}; median direct/attention ratio"
          f" {report.median_ratio:.2f}")
    return 0


def cmd_eval_accuracy(args) -> int:
    bundle = _bundle(args)
    if len(args.styles) != len(args.refs):
        raise InputError("--styles and --refs must have equal counts")
    styles = [load_style(p, expected_hash=bundle.config_hash) for p in args.styles]
    refs = [load_image(p)[0] for p in args.refs]
    report = evaluate.eval_accuracy(styles, refs, bundle, bundle.config)
    out = _default(args.out, "accuracy.csv")
    rows = [{"run_id": f"style{r.style_id}", "variant": "accuracy",
             "step": r.sample, "loss": r.own_distance,
             "wall_time_s": 0.0} for r in report.rows]
    write_metrics_csv(out, rows, bundle.config_hash)
    print(f"accuracy {report.rate:.3f} over {len(report.rows)} samples")
    return 0


def cmd_eval_editability(args) -> int:
    bundle = _bundle(args)
    style = load_style(args.style, expected_hash=bundle.config_hash)
    reference, _ = load_image(args.reference)
    report = evaluate.eval_editability(style, args.templates, reference,
                                       bundle, bundle.config)
    for row in report.template_rows:
        print(f"  {row.template!r}: pixel dist to ref"
              f" {row.distance_to_reference_pixel:.4f}")
    nonzero = all(r.pixel_distance > 0 for r in report.pair_rows)
    print(f"pairwise distances all nonzero: {nonzero}")
    return 0


def cmd_verify_run(args) -> int:
    report = evaluate.verify_run(args.dir)
    for path, value in report.checked:
        print(f"  {value[:12] if value else '<missing>':>12}  {path}")
    if not report.ok:
        for line in report.mismatches:
            print(f"mismatch: {line}", file=sys.stderr)
        return 2
    print(f"{len(report.checked)} artifacts share config hash"
          f" {report.reference_hash[:12]}...")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="styleinv",
                     description="single-image style inversion toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="render the procedural corpus")
    _add_config_args(p)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="train the denoiser on the corpus")
    _add_config_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("invert", help="learn a pseudo-word for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.add_argument("--baseline", action="store_true",
                   help="use direct embedding optimization instead of the"
                        " attention module")
    p.add_argument("--template")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr-override", type=float,
                   help="replace the scaled learning rate")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("generate", help="text-to-image with a learned style")
    p.add_argument("--style", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--mode", choices=synthesis.MODES, default="stochastic")
    p.add_argument("--strict-hash", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("transfer", help="image-to-image with a learned style")
    p.add_argument("--style", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--strength", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--template")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=synthesis.MODES, default="stochastic")
    p.add_argument("--noise", choices=synthesis.NOISE_SOURCES, default="inverted")
    p.add_argument("--tone", choices=("keep", "match-reference"), default="keep")
    p.add_argument("--reference", help="reference image for tone matching")
    p.add_argument("--strict-hash", action="store_true")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("bench-convergence",
                       help="attention vs direct convergence benchmark")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_bench_convergence)

    p = sub.add_parser("eval-accuracy", help="held-out style accuracy")
    p.add_argument("--styles", nargs="+", required=True)
    p.add_argument("--refs", nargs="+", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_accuracy)

    p = sub.add_parser("eval-editability", help="template sensitivity check")
    p.add_argument("--style", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--templates", nargs="+", required=True)
    p.add_argument("--ckpt")
    p.set_defaults(func=cmd_eval_editability)

    p = sub.add_parser("verify-run", help="audit artifact config hashes")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_verify_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures, corrupt state
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
