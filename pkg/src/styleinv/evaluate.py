"""Evaluation protocols and run auditing.

Convergence benchmark: the two inversion routes run on identical
(t, eps) streams per seed; a run "converges" at the first step where its
trailing-window smoothed loss reaches a threshold derived from a long
direct-route reference run.  The headline number is the median over
seeds of the direct/attention step ratio.

Style accuracy: generated samples are classified to the nearest held-out
reference in frozen image-encoder feature space (per-dimension mean and
spread over token positions); a sample is correct when its own reference
is nearest.

Editability: one generation per template at a fixed seed, with pairwise
distances between outputs and each output's distance to the reference.

Run verification: every artifact in a directory must carry the same
config hash.
"""

import logging
import os
import statistics
import time
from dataclasses import dataclass, field

import torch

from .backbone import BackboneBundle
from .conditioning import ImagePatchEncoder, image_encode, load_vocabulary_words
from .config import RunConfig
from .errors import InputError
from .inversion import InversionResult, direct_optimize, train_inversion
from .persist import StyleRecord, load_checkpoint, load_image, load_style
from .seeding import derive_seed
from .synthesis import GenerationRequest, txt2img

logger = logging.getLogger(__name__)


def trailing_mean(losses: list[float], window: int) -> list[float]:
    """Trailing-window means; entry i averages losses[i-window+1 .. i].

    Defined from i = window - 1 on; earlier entries are omitted, so the
    returned list has len(losses) - window + 1 entries.
    """
    if window < 1:
        raise InputError("window must be >= 1")
    if len(losses) < window:
        return []
    out = []
    acc = sum(losses[:window])
    out.append(acc / window)
    for i in range(window, len(losses)):
        acc += losses[i] - losses[i - window]
        out.append(acc / window)
    return out


def steps_to_threshold(losses: list[float], threshold: float,
                       window: int) -> int | None:
    """First step (1-based) whose trailing-window mean is <= threshold."""
    smoothed = trailing_mean(losses, window)
    for i, value in enumerate(smoothed):
        if value <= threshold:
            return i + window
    return None


@dataclass
class VariantRun:
    seed: int
    variant: str
    losses: list[float]
    steps_to_threshold: int | None
    wall_time_s: float


@dataclass
class ConvergenceReport:
    threshold: float
    reference_steps: int
    runs: list[VariantRun]
    ratios: list[float]
    median_ratio: float | None
    failed: bool
    diagnostics: list[str] = field(default_factory=list)


def _threshold_stop(threshold: float, window: int):
    def stop(losses: list[float]) -> bool:
        if len(losses) < window:
            return False
        return sum(losses[-window:]) / window <= threshold
    return stop


def run_convergence_benchmark(y: torch.Tensor, bundle: BackboneBundle,
                              config: RunConfig) -> tuple[ConvergenceReport, list[dict]]:
    """Benchmark both inversion routes on one reference image.

    Returns the report plus per-step metrics rows (run_id, variant, step,
    loss, wall_time_s) for every run including the reference.
    """
    bench = config.bench
    rows: list[dict] = []
    diagnostics: list[str] = []

    def record(run_id: str, variant: str, losses: list[float], wall: float) -> None:
        per_step = wall / max(len(losses), 1)
        for i, loss in enumerate(losses, start=1):
            rows.append({"run_id": run_id, "variant": variant, "step": i,
                         "loss": loss, "wall_time_s": per_step * i})

    start = time.perf_counter()
    reference = direct_optimize(
        y, bundle.model, bundle.codec, bundle.vocab, config, bundle.sched,
        steps=bench.reference_steps, seed=derive_seed(bench.seed, "reference"))
    ref_wall = time.perf_counter() - start
    record("reference", "direct", reference.losses, ref_wall)
    smoothed = trailing_mean(reference.losses, bench.window)
    if not smoothed:
        raise InputError("reference run shorter than the smoothing window")
    threshold = bench.threshold_margin * min(smoothed)

    runs: list[VariantRun] = []
    ratios: list[float] = []
    failed = False
    stop = _threshold_stop(threshold, bench.window)
    for k in range(bench.num_seeds):
        seed = derive_seed(bench.seed, "variant", k)
        per_variant: dict[str, int] = {}
        for variant, train in (("attention", train_inversion),
                               ("direct", direct_optimize)):
            t0 = time.perf_counter()
            try:
                result: InversionResult = train(
                    y, bundle.model, bundle.codec, bundle.vocab, config,
                    bundle.sched, steps=bench.max_steps, seed=seed, stop_fn=stop)
            except Exception as exc:  # divergence is a reportable failure
                failed = True
                diagnostics.append(f"{variant} seed {k}: {exc}")
                continue
            wall = time.perf_counter() - t0
            n = steps_to_threshold(result.losses, threshold, bench.window)
            runs.append(VariantRun(seed=seed, variant=variant,
                                   losses=result.losses,
                                   steps_to_threshold=n, wall_time_s=wall))
            record(f"seed{k}", variant, result.losses, wall)
            if n is None:
                diagnostics.append(
                    f"{variant} seed {k}: did not reach threshold in"
                    f" {len(result.losses)} steps; using the cap as a lower bound")
                n = len(result.losses)
            per_variant[variant] = n
        if "attention" in per_variant and "direct" in per_variant:
            ratios.append(per_variant["direct"] / per_variant["attention"])
    median_ratio = statistics.median(ratios) if ratios else None
    if median_ratio is None:
        failed = True
    report = ConvergenceReport(threshold=threshold,
                               reference_steps=bench.reference_steps,
                               runs=runs, ratios=ratios,
                               median_ratio=median_ratio, failed=failed,
                               diagnostics=diagnostics)
    return report, rows


def feature_vector(image: torch.Tensor, encoder: ImagePatchEncoder) -> torch.Tensor:
    """Per-dimension mean and spread of the frozen encoder's tokens.

    Style identity must survive pattern phase, which roughly permutes
    token positions; position statistics are stable under that, while
    concatenated raw tokens are not.
    """
    tokens = image_encode(image, encoder)
    return torch.cat([tokens.mean(dim=0), tokens.std(dim=0, unbiased=False)])


@dataclass
class AccuracyRow:
    style_id: int
    sample: int
    own_distance: float
    min_other_distance: float
    correct: bool


@dataclass
class AccuracyReport:
    rows: list[AccuracyRow]
    rate: float


def eval_accuracy(styles: list[StyleRecord], references: list[torch.Tensor],
                  bundle: BackboneBundle, config: RunConfig) -> AccuracyReport:
    """Nearest-reference classification of generated samples.

    For each style, ``config.eval.samples`` stochastic generations from
    its own template; each sample is correct when its feature vector is
    closer to its own reference than to every other reference.
    """
    if len(styles) < 2:
        raise InputError("accuracy evaluation needs at least two styles")
    if len(styles) != len(references):
        raise InputError("need exactly one reference image per style")
    encoder = bundle.encoder
    ref_feats = [feature_vector(ref, encoder) for ref in references]
    rows: list[AccuracyRow] = []
    for i, style in enumerate(styles):
        for k in range(config.eval.samples):
            req = GenerationRequest(style=style, template=style.template,
                                    seed=derive_seed(config.eval.seed, "acc", i, k))
            sample = txt2img(req, bundle.model, bundle.codec, bundle.vocab,
                             bundle.sched)
            feat = feature_vector(sample, encoder)
            dists = [float(torch.linalg.vector_norm(feat - rf)) for rf in ref_feats]
            own = dists[i]
            others = [d for j, d in enumerate(dists) if j != i]
            rows.append(AccuracyRow(style_id=i, sample=k, own_distance=own,
                                    min_other_distance=min(others),
                                    correct=own < min(others)))
    rate = sum(r.correct for r in rows) / len(rows)
    return AccuracyReport(rows=rows, rate=rate)


@dataclass
class TemplateRow:
    template: str
    distance_to_reference_pixel: float
    distance_to_reference_feature: float


@dataclass
class PairRow:
    template_a: str
    template_b: str
    pixel_distance: float
    feature_distance: float


@dataclass
class EditabilityReport:
    template_rows: list[TemplateRow]
    pair_rows: list[PairRow]


def eval_editability(style: StyleRecord, templates: list[str],
                     reference: torch.Tensor, bundle: BackboneBundle,
                     config: RunConfig) -> EditabilityReport:
    """Generate once per template at one fixed seed and measure spreads."""
    if len(templates) < 2:
        raise InputError("editability evaluation needs at least two templates")
    if len(set(templates)) != len(templates):
        raise InputError("templates must be distinct")
    seed = derive_seed(config.eval.seed, "edit")
    encoder = bundle.encoder
    images = []
    for template in templates:
        req = GenerationRequest(style=style, template=template, seed=seed)
        images.append(txt2img(req, bundle.model, bundle.codec, bundle.vocab,
                              bundle.sched))
    feats = [feature_vector(img, encoder) for img in images]
    ref_feat = feature_vector(reference, encoder)
    template_rows = []
    for template, img, feat in zip(templates, images, feats):
        template_rows.append(TemplateRow(
            template=template,
            distance_to_reference_pixel=float(torch.mean(torch.abs(img - reference))),
            distance_to_reference_feature=float(torch.linalg.vector_norm(feat - ref_feat)),
        ))
    pair_rows = []
    for a in range(len(templates)):
        for b in range(a + 1, len(templates)):
            pair_rows.append(PairRow(
                template_a=templates[a], template_b=templates[b],
                pixel_distance=float(torch.mean(torch.abs(images[a] - images[b]))),
                feature_distance=float(torch.linalg.vector_norm(feats[a] - feats[b])),
            ))
    return EditabilityReport(template_rows=template_rows, pair_rows=pair_rows)


@dataclass
class VerifyReport:
    checked: list[tuple[str, str]]  # (path, hash)
    mismatches: list[str]
    reference_hash: str | None

    @property
    def ok(self) -> bool:
        return not self.mismatches and self.reference_hash is not None


def verify_run(run_dir: str) -> VerifyReport:
    """Audit every artifact under ``run_dir`` for a single config hash."""
    if not os.path.isdir(run_dir):
        raise InputError(f"{run_dir} is not a directory")
    checked: list[tuple[str, str]] = []
    skipped: list[str] = []
    for root, _, names in sorted(os.walk(run_dir)):
        for name in sorted(names):
            path = os.path.join(root, name)
            value = _artifact_hash(path)
            if value is None:
                skipped.append(path)
            else:
                checked.append((path, value))
    if not checked:
        raise InputError(f"no hash-carrying artifacts found under {run_dir}")
    with_hash = [(p, v) for p, v in checked if v]
    mismatches = [f"{path}: missing config hash" for path, value in checked if not value]
    reference = with_hash[0][1] if with_hash else None
    if reference is not None:
        mismatches += [f"{path}: {value[:12]}... != {reference[:12]}..."
                       for path, value in with_hash if value != reference]
    if skipped:
        logger.info("verify: skipped %d non-artifact files", len(skipped))
    return VerifyReport(checked=checked, mismatches=mismatches,
                        reference_hash=reference)


def _artifact_hash(path: str) -> str | None:
    """Config hash of a recognized artifact ('' if absent), None for others."""
    if path.endswith(".ckpt"):
        return load_checkpoint(path)[2]
    if path.endswith(".style"):
        return load_style(path).config_hash
    if path.endswith(".png"):
        return load_image(path)[1] or ""
    if path.endswith(".csv"):
        # Only the hash comment matters here; the body may be any table,
        # not just the metrics schema.
        with open(path, encoding="utf-8") as fh:
            first = fh.readline().strip()
        prefix = "# config_hash="
        return first[len(prefix):] if first.startswith(prefix) else ""
    if path.endswith(".txt") and os.path.basename(path).startswith("vocab"):
        return load_vocabulary_words(path)[1]
    return None
