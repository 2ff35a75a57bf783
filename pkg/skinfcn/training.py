"""
End-to-end pipelines behind the command-line tool: training, prediction
and directory scoring.
"""

import dataclasses
import logging
import math
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd
from PIL import Image

from skinfcn.checkpoint import import_weights, load_checkpoint, model_from_contents, read_checkpoint, save_checkpoint
from skinfcn.data import (
    MASK_SUFFIXES,
    OVERLAY_SUFFIX,
    Batch,
    SegmentationDataset,
    compute_channel_means,
    decode_mask_png,
    encode_mask_png,
    expand_inputs,
    is_mask_name,
    make_batches,
    mask_id,
    normalize,
    read_manifest,
    read_rgb,
)
from skinfcn.errors import DataError, FormatError, NumericError
from skinfcn.metrics import AggregateReport, aggregate, score_masks, write_report
from skinfcn.model import FCNNModel, build_model, forward, predict_mask, segment_image
from skinfcn.ops import softmax_cross_entropy
from skinfcn.optim import SgdState, sgd_step, zero_grads
from skinfcn.overlay import overlay_contours
from skinfcn.parallel import set_num_threads
from skinfcn.schemas.architecture import ArchitectureConfig, preset
from skinfcn.schemas.training import RunConfig, SgdConfig
from skinfcn.telemetry import (
    NAME_PREDICT_IMAGES_TOTAL,
    NAME_SCORE_IMAGES_TOTAL,
    NAME_TRAIN_IMAGES_TOTAL,
    NAME_TRAIN_STEPS_TOTAL,
    increment_metric,
    init_metrics,
)
from skinfcn.tensor import Tensor, backward

_LOGGER = logging.getLogger(__name__)

VAL_COLUMN = "val_JA"


@dataclasses.dataclass(frozen=True)
class StepResult:
    loss: float
    masks: np.ndarray  # predictions of the forward pass before the update


@dataclasses.dataclass(frozen=True)
class EpochSummary:
    epoch: int
    mean_loss: float
    train_ja: float
    val_ja: float | None = None


def train_step(model: FCNNModel, state: SgdState, batch: Batch, cfg: SgdConfig) -> StepResult:
    """One forward/backward/update cycle on a normalized batch."""
    result = forward(model, batch.images, record=True)
    with result.tape:
        loss, _ = softmax_cross_entropy(result.logits, batch.labels)
    zero_grads(model.parameters)
    backward(result.tape, loss)
    sgd_step(model.parameters, state, cfg)
    return StepResult(loss=loss.item(), masks=predict_mask(result.logits))


def _initial_model(run: RunConfig, config: ArchitectureConfig, dataset: SegmentationDataset) -> tuple[FCNNModel, SgdState]:
    if run.init is not None:
        contents = read_checkpoint(run.init)
        try:
            model, state = model_from_contents(contents, str(run.init))
        except FormatError:
            model = None
        if model is not None and model.config == config:
            _LOGGER.info(f"Resuming from {run.init} after epoch {run.start_epoch}")
            return model, state if state is not None else SgdState.zeros_like(model.parameters)
        model = build_model(config, run.seed)
        report = import_weights(model, contents, permissive=True)
        _LOGGER.info(f"Initialized {len(report.loaded)} tensor(s) from {run.init}")
    else:
        model = build_model(config, run.seed)
    model.means = compute_channel_means(dataset)
    _LOGGER.info(f"Input channel means: {model.means}")
    return model, SgdState.zeros_like(model.parameters)


def evaluate(model: FCNNModel, dataset: SegmentationDataset, batch_size: int = 1) -> AggregateReport:
    """Score the model's predictions on every sample of a dataset."""
    scores = []
    for start in range(0, len(dataset), batch_size):
        samples = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        images = normalize(Tensor(np.concatenate([s.image.data for s in samples])), model.means)
        masks = predict_mask(forward(model, images).logits)
        scores.extend(score_masks(mask, s.mask, s.id) for mask, s in zip(masks, samples))
    return aggregate(scores)


def _append_log(path: Path, summary: EpochSummary, fresh: bool) -> None:
    row = {"epoch": summary.epoch, "mean_loss": summary.mean_loss, "train_JA": summary.train_ja}
    if summary.val_ja is not None:
        row[VAL_COLUMN] = summary.val_ja
    try:
        pd.DataFrame([row]).to_csv(
            path, mode="w" if fresh else "a", header=fresh, index=False, lineterminator="\n"
        )
    except OSError as e:
        raise DataError(f"cannot write training log: {e}", str(path)) from e


def train(run: RunConfig) -> list[EpochSummary]:
    """Train for `run.epochs` epochs, checkpointing to `run.out` after every epoch.

    Epochs are numbered from `run.start_epoch + 1`; the shuffle of epoch k
    depends only on (seed, k), so a resumed run continues the original
    batch sequence.
    """
    set_num_threads(run.threads)
    init_metrics()
    manifest = read_manifest(run.manifest)
    if len(manifest) == 0:
        raise DataError("training manifest is empty", str(run.manifest))
    dataset = SegmentationDataset(manifest, run.target_size)
    val_dataset = None
    if run.val_manifest is not None:
        val_dataset = SegmentationDataset(read_manifest(run.val_manifest, split="val"), run.target_size)

    model, state = _initial_model(run, preset(run.preset, run.fusion), dataset)
    cfg = run.sgd
    log_path = run.log_path
    fresh_log = run.start_epoch == 0 or not log_path.exists()

    summaries = []
    for epoch in range(run.start_epoch + 1, run.start_epoch + run.epochs + 1):
        weighted_losses, scores = [], []
        for batch in make_batches(dataset, cfg.batch_size, run.seed, epoch, model.means):
            step = train_step(model, state, batch, cfg)
            weighted_losses.append(step.loss * len(batch.ids))
            scores.extend(score_masks(mask, label, id_) for mask, label, id_ in zip(step.masks, batch.labels, batch.ids))
            increment_metric(NAME_TRAIN_STEPS_TOTAL)
            increment_metric(NAME_TRAIN_IMAGES_TOTAL, len(batch.ids))
        if not math.isfinite(sum(weighted_losses)):
            raise NumericError(f"training diverged in epoch {epoch} (non-finite loss)")

        val_ja = evaluate(model, val_dataset, cfg.batch_size).ranking_key if val_dataset is not None else None
        summary = EpochSummary(
            epoch=epoch,
            mean_loss=math.fsum(weighted_losses) / len(dataset),
            train_ja=aggregate(scores).ranking_key,
            val_ja=val_ja,
        )
        save_checkpoint(model, state, run.out)
        _append_log(log_path, summary, fresh_log)
        fresh_log = False
        summaries.append(summary)
        message = f"Epoch {epoch}: mean loss {summary.mean_loss:.6f}, train JA {summary.train_ja:.4f}"
        if val_ja is not None:
            message += f", val JA {val_ja:.4f}"
        _LOGGER.info(message)
    return summaries


def _find_mask(directory: Path, sample_id: str) -> Path | None:
    for suffix in (*MASK_SUFFIXES, ""):
        candidate = directory / f"{sample_id}{suffix}.png"
        if candidate.is_file():
            return candidate
    return None


def predict_images(
    checkpoint: str | Path,
    inputs: Iterable[str | Path],
    out_dir: str | Path,
    overlay: bool = False,
    gt_dir: str | Path | None = None,
    size: int | None = None,
) -> list[Path]:
    """Write `{id}.png` masks (and `{id}_overlay.png` renderings) for every input image."""
    init_metrics()
    model, _ = load_checkpoint(checkpoint)
    files = expand_inputs(inputs)
    ids = [mask_id(f) for f in files]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise DataError(f"several inputs map to the same id: {', '.join(duplicates)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for path, sample_id in zip(files, ids):
        image = read_rgb(path)
        gt = None
        if overlay and gt_dir is not None:
            gt_path = _find_mask(Path(gt_dir), sample_id)
            if gt_path is None:
                _LOGGER.warning(f"No ground-truth mask for '{sample_id}' in {gt_dir}")
            else:
                gt = decode_mask_png(gt_path)
                if gt.shape != image.shape[:2]:
                    raise DataError(
                        f"ground-truth mask {gt.shape} does not match image {image.shape[:2]}", str(gt_path)
                    )
        mask = segment_image(model, image, size)
        mask_path = out_dir / f"{sample_id}.png"
        encode_mask_png(mask, mask_path)
        written.append(mask_path)
        if overlay:
            overlay_path = out_dir / f"{sample_id}{OVERLAY_SUFFIX}.png"
            try:
                Image.fromarray(overlay_contours(image, mask, gt)).save(overlay_path, format="PNG")
            except OSError as e:
                raise DataError(f"cannot write overlay: {e}", str(overlay_path)) from e
            written.append(overlay_path)
        increment_metric(NAME_PREDICT_IMAGES_TOTAL)
    _LOGGER.info(f"Segmented {len(files)} image(s) into {out_dir}")
    return written


def collect_masks(directory: str | Path) -> dict[str, Path]:
    """Mask PNGs of a directory keyed by sample id.

    `_mask`/`_segmentation` files take precedence over a plain `{id}.png`
    (which, in a dataset directory, is the RGB image); overlays are ignored.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError("not a directory", str(directory))
    found: dict[str, tuple[bool, Path]] = {}
    for path in sorted(directory.glob("*.png")):
        if path.stem.endswith(OVERLAY_SUFFIX):
            continue
        sample_id, suffixed = mask_id(path), is_mask_name(path)
        if sample_id in found:
            previous_suffixed, previous = found[sample_id]
            if previous_suffixed == suffixed:
                raise DataError(f"ambiguous masks for '{sample_id}': {previous.name}, {path.name}", str(directory))
            if previous_suffixed:
                continue
        found[sample_id] = (suffixed, path)
    return {sample_id: path for sample_id, (_, path) in found.items()}


def score_directories(pred_dir: str | Path, gt_dir: str | Path, out: str | Path) -> AggregateReport:
    init_metrics()
    predictions, truths = collect_masks(pred_dir), collect_masks(gt_dir)
    unmatched = sorted(set(predictions) ^ set(truths))
    if unmatched:
        raise DataError(f"ids without a counterpart: {', '.join(unmatched)}")
    if not predictions:
        raise DataError("no masks to score", str(pred_dir))

    scores = []
    for sample_id in sorted(predictions):
        pred_path = predictions[sample_id]
        try:
            scores.append(score_masks(decode_mask_png(pred_path), decode_mask_png(truths[sample_id]), sample_id))
        except DataError as e:
            if e.path is not None:
                raise
            raise DataError(str(e), str(pred_path)) from e
        increment_metric(NAME_SCORE_IMAGES_TOTAL)
    report = aggregate(scores)
    write_report(report, out)
    _LOGGER.info(f"Mean JA over {len(scores)} image(s): {report.ranking_key:.6f}")
    return report

