"""SGD training loop, batched inference and k-shot evaluation over dataset files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics, ops
from .autodiff import OptimizerState, Tape, Tensor, backward, sgd_step, zero_grad
from .errors import NumericError, ShapeError
from .model import (
    VELOCITY_PREFIX,
    ModelConfig,
    Parameters,
    as_input,
    init_params,
    load_checkpoint,
    predict_mask,
    read_checkpoint,
    save_checkpoint,
)
from .synth import DatasetFile

log = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    seed: int = 0
    batch_size: int = 8
    iterations: int = 500
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0005
    checkpoint_every: int = 500


def check_dims(ds: DatasetFile, config: ModelConfig) -> None:
    if ds.query_size != config.query_size or ds.target_size != config.target_size:
        raise ShapeError(
            f"dataset images are {ds.query_size}/{ds.target_size}px but the model expects "
            f"{config.query_size}/{config.target_size}px"
        )


class Trainer:
    """Owns parameters and optimizer state for one training run."""

    def __init__(self, config: ModelConfig, settings: TrainSettings, params: Parameters | None = None):
        self.config = config
        self.settings = settings
        self.params = params if params is not None else init_params(config, settings.seed)
        self.state = OptimizerState.for_params(
            list(self.params),
            learning_rate=settings.learning_rate,
            momentum=settings.momentum,
            weight_decay=settings.weight_decay,
        )
        self.iteration = 0
        self._rng = np.random.default_rng(np.random.SeedSequence([settings.seed, 0x7A1]))
        self._order: np.ndarray = np.zeros(0, dtype=np.int64)
        self._cursor = 0

    def _next_batch(self, n: int) -> np.ndarray:
        idx = []
        while len(idx) < self.settings.batch_size:
            if self._cursor >= len(self._order):
                self._order = self._rng.permutation(n)
                self._cursor = 0
            take = min(self.settings.batch_size - len(idx), len(self._order) - self._cursor)
            idx.extend(self._order[self._cursor : self._cursor + take])
            self._cursor += take
        return np.sort(np.asarray(idx))

    def step(self, query: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
        """One forward/backward/update over a batch; returns the batch mean loss."""
        params = list(self.params)
        with Tape() as tape:
            prob = predict_mask(as_input(query, self.config), as_input(target, self.config), self.params, self.config)
            loss = ops.bce_loss(prob, (mask > 0).astype(self.config.dtype))
        backward(tape, loss)
        sgd_step(params, self.state)
        zero_grad(params)
        self.iteration += 1
        return loss.item()

    def fit(
        self,
        ds: DatasetFile,
        iterations: int | None = None,
        log_path=None,
        checkpoint_dir=None,
        callback: Callable[[int, float], None] | None = None,
    ) -> list[float]:
        check_dims(ds, self.config)
        total = iterations if iterations is not None else self.settings.iterations
        queries = np.asarray(ds.records["query"])
        targets = np.asarray(ds.records["target"])
        masks = np.asarray(ds.records["mask"])
        ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
        if ckpt_dir:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        log_fh = None
        if log_path:
            new = not Path(log_path).exists() or self.iteration == 0
            log_fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.writer(log_fh)
            if new:
                writer.writerow(["iteration", "loss"])
        losses = []
        try:
            while self.iteration < total:
                idx = self._next_batch(len(ds))
                try:
                    loss = self.step(queries[idx], targets[idx], masks[idx])
                except NumericError:
                    if ckpt_dir:
                        self.save(ckpt_dir / "last_good.ckpt")
                    raise
                losses.append(loss)
                if log_fh:
                    writer.writerow([self.iteration, f"{loss:.8f}"])
                if callback:
                    callback(self.iteration, loss)
                if ckpt_dir and self.iteration % self.settings.checkpoint_every == 0:
                    self.save(ckpt_dir / f"iter_{self.iteration:07d}.ckpt")
                    log.info("iteration %d loss %.5f", self.iteration, loss)
        finally:
            if log_fh:
                log_fh.close()
        if ckpt_dir:
            self.save(ckpt_dir / "final.ckpt")
        return losses

    # -- persistence ------------------------------------------------------

    def _meta(self) -> dict[str, str]:
        return {
            "train.iteration": str(self.iteration),
            "train.cursor": str(self._cursor),
            "train.rng": json.dumps(self._rng.bit_generator.state, separators=(",", ":")),
        }

    def save(self, path) -> None:
        extra = {f"{VELOCITY_PREFIX}{n}": v for n, v in zip(self.params.names(), self.state.velocity)}
        extra["train.order"] = self._order.astype(np.float64)
        save_checkpoint(self.params, self.config, path, meta=self._meta(), extra=extra)

    @classmethod
    def resume(cls, path, settings: TrainSettings) -> "Trainer":
        """Continue a run from a checkpoint written by :meth:`save`."""
        params, config = load_checkpoint(path)
        meta, arrays = read_checkpoint(path)
        trainer = cls(config, settings, params)
        for i, name in enumerate(params.names()):
            key = VELOCITY_PREFIX + name
            if key in arrays:
                trainer.state.velocity[i] = arrays[key].astype(config.dtype)
        trainer.iteration = int(meta.get("train.iteration", 0))
        if "train.rng" in meta:
            trainer._rng.bit_generator.state = json.loads(meta["train.rng"])
            trainer._order = arrays["train.order"].astype(np.int64)
            trainer._cursor = int(meta["train.cursor"])
        return trainer


def predict_probs(
    params: Parameters, config: ModelConfig, queries: np.ndarray, targets: np.ndarray, batch_size: int = 16
) -> np.ndarray:
    """Probability maps for paired uint8 query/target batches (no tape, no gradients)."""
    out = np.empty((len(targets), config.target_size, config.target_size), dtype=config.dtype)
    for a in range(0, len(targets), batch_size):
        b = min(a + batch_size, len(targets))
        prob = predict_mask(as_input(queries[a:b], config), as_input(targets[a:b], config), params, config)
        out[a:b] = prob.data
    return out


def kshot_queries(ds: DatasetFile, k: int) -> list[list[int]]:
    """For each record, indices of the records whose queries form its k-shot set.

    The record's own query comes first, followed by the next query images of
    the same class (cyclically by image index), skipping the target image.
    """
    by_key: dict[tuple[int, int], int] = {}
    images: dict[int, set[int]] = {}
    cids = np.asarray(ds.records["class_id"])
    qis = np.asarray(ds.records["query_image"])
    tis = np.asarray(ds.records["target_image"])
    for i, (c, q) in enumerate(zip(cids, qis)):
        by_key.setdefault((int(c), int(q)), i)
        images.setdefault(int(c), set()).add(int(q))
    out = []
    for c, q, t in zip(cids, qis, tis):
        avail = sorted(images[int(c)] - {int(t)})
        if k > len(avail):
            raise ValueError(f"k={k} exceeds the {len(avail)} query samples available for class {int(c)}")
        start = avail.index(int(q))
        chosen = [avail[(start + i) % len(avail)] for i in range(k)]
        out.append([by_key[(int(c), j)] for j in chosen])
    return out


def evaluate_dataset(
    params: Parameters,
    config: ModelConfig,
    ds: DatasetFile,
    k: int = 1,
    threshold: float = 0.5,
    iou_thr: float = 0.5,
    use_global_box: bool = False,
    batch_size: int = 16,
    return_masks: bool = False,
):
    """Run the model over every record and score it.

    With ``k > 1`` each target is predicted once per query in its k-shot set;
    the binary masks are OR-ed and the per-pixel max probability is used to
    score the resulting components.
    """
    check_dims(ds, config)
    queries = np.asarray(ds.records["query"])
    targets = np.asarray(ds.records["target"])
    masks = np.asarray(ds.records["mask"])
    cids = np.asarray(ds.records["class_id"])
    groups = kshot_queries(ds, k)
    shots = [np.array([g[s] for g in groups]) for s in range(k)]
    probs = [predict_probs(params, config, queries[sel], targets, batch_size) for sel in shots]
    binaries = [metrics.kshot_union([metrics.binarize(p[i], threshold) for p in probs]) for i in range(len(ds))]
    combined = np.max(np.stack(probs), axis=0) if k > 1 else probs[0]
    report = metrics.evaluate(
        list(combined),
        list(masks),
        list(cids),
        known_classes=ds.class_ids(),
        threshold=threshold,
        iou_thr=iou_thr,
        use_global_box=use_global_box,
        binaries=binaries,
    )
    if return_masks:
        return report, np.stack(binaries)
    return report


def baseline_all_foreground(ds: DatasetFile, use_global_box: bool = False) -> metrics.EvalReport:
    """Report for a predictor that marks every pixel as logo."""
    masks = np.asarray(ds.records["mask"])
    probs = [np.ones(m.shape) for m in masks]
    return metrics.evaluate(probs, list(masks), list(ds.records["class_id"]), ds.class_ids(), use_global_box=use_global_box)
