"""Training loop: gradient accumulation, Adam, validation, checkpoints.

One optimizer step is taken per logical batch. The batch is processed in
micro-batches whose gradients are summed and divided by the true sample
count, so the update equals a single full-batch step except that batch-norm
statistics are computed per micro-batch (a stated deviation, bounded memory
being the point). A trailing micro-batch of exactly one sample is folded
into its predecessor so batch statistics never come from a single image.

Everything random derives from the run seed through fixed namespaces:
shuffle order from (seed, 0, epoch), dropout from (seed, 1, epoch, batch,
micro). Resuming from the per-epoch checkpoint therefore reproduces the
original run bit for bit.

Outputs in the run directory:
  history_train.csv  one row per optimizer step: step, epoch, loss
  history_val.csv    one row per epoch: epoch, loss, accuracy, iou,
                     precision, recall
  last.ckpt          training checkpoint, written every epoch (resume point)
  best.ckpt          deployment checkpoint at the best validation loss
  model.ckpt         deployment checkpoint from the final epoch
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import (
    config_text,
    load_training_checkpoint,
    save_checkpoint,
    save_training_checkpoint,
)
from .data import DatasetIndex, batch_iter, load_index
from .errors import ConfigError, NonFiniteGradientError, TrainAbortedError
from .metrics import ConfusionCounts, MetricsReport, confusion, report
from .model import GraphConfig, ModelGraph, Variant, build_model, init_parameters, loss_fn
from .optim import adam_init, adam_step
from .seeding import derive_rng

TRAIN_CSV = "history_train.csv"
VAL_CSV = "history_val.csv"
LAST_CKPT = "last.ckpt"
BEST_CKPT = "best.ckpt"
FINAL_CKPT = "model.ckpt"


@dataclass
class TrainConfig:
    variant: Variant
    graph: GraphConfig
    index_path: Path
    out_dir: Path
    epochs: int = 10
    batch_size: int = 200
    micro_batch: int = 10
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    threshold: float = 0.5
    log_every: int = 1
    resume: bool = False
    quiet: bool = False

    def violations(self) -> list:
        out = []
        if self.epochs < 1:
            out.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not 1 <= self.micro_batch <= self.batch_size:
            out.append(
                f"micro_batch must be in [1, batch_size], got {self.micro_batch}"
            )
        if not (self.lr > 0 and math.isfinite(self.lr)):
            out.append(f"lr must be positive and finite, got {self.lr}")
        if not 0.0 <= self.threshold <= 1.0:
            out.append(f"threshold must be in [0, 1], got {self.threshold}")
        if self.log_every < 1:
            out.append(f"log_every must be >= 1, got {self.log_every}")
        return out


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)  # (step, epoch, loss)
    val: list = field(default_factory=list)    # (epoch, MetricsReport)


def _micro_slices(n: int, micro: int) -> list:
    """Slice bounds covering range(n); a trailing singleton joins its neighbor."""
    bounds = list(range(0, n, micro)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def _accumulate_batch(graph: ModelGraph, images, masks, lossf, cfg: TrainConfig,
                      epoch: int, batch_idx: int):
    """Forward/backward over micro-batches; returns (mean grads, mean loss)."""
    n = images.shape[0]
    acc = None
    loss_sum = 0.0
    for micro_idx, (lo, hi) in enumerate(_micro_slices(n, cfg.micro_batch)):
        rng = derive_rng(cfg.seed, 1, epoch, batch_idx, micro_idx)
        pred, cache = graph.forward(images[lo:hi], "train", rng=rng)
        loss, grad_pred = lossf(pred, masks[lo:hi])
        grads = graph.backward(cache, grad_pred)
        k = hi - lo
        loss_sum += loss * k
        if acc is None:
            acc = {name: g * k for name, g in grads.items()}
        else:
            for name, g in grads.items():
                acc[name] += g * k
        del cache
    mean_grads = {name: g / n for name, g in acc.items()}
    return mean_grads, loss_sum / n


def evaluate(graph: ModelGraph, index: DatasetIndex, split: str,
             threshold: float = 0.5, micro_batch: int = 10) -> MetricsReport:
    """Eval-mode forward over a whole split: mean loss + pooled confusion."""
    records = index.split_records(split)
    if not records:
        raise ConfigError(f"split {split!r} is empty in {index.root}")
    lossf = loss_fn(graph.config.loss)
    counts = ConfusionCounts()
    loss_sum = 0.0
    n = 0
    for images, masks in batch_iter(index, split, micro_batch, shuffle=False):
        pred, _ = graph.forward(images.astype(graph.dtype, copy=False), "eval")
        loss, _ = lossf(pred, masks.astype(pred.dtype, copy=False))
        k = images.shape[0]
        loss_sum += loss * k
        n += k
        counts = counts + confusion(pred, masks, threshold)
    return report(counts, loss_sum / n, split, samples=n)


def _train_meta(cfg: TrainConfig, epochs_done: int, step: int, best: float) -> dict:
    return {
        "epochs_done": epochs_done,
        "step": step,
        "best_val_loss": float(best),
        "train_seed": cfg.seed,
        "batch_size": cfg.batch_size,
        "micro_batch": cfg.micro_batch,
        "epochs": cfg.epochs,
        "threshold": float(cfg.threshold),
    }


def _open_csv(path: Path, header: str, append: bool):
    exists = path.is_file()
    fh = open(path, "a" if append and exists else "w", encoding="utf-8", newline="")
    if not (append and exists):
        fh.write(header + "\n")
        fh.flush()
    return fh


def train(cfg: TrainConfig):
    """Run the full regime; returns (graph, TrainHistory)."""
    problems = cfg.violations()
    if problems:
        raise ConfigError("; ".join(problems))
    index = load_index(cfg.index_path)
    n_train = len(index.split_records("train"))
    if n_train == 0:
        raise ConfigError(f"train split is empty in {index.root}")
    if not index.split_records("val"):
        raise ConfigError(f"val split is empty in {index.root}")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last_path = out / LAST_CKPT

    resuming = cfg.resume and last_path.is_file()
    if resuming:
        graph, adam, meta = load_training_checkpoint(last_path)
        want = config_text(cfg.variant, cfg.graph)
        have = config_text(graph.variant, graph.config)
        if want != have:
            raise ConfigError(
                f"{last_path} was trained with a different graph configuration; "
                "change the flags or start a fresh run directory"
            )
        start_epoch = int(meta["epochs_done"])
        step = int(meta["step"])
        best = float(meta["best_val_loss"])
        adam.lr = cfg.lr
    else:
        graph = build_model(cfg.variant, cfg.graph, dtype=np.float32)
        init_parameters(graph)
        adam = adam_init(graph.params, lr=cfg.lr, beta1=cfg.beta1,
                         beta2=cfg.beta2, eps=cfg.adam_eps)
        start_epoch, step, best = 0, 0, math.inf

    history = TrainHistory()
    if start_epoch >= cfg.epochs:
        if not cfg.quiet:
            print(f"nothing to do: {start_epoch} epochs already trained")
        return graph, history

    lossf = loss_fn(cfg.graph.loss)
    train_fh = _open_csv(out / TRAIN_CSV, "step,epoch,loss", append=resuming)
    val_fh = _open_csv(out / VAL_CSV, "epoch,loss,accuracy,iou,precision,recall",
                       append=resuming)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            batches = batch_iter(index, "train", cfg.batch_size,
                                 seed=cfg.seed, epoch=epoch)
            for batch_idx, (images, masks) in enumerate(batches):
                images = images.astype(graph.dtype, copy=False)
                masks = masks.astype(graph.dtype, copy=False)
                grads, loss = _accumulate_batch(
                    graph, images, masks, lossf, cfg, epoch, batch_idx
                )
                try:
                    adam_step(graph.params, grads, adam)
                except NonFiniteGradientError as exc:
                    raise TrainAbortedError(
                        f"optimizer step {step + 1} rejected: {exc}", step=step + 1
                    ) from exc
                step += 1
                history.steps.append((step, epoch, loss))
                train_fh.write(f"{step},{epoch},{loss!r}\n")
                train_fh.flush()
                if not cfg.quiet and step % cfg.log_every == 0:
                    print(f"step {step}  epoch {epoch}  loss {loss:.6f}", flush=True)

            val = evaluate(graph, index, "val", cfg.threshold, cfg.micro_batch)
            history.val.append((epoch, val))
            val_fh.write(
                f"{epoch},{val.loss!r},{val.accuracy!r},{val.iou!r},"
                f"{val.precision!r},{val.recall!r}\n"
            )
            val_fh.flush()
            if not cfg.quiet:
                print(
                    f"epoch {epoch}  val loss {val.loss:.6f}  iou {val.iou:.4f}",
                    flush=True,
                )
            if val.loss < best:
                best = val.loss
                save_checkpoint(graph, out / BEST_CKPT)
            save_training_checkpoint(
                graph, adam, _train_meta(cfg, epoch + 1, step, best), last_path
            )
    finally:
        train_fh.close()
        val_fh.close()

    save_checkpoint(graph, out / FINAL_CKPT)
    return graph, history
