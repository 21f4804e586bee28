"""Dataset manifests, class weighting, the training loop, and evaluation."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError, TrainingError, WedgenetError
from .neighbors import SpatialIndex
from .network import ModelParams, forward, loss_and_grads, save_checkpoint
from .optim import AdamState, adam_step
from .pointcloud import normalize, read_ply, subsample

__all__ = [
    "DatasetEntry",
    "LabeledDataset",
    "ClassWeights",
    "EvalReport",
    "TrainResult",
    "load_manifest",
    "save_manifest",
    "inverse_sample_weights",
    "lr_schedule",
    "train",
    "evaluate",
    "f1_scores",
    "format_loss_log",
]

logger = logging.getLogger(__name__)


@dataclass
class DatasetEntry:
    path: str          # relative to the dataset root, forward slashes
    class_index: int
    split: str         # "train" or "test"


@dataclass
class LabeledDataset:
    root: Path
    entries: list[DatasetEntry]
    class_names: list[str]

    def __post_init__(self):
        self.root = Path(self.root)
        n_classes = len(self.class_names)
        seen = {}
        for e in self.entries:
            if not 0 <= e.class_index < n_classes:
                raise InputError(
                    f"entry '{e.path}' has class index {e.class_index} but only "
                    f"{n_classes} classes are named"
                )
            if e.split not in ("train", "test"):
                raise InputError(f"entry '{e.path}' has unknown split '{e.split}'")
            if e.path in seen and seen[e.path] != e.split:
                raise InputError(f"'{e.path}' appears in both train and test splits")
            seen[e.path] = e.split

    def split_entries(self, split):
        return [e for e in self.entries if e.split == split]

    def resolve(self, entry):
        return self.root / entry.path


def load_manifest(path):
    """Read a `path<TAB>class<TAB>split` manifest; classes sorted by name."""
    path = Path(path)
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, "
                    f"got {len(parts)}"
                )
            rel, cls, split = parts
            if split not in ("train", "test"):
                raise ParseError(f"{path}:{lineno}: unknown split '{split}'")
            rows.append((rel, cls, split))
    if not rows:
        raise InputError(f"manifest {path} is empty")
    class_names = sorted({cls for _, cls, _ in rows})
    index_of = {c: i for i, c in enumerate(class_names)}
    entries = [
        DatasetEntry(path=rel, class_index=index_of[cls], split=split)
        for rel, cls, split in rows
    ]
    return LabeledDataset(root=path.parent, entries=entries, class_names=class_names)


def save_manifest(dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in dataset.entries:
            fh.write(f"{e.path}\t{dataset.class_names[e.class_index]}\t{e.split}\n")


@dataclass
class ClassWeights:
    weights: np.ndarray  # per-class, mean exactly one

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if (w <= 0).any():
            raise InputError("class weights must be positive")
        self.weights = w


def inverse_sample_weights(counts):
    """Reciprocal sample counts normalized so the weights average to one."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise InputError(f"counts must be a nonempty vector, got shape {counts.shape}")
    if (counts < 1).any():
        raise InputError("every class needs at least one sample")
    inv = 1.0 / counts
    return ClassWeights(weights=counts.size * inv / inv.sum())


def lr_schedule(epoch, total_epochs, lr_start=1e-3, lr_end=1e-7):
    """Geometric decay from lr_start to lr_end over the whole run.

    Endpoints are returned exactly; interior epochs interpolate as
    lr_start * (lr_end / lr_start) ** (epoch / (total_epochs - 1)).
    """
    epoch, total_epochs = int(epoch), int(total_epochs)
    if total_epochs < 2:
        raise InputError(f"need at least 2 epochs, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise InputError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch == 0:
        return lr_start
    if epoch == total_epochs - 1:
        return lr_end
    return lr_start * (lr_end / lr_start) ** (epoch / (total_epochs - 1))


def _stable_hash(text):
    return int.from_bytes(
        hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little"
    )


@dataclass
class _Sample:
    points: np.ndarray        # post-subsample, post-normalize
    index: SpatialIndex
    class_index: int
    path: str


def _load_sample(dataset, entry, config):
    cloud = read_ply(dataset.resolve(entry))
    cloud = subsample(cloud, config.n_points, seed=_stable_hash(entry.path))
    pts = normalize(cloud.points) if config.normalize_input else cloud.points
    index = SpatialIndex(pts)
    index.precompute(min(2 * config.pool, index.n - 1))
    return _Sample(
        points=pts, index=index, class_index=entry.class_index, path=entry.path
    )


@dataclass
class TrainResult:
    params: ModelParams                 # best-by-train-loss parameters
    loss_log: list                      # (epoch, lr, mean_loss) per epoch
    best_epoch: int
    final_params: ModelParams = field(repr=False, default=None)


def format_loss_log(loss_log):
    """One line per epoch: ``epoch<TAB>lr<TAB>mean_loss``."""
    return "".join(
        f"{epoch}\t{lr:.9g}\t{loss:.9g}\n" for epoch, lr, loss in loss_log
    )


def train(
    dataset,
    config,
    epochs=200,
    seed=0,
    lr_start=1e-3,
    lr_end=1e-7,
    out_dir=None,
    init_params=None,
):
    """Batch-size-one training with inverse-count class weights.

    Each epoch shuffles the training entries with a seeded permutation,
    steps ADAM per sample at the epoch's learning rate, appends one loss
    line, and checkpoints. Returns the parameters of the epoch with the
    best mean training loss.
    """
    config.validate()
    if epochs < 2:
        raise InputError(f"need at least 2 epochs, got {epochs}")
    train_entries = dataset.split_entries("train")
    if not train_entries:
        raise InputError("training split is empty")

    samples = []
    skipped = 0
    for entry in train_entries:
        try:
            samples.append(_load_sample(dataset, entry, config))
        except (WedgenetError, OSError) as exc:
            skipped += 1
            logger.warning("skipping unreadable cloud '%s': %s", entry.path, exc)
    if skipped > 0.1 * len(train_entries):
        raise TrainingError(
            f"{skipped} of {len(train_entries)} training clouds unreadable "
            f"(over the 10% tolerance)"
        )
    if len(dataset.class_names) < 2:
        raise InputError("dataset must name at least 2 classes")
    present = sorted({s.class_index for s in samples})
    if len(present) < 2:
        # Legal for overfit/debug runs on a handful of clouds, but the
        # classifier can't learn a boundary from one class.
        logger.warning(
            "training split contains only %d class(es); expected 2 or more",
            len(present),
        )

    counts = np.array([sum(1 for s in samples if s.class_index == c) for c in present])
    weights = inverse_sample_weights(counts).weights
    weight_of = {c: w for c, w in zip(present, weights)}

    params = (init_params or ModelParams.initialize(config, seed=seed)).copy()
    state = AdamState.for_params(params.arrays)
    loss_log = []
    best_loss = np.inf
    best_epoch = -1
    best_params = params.copy()

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(epochs):
        lr = lr_schedule(epoch, epochs, lr_start, lr_end)
        order = np.random.default_rng(
            np.random.SeedSequence([seed & 0x7FFFFFFFFFFFFFFF, epoch, 0xE0])
        ).permutation(len(samples))
        total = 0.0
        for position, sample_id in enumerate(order):
            sample = samples[sample_id]
            # graphs are a stable property of the cloud (same seed evaluate
            # uses), so the optimizer sees each sample through the same
            # neighbor structure every epoch; only the dropout mask varies
            # per pass
            mask_seed = np.random.SeedSequence(
                [seed & 0x7FFFFFFFFFFFFFFF, epoch, position, 0x51]
            ).generate_state(1, np.uint64)[0]
            cloud_like = _PreparedCloud(sample.points)
            loss, grads = loss_and_grads(
                params,
                cloud_like,
                sample.class_index,
                weight_of[sample.class_index],
                config,
                seed=_stable_hash(sample.path + "#graph"),
                index=sample.index,
                dropout_seed=int(mask_seed),
            )
            adam_step(params.arrays, grads, state, lr)
            total += loss
        mean_loss = total / len(samples)
        loss_log.append((epoch, lr, mean_loss))
        logger.info("epoch %d lr %.3g mean loss %.6f", epoch, lr, mean_loss)
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint_last.ckpt", params, config)
        if mean_loss < best_loss:
            best_loss = mean_loss
            best_epoch = epoch
            best_params = params.copy()
            if out_dir is not None:
                save_checkpoint(out_dir / "checkpoint_best.ckpt", params, config)

    return TrainResult(
        params=best_params,
        loss_log=loss_log,
        best_epoch=best_epoch,
        final_params=params,
    )


class _PreparedCloud:
    """Duck-typed stand-in for PointCloud when points are already prepared."""

    def __init__(self, points):
        self.points = points


def f1_scores(confusion):
    """Per-class F1 and macro F1 from a (true x predicted) count matrix.

    F1 of a class is 0 when precision + recall is 0.
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    c = confusion.shape[0]
    if confusion.shape != (c, c):
        raise InputError(f"confusion matrix must be square, got {confusion.shape}")
    per_class = np.zeros(c)
    for i in range(c):
        tp = confusion[i, i]
        pred = confusion[:, i].sum()
        true = confusion[i, :].sum()
        precision = tp / pred if pred > 0 else 0.0
        recall = tp / true if true > 0 else 0.0
        if precision + recall > 0:
            per_class[i] = 2 * precision * recall / (precision + recall)
    return per_class, float(per_class.mean())


@dataclass
class EvalReport:
    confusion: np.ndarray      # (C, C) counts, rows true, columns predicted
    per_class_f1: np.ndarray
    macro_f1: float
    class_names: list

    def to_text(self):
        """Key-value lines plus the confusion grid; parseable and diffable."""
        lines = ["classes\t" + "\t".join(self.class_names)]
        lines.append(f"samples\t{int(self.confusion.sum())}")
        lines.append(f"macro_f1\t{self.macro_f1:.6f}")
        for name, score in zip(self.class_names, self.per_class_f1):
            lines.append(f"f1\t{name}\t{score:.6f}")
        for name, row in zip(self.class_names, self.confusion):
            cells = "\t".join(str(int(v)) for v in row)
            lines.append(f"confusion\t{name}\t{cells}")
        return "\n".join(lines) + "\n"


def evaluate(params, dataset, config, split="test"):
    """Eval-mode predictions over one split; per-cloud seeds come from the
    entry path so repeated calls agree exactly."""
    config.validate()
    entries = dataset.split_entries(split)
    if not entries:
        raise InputError(f"{split} split is empty")
    c = len(dataset.class_names)
    confusion = np.zeros((c, c), dtype=np.int64)
    for entry in entries:
        sample = _load_sample(dataset, entry, config)
        trace = forward(
            params,
            _PreparedCloud(sample.points),
            config,
            mode="eval",
            seed=_stable_hash(entry.path + "#graph"),
            index=sample.index,
        )
        pred = int(np.argmax(trace.probabilities))
        confusion[entry.class_index, pred] += 1
    per_class, macro = f1_scores(confusion)
    return EvalReport(
        confusion=confusion,
        per_class_f1=per_class,
        macro_f1=macro,
        class_names=list(dataset.class_names),
    )
