"""Transfer loading, the two-stage fine-tuning schedule, and checkpoint lineage.

Stage 1 trains only the segmentation head (every name outside the ``head.``
prefix is frozen) at the base learning rate; stage 2 unfreezes everything at
exactly one tenth of that rate. Each stage stops when the validation loss has
not improved relatively by min_delta for `patience` consecutive epochs, and
the best-validation weights are restored at stage end. Checkpoints carry the
model config, every parameter and batchnorm buffer bit-exactly, the lineage
of training events, and per-stage histories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as mt
from . import tensorcore as tc
from .errors import CompatibilityError, ConfigError, DataError
from .geoingest import DatasetManifest, load_tile, read_world_file, stream
from .manet import Manet, ManetConfig, config_from_text, config_to_text

HEAD_PREFIX = "head."

SOURCE_TOKENS = {
    "BING": ("Bing", ("BING",)),
    "CORONA": ("CORONA", ("CORONA",)),
    "BOTH": ("BingCORONA", ("BING", "CORONA")),
    # extension beyond the published registry: pure desk-scale synthetic runs
    "SYNTHETIC": ("Synthetic", ("SYNTHETIC",)),
}


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 15
    patience: int = 5
    min_delta: float = 1e-4
    dice_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (self.base_lr > 0):
            raise ConfigError(f"train: base_lr must be positive, got {self.base_lr}")
        if self.patience < 1:
            raise ConfigError(f"train: patience must be >= 1, got {self.patience}")
        if not (0.0 <= self.dice_weight <= 1.0):
            raise ConfigError(f"train: dice_weight {self.dice_weight} outside [0,1]")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("train: batch_size and max_epochs must be >= 1")


@dataclass(frozen=True)
class StagePlan:
    name: str
    lr: float
    frozen: frozenset


def stage_plans(registry_names, config: TrainConfig):
    head = frozenset(n for n in registry_names if n.startswith(HEAD_PREFIX))
    if not head:
        raise ConfigError(f"train: registry has no {HEAD_PREFIX!r} parameters to train in stage 1")
    deep = frozenset(n for n in registry_names if not n.startswith(HEAD_PREFIX))
    return (
        StagePlan(name="stage1", lr=config.base_lr, frozen=deep),
        StagePlan(name="stage2", lr=config.base_lr / 10.0, frozen=frozenset()),
    )


# ---------------------------------------------------------------------------
# loss


def loss(pred, truth, dice_weight: float = 0.0) -> tc.Tensor:
    """(1-w)*mean pixel BCE + w*(1 - soft Dice), as a differentiable scalar."""
    if not (0.0 <= dice_weight <= 1.0):
        raise ConfigError(f"loss: dice_weight {dice_weight} outside [0,1]")
    p = tc.as_tensor(pred)
    t = tc.Tensor(np.asarray(truth, dtype=np.float64))
    if p.shape != t.shape:
        raise ConfigError(f"loss: pred {p.shape} != truth {t.shape}")
    pc = tc.clip(p, 1e-12, 1.0 - 1e-12)
    one = tc.Tensor(1.0)
    bce = -tc.tmean(tc.add(tc.mul(t, tc.log(pc)), tc.mul(tc.sub(one, t), tc.log(tc.sub(one, pc)))))
    if dice_weight == 0.0:
        return bce
    eps = tc.Tensor(1e-6)
    inter = tc.tsum(tc.mul(p, t))
    dice = tc.div(tc.add(tc.mul(tc.Tensor(2.0), inter), eps), tc.add(tc.add(tc.tsum(p), tc.tsum(t)), eps))
    return tc.add(tc.mul(tc.Tensor(1.0 - dice_weight), bce), tc.mul(tc.Tensor(dice_weight), tc.sub(one, dice)))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive first/second-moment optimizer over a named parameter subset."""

    def __init__(self, params: dict, lr: float, config: TrainConfig):
        self.params = dict(params)
        self.lr = lr
        self.b1 = config.beta1
        self.b2 = config.beta2
        self.eps = config.eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = {n: 0 for n in self.params}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            mhat = self.m[name] / (1.0 - self.b1**t)
            vhat = self.v[name] / (1.0 - self.b2**t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# early stopping + history


class EarlyStopper:
    """Stop after `patience` epochs without a relative val-loss improvement."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = None
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def observe(self, val_loss: float) -> bool:
        self.epoch += 1
        if self.best is None or val_loss < self.best * (1.0 - self.min_delta):
            self.best = val_loss
            self.best_epoch = self.epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class TrainHistory:
    lr: float
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_iou: list = field(default_factory=list)
    val_biou: list = field(default_factory=list)
    val_mcc: list = field(default_factory=list)
    best_epoch: int = 0

    def record(self, epoch, train_loss, val_loss, report: mt.MetricsReport) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.val_iou.append(report.iou)
        self.val_biou.append(report.biou)
        self.val_mcc.append(report.mcc)

    def to_lines(self) -> str:
        lines = ["epoch\ttrain_loss\tval_loss\tval_IoU\tval_bIoU\tval_MCC"]
        for k in range(len(self.epochs)):
            lines.append(
                "\t".join(
                    str(v)
                    for v in (
                        self.epochs[k],
                        self.train_loss[k],
                        self.val_loss[k],
                        self.val_iou[k],
                        self.val_biou[k],
                        self.val_mcc[k],
                    )
                )
            )
        lines.append(f"# best_epoch={self.best_epoch}\tlr={self.lr}")
        return "\n".join(lines) + "\n"

    def serialize(self) -> str:
        rows = "|".join(
            ",".join(
                str(v)
                for v in (
                    self.epochs[k],
                    self.train_loss[k],
                    self.val_loss[k],
                    self.val_iou[k],
                    self.val_biou[k],
                    self.val_mcc[k],
                )
            )
            for k in range(len(self.epochs))
        )
        return f"{self.lr};{self.best_epoch};{rows}"

    @classmethod
    def deserialize(cls, text: str) -> "TrainHistory":
        lr_s, best_s, rows = text.split(";", 2)
        hist = cls(lr=float(lr_s), best_epoch=int(best_s))
        if rows:
            for row in rows.split("|"):
                e, tl, vl, vi, vb, vm = row.split(",")
                hist.epochs.append(int(e))
                hist.train_loss.append(float(tl))
                hist.val_loss.append(float(vl))
                hist.val_iou.append(float(vi))
                hist.val_biou.append(float(vb))
                hist.val_mcc.append(float(vm))
        return hist


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class TrainSample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    georef: object
    label: bool
    source: str


def load_samples(manifest: DatasetManifest, base_dir, split: str | None = None, sources=None):
    base = Path(base_dir)
    out = []
    for e in manifest.select(split=split, sources=sources):
        image, mask = load_tile(e, base)
        wld = (base / e.image_path).with_suffix(".wld")
        georef = read_world_file(wld)
        out.append(TrainSample(id=e.id, image=image, mask=mask, georef=georef, label=e.label, source=e.source))
    return out


# ---------------------------------------------------------------------------
# training loops


def train_epoch(
    model: Manet,
    samples,
    lr: float,
    frozen,
    optimizer: Adam,
    config: TrainConfig,
    rng: np.random.Generator,
    augment_fn=None,
    epoch: int = 0,
) -> float:
    """One pass over the split: deterministic shuffle, one Adam step per batch."""
    if not samples:
        raise DataError("train_epoch: empty split")
    registry = tc.param_registry(model)
    order = rng.permutation(len(samples))
    model.train_mode = True
    total = 0.0
    seen = 0
    for start in range(0, len(order), config.batch_size):
        idxs = order[start : start + config.batch_size]
        images, masks = [], []
        for i in idxs:
            s = samples[i]
            img, msk = s.image, s.mask
            if augment_fn is not None:
                img, msk = augment_fn(s.id, epoch, img, msk)
            images.append(img)
            masks.append(msk)
        x = np.stack(images)
        t = np.stack(masks).astype(np.float64)
        tc.zero_grads(registry.values())
        pred = model.forward(x)
        batch_loss = loss(pred, t, config.dice_weight)
        if lr > 0.0 and len(frozen) < len(registry):
            tc.backward(batch_loss)
            optimizer.step()
        total += batch_loss.item() * len(idxs)
        seen += len(idxs)
    return total / seen


def evaluate_split(model: Manet, samples, config: TrainConfig, threshold: float = 0.5, min_area_m2: float = 2500.0):
    """Eval-mode forward over a split: (mean loss, MetricsReport)."""
    if not samples:
        raise DataError("evaluate_split: empty split")
    model.train_mode = False
    total = 0.0
    items = []
    for start in range(0, len(samples), 16):
        chunk = samples[start : start + 16]
        x = np.stack([s.image for s in chunk])
        t = np.stack([s.mask for s in chunk]).astype(np.float64)
        pred = model.forward(x)
        total += loss(pred, t, config.dice_weight).item() * len(chunk)
        for s, grid in zip(chunk, pred.data):
            items.append((s.id, grid, s.mask, s.georef, s.label))
    report = mt.evaluate_predictions(items, threshold=threshold, min_area_m2=min_area_m2)
    return total / len(samples), report


def _snapshot(model: Manet) -> dict:
    return {name: arr.copy() for name, arr in tc.state_arrays(model).items()}


def _restore(model: Manet, saved: dict) -> None:
    for name, arr in tc.state_arrays(model).items():
        np.copyto(arr, saved[name])


def two_stage_finetune(model: Manet, train_samples, val_samples, config: TrainConfig, augment_fn=None):
    """Head-only stage at base_lr, then full model at base_lr/10, each early-stopped."""
    if not train_samples or not val_samples:
        raise DataError("two_stage_finetune: TRAIN and VAL splits must be nonempty")
    registry = tc.param_registry(model)
    histories = {}
    for plan in stage_plans(registry.keys(), config):
        optimizer = Adam({n: p for n, p in registry.items() if n not in plan.frozen}, plan.lr, config)
        stopper = EarlyStopper(config.patience, config.min_delta)
        history = TrainHistory(lr=plan.lr)
        best_state = _snapshot(model)
        for epoch in range(1, config.max_epochs + 1):
            rng = stream(config.seed, "train", plan.name, epoch)
            tl = train_epoch(
                model,
                train_samples,
                plan.lr,
                plan.frozen,
                optimizer,
                config,
                rng,
                augment_fn=augment_fn,
                epoch=epoch,
            )
            vl, report = evaluate_split(model, val_samples, config)
            history.record(epoch, tl, vl, report)
            if stopper.observe(vl):
                best_state = _snapshot(model)
            if stopper.should_stop:
                break
        _restore(model, best_state)
        history.best_epoch = stopper.best_epoch
        histories[plan.name] = history
    return model, histories


# ---------------------------------------------------------------------------
# checkpoints with lineage


@dataclass
class CheckpointData:
    config: ManetConfig
    arrays: dict
    lineage: list
    histories: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.lineage[-1] if self.lineage else "untrained"


def save_checkpoint(path, model: Manet, lineage, histories=None, seed: int = 0, extra: dict | None = None) -> None:
    lines = [f"lineage={','.join(lineage)}", f"seed={seed}"]
    for key, val in sorted((extra or {}).items()):
        lines.append(f"{key}={val}")
    for line in config_to_text(model.config).strip().splitlines():
        lines.append(f"model.{line}")
    for stage, hist in (histories or {}).items():
        lines.append(f"history.{stage}={hist.serialize()}")
    tc.write_checkpoint(path, "\n".join(lines) + "\n", tc.state_arrays(model))


def load_checkpoint(path) -> CheckpointData:
    config_text, arrays = tc.read_checkpoint(path)
    lineage: list = []
    seed = 0
    histories: dict = {}
    model_lines = []
    extra = {}
    for raw in config_text.splitlines():
        line = raw.strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        if key == "lineage":
            lineage = [t for t in val.split(",") if t]
        elif key == "seed":
            seed = int(val)
        elif key.startswith("model."):
            model_lines.append(f"{key[6:]}={val}")
        elif key.startswith("history."):
            histories[key[8:]] = TrainHistory.deserialize(val)
        else:
            extra[key] = val
    config = config_from_text("\n".join(model_lines) + "\n")
    return CheckpointData(config=config, arrays=arrays, lineage=lineage, histories=histories, seed=seed, extra=extra)


def transfer_load(checkpoint: CheckpointData, config: ManetConfig | None = None) -> Manet:
    """Restore parameters and batchnorm buffers bit-exactly into a fresh model."""
    config = config or checkpoint.config
    model = Manet(config, seed=checkpoint.seed)
    current = tc.state_arrays(model)
    missing = sorted(set(current) - set(checkpoint.arrays))
    surplus = sorted(set(checkpoint.arrays) - set(current))
    bad_shape = sorted(
        n for n in set(current) & set(checkpoint.arrays) if current[n].shape != checkpoint.arrays[n].shape
    )
    if missing or surplus or bad_shape:
        raise CompatibilityError(
            "transfer_load: registry mismatch"
            + (f"; missing from checkpoint: {missing}" if missing else "")
            + (f"; unexpected in checkpoint: {surplus}" if surplus else "")
            + (f"; shape mismatch: {bad_shape}" if bad_shape else "")
        )
    for name, arr in current.items():
        np.copyto(arr, checkpoint.arrays[name])
    return model


def run_registry(
    sources: str,
    base: CheckpointData | None,
    manifest: DatasetManifest,
    base_dir,
    model_config: ManetConfig | None = None,
    train_config: TrainConfig | None = None,
    augment_fn=None,
):
    """Filter by source, fine-tune, and name the result per the lineage scheme."""
    token = sources.upper()
    if token not in SOURCE_TOKENS:
        raise ConfigError(f"run_registry: sources must be one of {tuple(SOURCE_TOKENS)}, got {sources!r}")
    source_name, source_filter = SOURCE_TOKENS[token]
    train_config = train_config or TrainConfig()
    train_samples = load_samples(manifest, base_dir, "TRAIN", source_filter)
    val_samples = load_samples(manifest, base_dir, "VAL", source_filter)
    if not train_samples or not val_samples:
        raise DataError(f"run_registry: no {token} samples in TRAIN/VAL splits")
    if base is not None:
        model = transfer_load(base, model_config)
        lineage = list(base.lineage)
    else:
        if model_config is None:
            raise ConfigError("run_registry: a fresh run needs a model config")
        model = Manet(model_config, seed=train_config.seed)
        lineage = []
    model, histories = two_stage_finetune(model, train_samples, val_samples, train_config, augment_fn=augment_fn)
    lineage.append(f"{lineage[-1]}_{source_name}" if lineage else source_name)
    data = CheckpointData(
        config=model.config,
        arrays={n: a.copy() for n, a in tc.state_arrays(model).items()},
        lineage=lineage,
        histories=histories,
        seed=train_config.seed,
    )
    return model, data
