"""SGD training with deep supervision, checkpointing, evaluation and diagnostics."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import info
from . import tensor as T
from .errors import ConfigError, DataError, GraphError, NumericError
from .formats import blob_text, read_checkpoint, text_blob, write_checkpoint
from .kvconfig import parse_bool, parse_kv
from .losses import LOSS_WEIGHTS, ClassGrouping, combined_objective, evaluate_masks
from .model import SNet, NetworkConfig, build, forward

LOG_HEADER = ("epoch", "loss", "bce_f", "dice_f", "bce", "dice", "lr", "eval_dice")


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    def state(self):
        out = {f"optim/velocity/{k}": v for k, v in self.velocity.items()}
        out["optim/step"] = np.array([self.step], dtype=np.uint32)
        return out

    def load_state(self, state):
        self.velocity = {k[len("optim/velocity/"):]: v.copy() for k, v in state.items()
                         if k.startswith("optim/velocity/")}
        self.step = int(state["optim/step"][0]) if "optim/step" in state else 0


def sgd_step(params, state: OptimState, lr=None):
    """g' = g + wd*w; v = mu*v + g'; w -= lr*v, for every named parameter."""
    lr = state.lr if lr is None else lr
    for name, p in params.items():
        if p.grad is None:
            raise GraphError(f"parameter {name} has no gradient")
        g = p.grad + state.weight_decay * p.data
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        state.velocity[name] = v
        p.data = (p.data - lr * v).astype(p.data.dtype)
    state.step += 1


_RUN_KEYS = {
    "epochs": int, "batch_size": int, "seed": int, "data": str, "train_split": str,
    "eval_split": str, "eval_every": int, "lr": float, "momentum": float,
    "weight_decay": float, "schedule": str, "poly_power": float,
    "deep_supervision": parse_bool, "augment": parse_bool, "synth_count": int,
    "synth_spec": str, "grouping": str, "hd_percentile": int, "eval_limit": int,
}


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 40
    batch_size: int = 4
    seed: int = 0
    data: str = ""
    train_split: str = "train"
    eval_split: str = "val"
    eval_every: int = 1
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "constant"
    poly_power: float = 0.9
    deep_supervision: bool = True
    augment: bool = False
    synth_count: int = 0
    synth_spec: str = ""
    grouping: str = ""
    hd_percentile: int = 95
    eval_limit: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.schedule not in ("constant", "poly"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")

    @classmethod
    def from_text(cls, text, base_dir=None):
        kv = parse_kv(text)
        net_names = {f.name for f in dataclasses.fields(NetworkConfig)}
        unknown = set(kv) - set(_RUN_KEYS) - net_names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, cast in _RUN_KEYS.items():
            if key in kv:
                try:
                    kwargs[key] = cast(kv[key])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {kv[key]!r}") from exc
        for key in ("data", "synth_spec", "grouping"):
            if kwargs.get(key) and base_dir is not None:
                kwargs[key] = str(Path(base_dir) / kwargs[key])
        kwargs["network"] = NetworkConfig.from_mapping({k: v for k, v in kv.items()
                                                        if k in net_names})
        return cls(**kwargs)

    def to_text(self):
        lines = [f"{k}={getattr(self, k)}" for k in _RUN_KEYS]
        return "\n".join(lines) + "\n" + self.network.to_text()

    @property
    def loss_weights(self):
        if self.deep_supervision:
            return LOSS_WEIGHTS
        return (0.0, 0.0) + LOSS_WEIGHTS[2:]

    def lr_at(self, step, total_steps):
        if self.schedule == "constant":
            return self.lr
        return self.lr * (1.0 - min(step, total_steps) / max(total_steps, 1)) ** self.poly_power


def load_run_dataset(run: RunConfig):
    if run.data:
        return D.load_dataset(run.data)
    if run.synth_count > 0:
        spec = D.SynthSpec()
        if run.synth_spec:
            spec = D.SynthSpec.from_text(Path(run.synth_spec).read_text())
        return D.synth_dataset(spec, run.synth_count)
    raise ConfigError("config names neither a data directory nor synth_count")


def load_grouping(path, num_classes):
    if path:
        grouping = ClassGrouping.from_text(Path(path).read_text())
    else:
        grouping = ClassGrouping.default(num_classes)
    grouping.check(num_classes)
    return grouping


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _augment_batch(images, labels, seed, epoch, indices):
    imgs, lbls = [], []
    for img, lbl, idx in zip(images, labels, indices):
        rng = np.random.default_rng([seed, epoch, int(idx), 1])
        k = int(rng.integers(0, len(D.AUGMENT_OPS) + 1))
        s = D.SegSample(img, lbl)
        if k < len(D.AUGMENT_OPS) and (k < 2 or img.shape[1] == img.shape[2]):
            s = D.augment(s, D.AUGMENT_OPS[k])
        imgs.append(s.image)
        lbls.append(s.label)
    return np.stack(imgs), np.stack(lbls)


def train_step(model: SNet, opt: OptimState, images, labels, weights=LOSS_WEIGHTS, lr=None):
    """One forward/backward/update; returns ``(loss, parts)`` as floats."""
    model.params.zero_grad()
    y_hat, y_hat_f, _ = forward(model, images, training=True)
    loss, parts = combined_objective(y_hat, y_hat_f, labels, weights)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    loss.backward()
    sgd_step(model.params.params, opt, lr)
    return value, parts


def _checkpoint_state(model, opt, run, epoch, best):
    state = model.state()
    state.update(opt.state())
    state["meta/epoch"] = np.array([epoch], dtype=np.uint32)
    state["meta/best_eval"] = np.array([best], dtype=np.float64)
    state["meta/run"] = text_blob(run.to_text())
    return state


def load_model(checkpoint):
    if isinstance(checkpoint, SNet):
        return checkpoint
    return SNet.from_state(read_checkpoint(checkpoint))


@dataclass
class TrainResult:
    model: SNet
    log: list
    out_dir: Path
    best_eval: float


def train(run: RunConfig, out_dir, dataset=None, resume=None, verbose=False):
    """Train per ``run``; writes ``log.csv``, ``last.snck`` and ``best.snck``.

    ``last.snck`` is rewritten after every completed epoch, so a numeric
    failure leaves the last good state on disk.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset if dataset is not None else load_run_dataset(run)
    if ds.num_classes != run.network.num_classes:
        raise ConfigError(f"dataset has {ds.num_classes} classes, network expects "
                          f"{run.network.num_classes}")
    train_set = ds.split(run.train_split)
    if len(train_set) == 0:
        raise DataError(f"no samples in split {run.train_split!r}")
    eval_set = ds.split(run.eval_split)
    if run.eval_limit:
        eval_set = D.Dataset(eval_set.samples[:run.eval_limit], eval_set.num_classes)
    grouping = load_grouping(run.grouping, ds.num_classes)

    model = build(run.network, run.seed)
    opt = OptimState(run.lr, run.momentum, run.weight_decay)
    start, best = 0, -math.inf
    log = []
    if resume is not None:
        state = read_checkpoint(resume)
        model = SNet.from_state(state)
        if model.config != run.network:
            raise ConfigError("resume checkpoint was trained with a different network config")
        opt.load_state(state)
        start = int(state["meta/epoch"][0])
        best = float(state["meta/best_eval"][0])
        log_path = out / "log.csv"
        if log_path.is_file():
            with log_path.open() as fh:
                log = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= start]

    n = len(train_set)
    steps_per_epoch = math.ceil(n / run.batch_size)
    total = steps_per_epoch * run.epochs
    for epoch in range(start, run.epochs):
        order = D.epoch_order(n, run.seed, epoch)
        sums = {"loss": 0.0, "bce_f": 0.0, "dice_f": 0.0, "bce": 0.0, "dice": 0.0}
        lr = run.lr_at(opt.step, total)
        for b in range(steps_per_epoch):
            idx = order[b * run.batch_size:(b + 1) * run.batch_size]
            images, labels = train_set.arrays(idx)
            if run.augment:
                images, labels = _augment_batch(images, labels, run.seed, epoch, idx)
            lr = run.lr_at(opt.step, total)
            try:
                value, parts = train_step(model, opt, images, labels, run.loss_weights, lr)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1}, step {b + 1}: {exc}; last good "
                                   f"checkpoint kept at {out / 'last.snck'}") from exc
            sums["loss"] += value
            for k, v in parts.items():
                sums[k] += v
        row = {k: v / steps_per_epoch for k, v in sums.items()}
        row["epoch"] = epoch + 1
        row["lr"] = lr
        row["eval_dice"] = math.nan
        if run.eval_every and len(eval_set) and ((epoch + 1) % run.eval_every == 0
                                                 or epoch + 1 == run.epochs):
            report = evaluate(model, eval_set, grouping, run.hd_percentile)
            row["eval_dice"] = report.mean_foreground_dice
            if row["eval_dice"] > best:
                best = row["eval_dice"]
                write_checkpoint(out / "best.snck",
                                 _checkpoint_state(model, opt, run, epoch + 1, best))
        write_checkpoint(out / "last.snck", _checkpoint_state(model, opt, run, epoch + 1, best))
        log.append(row)
        _write_log(out / "log.csv", log)
        if verbose:
            print(f"epoch {epoch + 1}/{run.epochs} loss={row['loss']:.4f} "
                  f"eval_dice={row['eval_dice']:.4f}", flush=True)
    return TrainResult(model, log, out, best)


def _write_log(path, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["epoch"]] + [_fmt(r[k]) for k in LOG_HEADER[1:]])


def _fmt(v):
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def fit_sample(model: SNet, images, labels, steps, lr=0.05, weights=LOSS_WEIGHTS):
    """Repeated steps on one fixed batch; returns the loss after each step."""
    opt = OptimState(lr)
    return [train_step(model, opt, images, labels, weights)[0] for _ in range(steps)]


# ---------------------------------------------------------------------------
# evaluation and diagnostics
# ---------------------------------------------------------------------------

def predict(model: SNet, images, batch_size=8):
    """Eval-mode argmax masks of the final head."""
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            y_hat, _, _ = forward(model, images[s:s + batch_size], training=False)
            out.append(np.argmax(y_hat.data, axis=1))
    return np.concatenate(out)


def evaluate(checkpoint, dataset, grouping=None, hd_percentile=95, batch_size=8):
    model = load_model(checkpoint)
    k = model.config.num_classes
    if dataset.num_classes != k:
        raise ConfigError(f"checkpoint predicts {k} classes, dataset has {dataset.num_classes}")
    if len(dataset) == 0:
        raise DataError("evaluation dataset is empty")
    grouping = grouping or ClassGrouping.default(k)
    images, labels = dataset.arrays()
    preds = predict(model, images, batch_size)
    return evaluate_masks(preds, labels, grouping, k, hd_percentile)


def diagnose(checkpoint, dataset, binning=info.Binning(), max_samples=8, out_dir=None,
             pooling="all"):
    """Traced eval-mode forward on up to ``max_samples`` samples, then diagnostics."""
    model = load_model(checkpoint)
    if dataset.num_classes != model.config.num_classes:
        raise ConfigError(f"checkpoint predicts {model.config.num_classes} classes, "
                          f"dataset has {dataset.num_classes}")
    if len(dataset) == 0:
        raise DataError("diagnostics dataset is empty")
    images, _ = dataset.arrays(range(min(max_samples, len(dataset))))
    with T.no_grad():
        _, _, trace = forward(model, images, training=False, trace=True)
    report = info.diagnose_trace(trace, binning, pooling=pooling,
                                 fusion_mode=model.config.fusion_mode)
    if out_dir is not None:
        report.write(out_dir)
        info.export_histograms(trace, binning, Path(out_dir) / "histograms.csv", pooling)
    return report


def checkpoint_run_config(checkpoint_path):
    state = read_checkpoint(checkpoint_path)
    return RunConfig.from_text(blob_text(state["meta/run"])) if "meta/run" in state else None
