"""Siamese training loop: hardest-in-batch margin loss, Adam, step decay."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import diffcore as dc
from ..errors import InputError, NumericError
from ..loss import hardest_triplet_loss
from ..network import ArchConfig, ModelWeights, describe_patches, init_weights, sample_rectified
from ..simulator import PairSample
from .io import write_checkpoint


@dataclass
class TrainConfig:
    lr: float = 5e-5
    lr_decay: float = 0.9
    decay_steps: int = 3800
    epochs: int = 10
    pairs_per_batch: int = 8
    max_corrs_per_pair: int = 128
    margin: float = 0.5
    dropout: float = 0.1
    seed: int = 0
    alpha: float = 10.0
    symmetric: bool = False
    init_seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        positive = ("lr", "lr_decay", "decay_steps", "epochs", "pairs_per_batch", "max_corrs_per_pair", "margin")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InputError(f"train config: {name} must be positive")
        if not 0 <= self.dropout < 1:
            raise InputError("train config: dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = json.loads(self.arch.to_json())
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown train config keys: {sorted(unknown)}")
        if "arch" in raw:
            arch = raw.pop("arch")
            try:
                raw["arch"] = ArchConfig.from_json(json.dumps({**json.loads(ArchConfig().to_json()), **arch}))
            except TypeError as exc:
                raise InputError(f"bad arch config: {exc}") from None
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read train config {path}: {exc}") from None
        return cls.from_dict(raw)


class Adam:
    """Adam over a name -> Tensor dict; parameters without a gradient are skipped."""

    def __init__(self, params: dict[str, dc.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


@dataclass
class LogEntry:
    step: int
    epoch: int
    loss: float
    lr: float
    n_corrs: int


@dataclass
class TrainResult:
    weights: ModelWeights
    log: list[LogEntry]

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.log]

    def epoch_means(self) -> list[float]:
        out: dict[int, list[float]] = {}
        for e in self.log:
            out.setdefault(e.epoch, []).append(e.loss)
        return [float(np.mean(v)) for _, v in sorted(out.items())]


def write_loss_log(path, log: Sequence[LogEntry]) -> None:
    lines = ["step,epoch,loss,lr,n_corrs"]
    lines += [f"{e.step},{e.epoch},{e.loss!r},{e.lr!r},{e.n_corrs}" for e in log]
    Path(path).write_text("\n".join(lines) + "\n")


def _batch_keypoints(pair: PairSample, k: int, rng: np.random.Generator):
    corrs = pair.correspondences
    sel = np.sort(rng.choice(len(corrs), size=min(k, len(corrs)), replace=False))
    kps_a = [pair.keypoints_a[corrs[i][0]] for i in sel]
    kps_b = [pair.keypoints_b[corrs[i][1]] for i in sel]
    return kps_a, kps_b


def train(pairs: Sequence[PairSample], config: TrainConfig, out_checkpoint=None,
          weights: ModelWeights | None = None, max_steps: int | None = None,
          progress: Callable[[LogEntry], None] | None = None) -> TrainResult:
    """Train on in-memory pairs; deterministic given (config, pairs).

    Each step draws ``pairs_per_batch`` pairs (a seeded permutation per epoch)
    and up to ``max_corrs_per_pair`` ground-truth correspondences per pair,
    uniformly without replacement.  Descriptors of all A keypoints and of all
    B keypoints form the two mining batches.  With ``out_checkpoint`` the
    weights are written at every epoch end and the loss log next to them as
    ``<checkpoint>.losses.csv``.
    """
    if not pairs:
        raise InputError("training needs at least one pair")
    usable = [i for i, p in enumerate(pairs) if len(p.correspondences) > 0]
    if not usable:
        raise InputError("no pair carries ground-truth correspondences")
    arch = replace(config.arch, dropout=config.dropout)
    if weights is None:
        weights = init_weights(arch, config.init_seed)
    else:
        weights = ModelWeights(replace(weights.config, dropout=config.dropout), weights.params, weights.norms)
    weights.set_requires_grad(True)
    opt = Adam(weights.params)
    rng = np.random.default_rng(config.seed)
    log: list[LogEntry] = []
    step = 0
    out_path = Path(out_checkpoint) if out_checkpoint is not None else None
    for epoch in range(config.epochs):
        order = [usable[i] for i in rng.permutation(len(usable))]
        for b0 in range(0, len(order), config.pairs_per_batch):
            if max_steps is not None and step >= max_steps:
                break
            batch = order[b0:b0 + config.pairs_per_batch]
            lr = config.lr * config.lr_decay ** (step // config.decay_steps)
            weights.zero_grad()
            try:
                with dc.Tape() as tape:
                    side_a, side_b = [], []
                    for i in batch:
                        kps_a, kps_b = _batch_keypoints(pairs[i], config.max_corrs_per_pair, rng)
                        side_a.append(sample_rectified(pairs[i].image_a, None, kps_a, weights, "train", rng))
                        side_b.append(sample_rectified(pairs[i].image_b, None, kps_b, weights, "train", rng))
                    n = sum(t.value.shape[0] for t in side_a)
                    if n < 2:
                        continue
                    da = describe_patches(dc.concat(side_a), weights, "train")
                    db = describe_patches(dc.concat(side_b), weights, "train")
                    loss = hardest_triplet_loss(da, db, config.margin, config.alpha, config.symmetric)
                value = float(loss.value)
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value}")
                dc.backward(tape, loss)
            except NumericError as exc:
                _dump_failure(out_path, step, epoch, lr, batch, exc, log)
                raise NumericError(f"training aborted at step {step}: {exc}") from exc
            opt.step(lr)
            entry = LogEntry(step, epoch, value, lr, n)
            log.append(entry)
            if progress:
                progress(entry)
            step += 1
        if out_path is not None:
            write_checkpoint(out_path, weights)
            write_loss_log(str(out_path) + ".losses.csv", log)
    weights.set_requires_grad(False)
    return TrainResult(weights, log)


def _dump_failure(out_path, step, epoch, lr, batch, exc, log) -> None:
    if out_path is None:
        return
    diag = {
        "step": step, "epoch": epoch, "lr": lr, "batch_pairs": list(map(int, batch)),
        "error": str(exc), "recent_losses": [e.loss for e in log[-20:]],
    }
    Path(str(out_path) + ".failure.json").write_text(json.dumps(diag, indent=2))


def train_manifest(manifest_path, config: TrainConfig, out_checkpoint, **kw) -> TrainResult:
    from .io import load_dataset

    _, pairs = load_dataset(manifest_path)
    if not pairs:
        raise InputError(f"{manifest_path}: manifest lists no pairs")
    return train(pairs, config, out_checkpoint, **kw)
