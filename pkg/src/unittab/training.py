"""Pretraining and fine-tuning.

Masking plan: every row is row-masked with probability p_r (all fields);
independently every field unit is masked with probability p_f, where the
subfields of one timestamp form a single unit (jointly masked or jointly
unmasked). Masked inputs are replaced by the [MASK] embedding; targets are
smoothed distributions over the attribute's vocabulary or quantization bins
(quantized values are targets only, never inputs). Optimization is AdamW
with decoupled weight decay; the loss averages cross entropy over masked
positions so the learning rate is batch-size stable.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .checkpoint import save_checkpoint
from .data import WindowedSample, balance_upsample, random_crop
from .embedding import EncodedRow, EncodedSeries, normalize_numeric
from .metrics import EvalReport, accuracy, average_precision, f1, rmse, roc_auc
from .model import Model, PretrainOutput
from .schema import CATEGORICAL, Schema, quantize
from .tensor import NumericError, Tensor, cross_entropy_soft, mean, softmax


class ConfigError(Exception):
    pass


class LabelError(Exception):
    pass


@dataclass
class TrainConfig:
    p_f: float = 0.15                 # field masking probability
    p_r: float = 0.1                  # row masking probability
    timestamp_joint: bool = True
    epsilon: float = 0.1              # label smoothing mass
    neighborhood_radius: int = 5
    loss_mode: str = "unified_ce"     # "unified_ce" | "regression_l2"
    regression_weight: float = 50.0
    optimizer: str = "adamw"
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    batch_size: int = 8               # 120 at full scale
    epochs: int = 1
    seed: int = 0
    mask_variant: str = "pure"        # "pure" | "bert_80_10_10"
    max_steps: int | None = None
    checkpoint_every: int | None = None

    def validate(self) -> None:
        if not (0.0 <= self.p_f <= 1.0 and 0.0 <= self.p_r <= 1.0):
            raise ConfigError("masking probabilities must be in [0, 1]")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError("label smoothing epsilon must be in [0, 1)")
        if self.neighborhood_radius < 0:
            raise ConfigError("neighborhood radius must be >= 0")
        if self.loss_mode not in ("unified_ce", "regression_l2"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if self.optimizer != "adamw":
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.mask_variant not in ("pure", "bert_80_10_10"):
            raise ConfigError(f"unknown mask_variant {self.mask_variant!r}")

    @classmethod
    def full_preset(cls, **overrides) -> "TrainConfig":
        return cls(batch_size=120, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        return cls(**d)


# ---------------------------------------------------------------------------
# target smoothing


def smooth_categorical(v: int, q_j: int, eps: float) -> np.ndarray:
    """1 - eps at the true class, eps spread evenly over the others."""
    if not 0 <= v < q_j:
        raise ValueError(f"class {v} out of range for vocabulary size {q_j}")
    if q_j == 1:
        return np.ones(1)
    p = np.full(q_j, eps / (q_j - 1))
    p[v] = 1.0 - eps
    return p


def smooth_neighborhood(b: int, q: int, eps: float, radius: int) -> np.ndarray:
    """1 - eps at bin b, eps shared by the in-range bins within `radius`
    of b, zero elsewhere. Boundary bins renormalize eps over the surviving
    neighbors so the target stays a distribution; with no neighbors
    (radius 0 or q == 1) all mass goes to b."""
    if not 0 <= b < q:
        raise ValueError(f"bin {b} out of range for {q} bins")
    if q == 1:
        return np.ones(1)
    lo, hi = max(0, b - radius), min(q - 1, b + radius)
    neighbors = [l for l in range(lo, hi + 1) if l != b]
    p = np.zeros(q)
    if not neighbors:
        p[b] = 1.0
        return p
    p[b] = 1.0 - eps
    p[neighbors] = eps / len(neighbors)
    return p


# ---------------------------------------------------------------------------
# masking


@dataclass
class MaskTarget:
    row: int
    field: int
    attr: str
    dist: np.ndarray
    scalar: float | None = None


@dataclass
class MaskedSample:
    rows: list[EncodedRow]
    mask: list[np.ndarray]          # input-replacement flags, one bool array per row
    targets: list[MaskTarget]       # predicted positions (missing values excluded)
    entity: str = ""


def apply_masking(sample, schema: Schema, cfg: TrainConfig,
                  rng: np.random.Generator) -> MaskedSample:
    """Build the masking plan and smoothed targets for one (encoded) sample.

    Fields whose value is missing can be input-masked (row masking masks
    everything) but contribute no target, since there is nothing to quantize.
    """
    src_rows = sample.rows
    rows = [EncodedRow(r.type_id, r.cat_ids.copy(), r.num_vals.copy(), r.is_missing.copy())
            for r in src_rows]
    t = len(rows)
    row_masked = rng.random(t) < cfg.p_r
    masks: list[np.ndarray] = []
    targets: list[MaskTarget] = []
    for i, row in enumerate(rows):
        rt = schema.row_type(row.type_id)
        k = rt.arity
        units: list[list[int]] = []
        if cfg.timestamp_joint:
            seen: dict[str, list[int]] = {}
            for s, name in enumerate(rt.attributes):
                g = schema.attributes[name].group
                if g is None:
                    units.append([s])
                elif g in seen:
                    seen[g].append(s)
                else:
                    seen[g] = [s]
                    units.append(seen[g])
        else:
            units = [[s] for s in range(k)]
        hit = rng.random(len(units)) < cfg.p_f
        mask = np.zeros(k, dtype=bool)
        for unit, h in zip(units, hit):
            if h:
                mask[unit] = True
        if row_masked[i]:
            mask[:] = True
        for s in np.flatnonzero(mask):
            if row.is_missing[s]:
                continue
            spec = schema.attributes[rt.attributes[s]]
            if spec.kind == CATEGORICAL:
                dist = smooth_categorical(int(row.cat_ids[s]), len(spec.vocab), cfg.epsilon)
                targets.append(MaskTarget(i, int(s), spec.name, dist))
            else:
                v = float(row.num_vals[s])
                b = quantize(v, spec)
                dist = smooth_neighborhood(b, spec.n_bins, cfg.epsilon, cfg.neighborhood_radius)
                scalar = float(np.clip(normalize_numeric(np.asarray(v), spec, "minmax01"), 0.0, 1.0))
                targets.append(MaskTarget(i, int(s), spec.name, dist, scalar))
        input_mask = mask.copy()
        if cfg.mask_variant == "bert_80_10_10":
            for s in np.flatnonzero(mask):
                if row.is_missing[s]:
                    continue
                u = rng.random()
                if u < 0.8:
                    continue
                input_mask[s] = False
                if u < 0.9:  # random replacement; the target keeps the original value
                    spec = schema.attributes[rt.attributes[s]]
                    if spec.kind == CATEGORICAL:
                        row.cat_ids[s] = rng.integers(0, len(spec.vocab))
                    else:
                        row.num_vals[s] = rng.uniform(*spec.value_range)
        masks.append(input_mask)
    entity = getattr(sample, "entity_id", None) or getattr(sample, "source_entity", "")
    return MaskedSample(rows, masks, targets, entity)


# ---------------------------------------------------------------------------
# losses


def masked_token_loss(groups) -> Tensor:
    """Mean over masked positions of soft-target cross entropy. `groups`
    is a list of (attr, logits Tensor (N, q), target dists (N, q))."""
    n = sum(len(d) for _, _, d in groups)
    if n == 0:
        return Tensor(0.0)
    total: Tensor | None = None
    for _, logits, dists in groups:
        if logits.shape[0] != len(dists):
            raise ValueError(f"{logits.shape[0]} logits rows vs {len(dists)} targets")
        term = cross_entropy_soft(logits, dists) * (len(dists) / n)
        total = term if total is None else total + term
    return total


def regression_loss(preds: Tensor, targets: np.ndarray, ce_loss: Tensor,
                    weight: float) -> Tensor:
    """weight * MSE over masked numerical positions + cross entropy over
    masked categorical positions."""
    if preds.size == 0:
        return ce_loss
    diff = preds - Tensor(targets)
    return ce_loss + mean(diff * diff) * weight


def pretrain_loss(out: PretrainOutput, cfg: TrainConfig) -> Tensor:
    ce = masked_token_loss(out.cat_groups)
    if cfg.loss_mode == "unified_ce":
        if out.reg_groups:
            raise ConfigError("unified_ce needs a model with numeric_target='bins'")
        return ce
    preds = [p for _, p, _ in out.reg_groups]
    targs = [t for _, _, t in out.reg_groups]
    if not preds:
        return ce
    from .tensor import concat
    return regression_loss(concat(preds, axis=0), np.concatenate(targs), ce,
                           cfg.regression_weight)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled-weight-decay Adam with bias correction. Decay skips the
    names in `no_decay` (layer-norm gains/biases). Parameters without a
    gradient are left untouched; a non-finite gradient aborts the step
    before any parameter is mutated."""

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, no_decay: set[str] = frozenset()):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        live = [(k, p) for k, p in sorted(self.params.items()) if p.grad is not None]
        for k, p in live:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for {k!r}; step aborted")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in live:
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            if self.weight_decay and k not in self.no_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# metrics log (newline-delimited JSON)


class MetricsLog:
    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a") if path else None

    def write(self, step: int, split: str, metric: str, value: float) -> None:
        if self._fh:
            self._fh.write(json.dumps({"step": step, "split": split,
                                       "metric": metric, "value": float(value)}) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


# ---------------------------------------------------------------------------
# loops


@dataclass
class PretrainResult:
    losses: list[float]
    steps: int
    optimizer: AdamW


def as_encoded_series(windows: list[WindowedSample]) -> list[EncodedSeries]:
    """Treat fixed windows as independent pretraining series."""
    return [EncodedSeries(f"{w.source_entity}:{w.start}", list(w.rows), w.label)
            for w in windows]


def pretrain(data: list[EncodedSeries], model: Model, cfg: TrainConfig,
             metrics_path=None, checkpoint_path=None) -> PretrainResult:
    """Masked-token pretraining. Each epoch reshuffles entities and takes a
    fresh random crop of every over-long series; steps with zero masked
    positions are skipped (loss 0). Periodic checkpoints survive aborts."""
    cfg.validate()
    if cfg.loss_mode == "regression_l2" and model.config.numeric_target != "scalar":
        raise ConfigError("regression_l2 pretraining needs numeric_target='scalar'")
    if cfg.loss_mode == "unified_ce" and model.config.numeric_target != "bins":
        raise ConfigError("unified_ce pretraining needs numeric_target='bins'")
    if cfg.p_f == 0.0 and cfg.p_r == 0.0:
        warnings.warn("p_f and p_r are both 0: nothing will be masked and the loss stays 0")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    opt = AdamW(model.params, lr=cfg.lr, betas=cfg.betas,
                weight_decay=cfg.weight_decay, no_decay=model.no_decay)
    log = MetricsLog(metrics_path)
    losses: list[float] = []
    steps = 0
    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(len(data))
            for lo in range(0, len(order), cfg.batch_size):
                chunk = order[lo:lo + cfg.batch_size]
                batch = []
                for i in chunk:
                    crop = random_crop(data[i], model.config.t_max, rng)
                    batch.append(apply_masking(crop, model.schema, cfg, rng))
                out = model.pretrain_forward(batch, rng, training=True)
                if out.n_masked == 0:
                    losses.append(0.0)
                    log.write(steps, "pretrain", "loss", 0.0)
                    steps += 1
                else:
                    loss = pretrain_loss(out, cfg)
                    model.zero_grad()
                    loss.backward()
                    opt.step()
                    losses.append(loss.item())
                    log.write(steps, "pretrain", "loss", loss.item())
                    steps += 1
                if checkpoint_path and cfg.checkpoint_every and steps % cfg.checkpoint_every == 0:
                    save_checkpoint(checkpoint_path, model, opt, cfg, rng, steps)
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    raise StopIteration
    except StopIteration:
        pass
    finally:
        log.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, opt, cfg, rng, steps)
    return PretrainResult(losses, steps, opt)


def _batched(items, size):
    for lo in range(0, len(items), size):
        yield items[lo:lo + size]


def predict(model: Model, samples, task: str, batch_size: int = 64):
    """Deterministic forward (dropout off). Returns predictions for
    regression, (scores, labels) probabilities for binary."""
    preds = []
    for batch in _batched(samples, batch_size):
        out = model.finetune_forward(batch, rng=None, training=False)
        if task == "regression":
            preds.extend(out.data.tolist())
        else:
            probs = softmax(out, axis=-1).data
            preds.extend(probs[:, 1].tolist())
    return np.asarray(preds)


def evaluate(model: Model, samples, task: str, batch_size: int = 64) -> EvalReport:
    labels = np.asarray([s.label for s in samples], dtype=np.float64)
    scores = predict(model, samples, task, batch_size)
    if task == "regression":
        return EvalReport(task="regression", metrics={"rmse": rmse(scores, labels)},
                          n_samples=len(samples))
    pred_labels = (scores > 0.5).astype(int)
    truth = labels.astype(int)
    tp = int(np.sum((pred_labels == 1) & (truth == 1)))
    fp = int(np.sum((pred_labels == 1) & (truth == 0)))
    tn = int(np.sum((pred_labels == 0) & (truth == 0)))
    fn = int(np.sum((pred_labels == 0) & (truth == 1)))
    return EvalReport(
        task="binary",
        metrics={
            "f1": f1(pred_labels, truth),
            "average_precision": average_precision(scores, truth),
            "roc_auc": roc_auc(scores, truth),
            "accuracy": accuracy(pred_labels, truth),
        },
        n_samples=len(samples),
        confusion={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        threshold=0.5,
    )


@dataclass
class FinetuneResult:
    report: EvalReport
    losses: list[float]


def finetune(train_samples, test_samples, model: Model, task: str, cfg: TrainConfig,
             freeze_backbone: bool = False, upsample: bool | None = None,
             metrics_path=None) -> FinetuneResult:
    """Supervised fine-tuning through a [CLS] head: MSE for regression,
    cross entropy for binary classification (positives upsampled to balance
    by default). The backbone trains end-to-end unless frozen."""
    cfg.validate()
    if task not in ("regression", "binary"):
        raise ConfigError(f"unknown task {task!r}")
    if any(s.label is None for s in train_samples) or any(s.label is None for s in test_samples):
        raise LabelError(f"{task} fine-tuning needs a label on every sample")
    model.ensure_task_head(task, seed=cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    if task == "binary" and (upsample if upsample is not None else True):
        train_samples = balance_upsample(list(train_samples), rng)
    label_mu, label_sd = 0.0, 1.0
    if task == "regression":
        # train on standardized labels; the affine folds back into the head
        # afterwards so the checkpointed model predicts raw scale
        raw = np.asarray([s.label for s in train_samples], dtype=np.float64)
        label_mu = float(raw.mean())
        label_sd = float(raw.std()) or 1.0
    trainable = (dict(model.params) if not freeze_backbone
                 else {k: p for k, p in model.params.items() if k.startswith("finetune.")})
    opt = AdamW(trainable, lr=cfg.lr, betas=cfg.betas,
                weight_decay=cfg.weight_decay, no_decay=model.no_decay)
    log = MetricsLog(metrics_path)
    losses: list[float] = []
    steps = 0
    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(len(train_samples))
            for chunk in _batched(order, cfg.batch_size):
                batch = [train_samples[i] for i in chunk]
                out = model.finetune_forward(batch, rng, training=True)
                if task == "regression":
                    y = (np.asarray([s.label for s in batch], dtype=np.float64) - label_mu) / label_sd
                    diff = out - Tensor(y)
                    loss = mean(diff * diff)
                else:
                    onehot = np.zeros((len(batch), 2))
                    for j, s in enumerate(batch):
                        onehot[j, int(s.label)] = 1.0
                    loss = cross_entropy_soft(out, onehot)
                model.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
                log.write(steps, "finetune", "loss", loss.item())
                steps += 1
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    raise StopIteration
    except StopIteration:
        pass
    finally:
        log.close()
    if task == "regression" and (label_mu != 0.0 or label_sd != 1.0):
        model.params["finetune.w2"].data *= label_sd
        model.params["finetune.b2"].data = model.params["finetune.b2"].data * label_sd + label_mu
    return FinetuneResult(evaluate(model, test_samples, task), losses)
