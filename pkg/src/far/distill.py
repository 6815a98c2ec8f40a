"""Block-wise distillation of FAR substitutes against the frozen teacher.

Two-phase schedule: a distillation phase where only the substitute
blocks are trainable, followed by a finetuning phase with every
parameter unfrozen and pure classification loss.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

PHASES = ("teacher", "distill", "finetune", "prune-regularize", "prune-finetune")


@dataclass
class TrainConfig:
    lam: float = 1.0
    lr: float = 5e-4
    warmup_lr: float = 1e-5
    warmup_epochs: int = 2
    epochs: int = 50
    batch_size: int = 32
    weight_decay: float = 0.05
    seed: int = 0
    phase: str = "distill"
    # pruning-stage knobs
    reg_coeff: float = 1e-4
    threshold: float = 1e-4
    threshold_mode: str = "absolute"  # or "relative"
    cosine_flat: bool = False  # whole-tensor cosine instead of per-token

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("similarity weight must be non-negative")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.05):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        # optional per-parameter 0/1 masks pinning pruned weights at zero
        self.freeze_masks = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * (g * g)
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            p.data = p.data - self.lr * (update + self.wd * p.data)
            mask = self.freeze_masks.get(id(p))
            if mask is not None:
                p.data *= mask


def cosine_lr(epoch, cfg: TrainConfig):
    """Linear warmup then cosine decay, per epoch."""
    if epoch < cfg.warmup_epochs:
        frac = (epoch + 1) / max(1, cfg.warmup_epochs)
        return cfg.warmup_lr + frac * (cfg.lr - cfg.warmup_lr)
    span = max(1, cfg.epochs - cfg.warmup_epochs)
    prog = (epoch - cfg.warmup_epochs) / span
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * prog))


def similarity_loss(x_teacher, x_student, flat=False):
    """1 - cosine between teacher and student block outputs.

    Computed as half the squared distance of the unit-normalized
    vectors, which is algebraically identical but returns an exact zero
    when student and teacher coincide bitwise. Per-token over the
    feature axis, averaged over tokens and batch; ``flat=True`` instead
    flattens each sample to one vector. Zero-norm tokens contribute a
    fixed loss of 1 and are excluded from the gradient.
    """
    t_data = x_teacher.data if isinstance(x_teacher, Tensor) else np.asarray(x_teacher)
    if t_data.shape != x_student.shape:
        raise T.ShapeError(
            f"similarity_loss shape mismatch: {t_data.shape} vs {x_student.shape}")
    if flat:
        t_data = t_data.reshape(t_data.shape[0], -1) if t_data.ndim == 3 else t_data.reshape(1, -1)
        s = T.reshape(x_student, t_data.shape)
    else:
        s = x_student

    tiny = 1e-30
    t_sq = (t_data * t_data).sum(axis=-1)
    s_sq = T.tsum(T.square(s), axis=-1)
    valid = (t_sq > tiny) & (s_sq.data > tiny)
    if not valid.all():
        log.warning("similarity_loss: %d zero-norm token(s) contribute loss 1",
                    int((~valid).sum()))
    v = valid.astype(t_data.dtype)
    # normalize both sides with the same reciprocal-multiply sequence so
    # that identical inputs cancel exactly
    s_inv = Tensor(1.0) / T.sqrt(s_sq * Tensor(v) + Tensor(1.0 - v))
    s_hat = s * T.reshape(s_inv * Tensor(v), s_sq.shape + (1,))
    t_inv = 1.0 / np.sqrt(np.where(valid, t_sq, 1.0))
    t_hat = t_data * (t_inv * v)[..., None]
    per_token = T.tsum(T.square(s_hat - Tensor(t_hat)), axis=-1) * Tensor(0.5)
    return T.mean(per_token + Tensor(1.0 - v))


def combined_loss(sims, logits, labels, lam):
    """lam * sum of per-block similarity losses + cross-entropy."""
    ce = T.cross_entropy(logits, labels)
    if lam == 0 or not sims:
        return ce
    total = sims[0]
    for s in sims[1:]:
        total = total + s
    return total * lam + ce


def freeze_plan(far_model, phase):
    """Set requires_grad per phase; returns the trainable tensor dict."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    all_named = far_model.named_parameters()
    far_named = far_model.far_parameters()
    if phase == "distill":
        trainable = far_named
    else:
        trainable = all_named
    for p in all_named.values():
        p.requires_grad = False
    for p in trainable.values():
        p.requires_grad = True
    return trainable


def _batches(indices, batch_size, rng):
    idx = indices.copy()
    rng.shuffle(idx)
    for start in range(0, len(idx), batch_size):
        yield idx[start:start + batch_size]


def accuracy(model, dataset, split="train"):
    images, labels = dataset.split(split)
    correct = 0
    for start in range(0, len(labels), 64):
        logits, _ = model.forward(images[start:start + 64])
        correct += int((logits.data.argmax(axis=-1) ==
                        labels[start:start + 64]).sum())
    return correct / len(labels)


def train_teacher(teacher, dataset, cfg: TrainConfig, log_rows=None):
    """Plain cross-entropy training of the attention teacher."""
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(teacher.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    for p in teacher.parameters():
        p.requires_grad = True
    images, labels = dataset.split("train")
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(epoch, cfg)
        losses = []
        for batch in _batches(np.arange(len(labels)), cfg.batch_size, rng):
            logits, _ = teacher.forward(images[batch])
            loss = T.cross_entropy(logits, labels[batch])
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"teacher loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if log_rows is not None:
            log_rows.append({"epoch": epoch, "phase": "teacher",
                             "loss": float(np.mean(losses)), "sim_mean": 0.0,
                             "acc": accuracy(teacher, dataset)})
    return teacher


def run_phase(far_model, teacher, dataset, cfg: TrainConfig,
              extra_loss=None, log_rows=None):
    """One training phase over the desk dataset.

    ``extra_loss`` is an optional callable returning an additional scalar
    Tensor (used by the pruning regularization stage). Emits one metrics
    row per epoch: loss, per-block similarity, train accuracy.
    """
    rng = np.random.default_rng(cfg.seed)
    trainable = freeze_plan(far_model, cfg.phase)
    opt = AdamW(trainable.values(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if far_model.masks is not None:
        attach_mask_freeze(opt, far_model)
    images, labels = dataset.split("train")
    n_layers = len(far_model.blocks)
    # the pruning stages train with classification + Hoyer terms only
    use_sim = cfg.lam > 0 and cfg.phase == "distill"
    rows = log_rows if log_rows is not None else []

    frozen_before = None
    if cfg.phase == "distill":
        frozen_before = {name: p.data.copy()
                         for name, p in far_model.named_parameters().items()
                         if name not in trainable}

    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(epoch, cfg)
        epoch_loss, epoch_sims = [], []
        for batch in _batches(np.arange(len(labels)), cfg.batch_size, rng):
            imgs, labs = images[batch], labels[batch]
            sims = []
            if use_sim:
                t_logits, t_blocks = teacher.forward(imgs)
                s_logits, s_blocks = far_model.forward(imgs)
                for tb, sb in zip(t_blocks, s_blocks):
                    sims.append(similarity_loss(tb.detach(), sb,
                                                flat=cfg.cosine_flat))
            else:
                s_logits, _ = far_model.forward(imgs)
            loss = combined_loss(sims, s_logits, labs, cfg.lam if use_sim else 0.0)
            if extra_loss is not None:
                loss = loss + extra_loss()
            if not np.isfinite(loss.item()):
                raise RuntimeError(
                    f"non-finite loss in phase {cfg.phase} epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss.append(loss.item())
            if sims:
                epoch_sims.append([s.item() for s in sims])
        sim_per_block = (np.mean(epoch_sims, axis=0).tolist()
                         if epoch_sims else [float("nan")] * n_layers)
        row = {"epoch": epoch, "phase": cfg.phase,
               "loss": float(np.mean(epoch_loss)),
               "sim_mean": (float(np.mean(sim_per_block))
                            if epoch_sims else float("nan")),
               "acc": accuracy(far_model, dataset)}
        for i, sv in enumerate(sim_per_block):
            row[f"sim_block_{i}"] = sv
        rows.append(row)

    if frozen_before is not None:
        for name, before in frozen_before.items():
            now = far_model.named_parameters()[name].data
            if not np.array_equal(before, now):
                raise RuntimeError(f"frozen tensor {name} changed during distill")
    return rows


def attach_mask_freeze(opt, far_model):
    """Pin every pruned coordinate to zero across optimizer steps."""
    from .pruner import weight_zero_masks
    for p, mask in weight_zero_masks(far_model):
        opt.freeze_masks[id(p)] = mask


def metrics_to_csv(rows, path):
    if not rows:
        return
    keys = sorted({k for r in rows for k in r},
                  key=lambda k: (k not in ("epoch", "phase", "loss", "sim_mean", "acc"), k))
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(str(r.get(k, "")) for k in keys) + "\n")
