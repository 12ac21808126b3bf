"""Adaptive single/dual-modality inference, classification heads and fine-tuning."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import MultiModalMAE
from .errors import EmptyDataset, InvalidSchedule, LabelOutOfRange, MissingModality

FEW_SHOT_MAX = 500


@dataclass(frozen=True)
class ModalityAvailability:
    has_oct: bool
    has_enface: bool

    def __post_init__(self):
        if not (self.has_oct or self.has_enface):
            raise MissingModality("at least one modality must be available")

    @classmethod
    def from_mode(cls, mode: str) -> "ModalityAvailability":
        try:
            return {"dual": cls(True, True), "oct": cls(True, False), "enface": cls(False, True)}[mode]
        except KeyError:
            raise ValueError(f"unknown mode {mode!r}; expected dual, oct or enface") from None

    @property
    def mode(self) -> str:
        if self.has_oct and self.has_enface:
            return "dual"
        return "oct" if self.has_oct else "enface"

    @property
    def dual(self) -> bool:
        return self.has_oct and self.has_enface


class FinetuneMode(str, enum.Enum):
    FEW_SHOT = "FEW_SHOT"
    FULL = "FULL"


def select_mode(n_train: int) -> FinetuneMode:
    return FinetuneMode.FEW_SHOT if n_train <= FEW_SHOT_MAX else FinetuneMode.FULL


@dataclass
class FinetuneConfig:
    num_classes: int = 2
    phase1_epochs: int = 5
    phase2_epochs: int = 10
    base_lr: float = 3e-4
    phase1_lr: float = 3e-3
    warmup_steps: int = 10
    total_steps: Optional[int] = None  # derived from phase2 epochs when None
    weight_decay: float = 0.05
    batch_size: int = 32
    phase1_in_full: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if min(self.base_lr, self.phase1_lr, self.batch_size) <= 0 or self.weight_decay < 0:
            raise ValueError("learning rates and batch size must be positive")
        if self.total_steps is not None and self.warmup_steps >= self.total_steps:
            raise InvalidSchedule("warmup_steps must be smaller than total_steps")

    def to_dict(self):
        return asdict(self)


def cosine_warmup_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear warm-up to ``base_lr`` then cosine annealing to 0 at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise InvalidSchedule(f"warmup {warmup_steps} must be < total {total_steps}")
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def attach_head(feature_dim: int, num_classes: int, seed: int = 0, std: float = 0.02) -> nn.Linear:
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    head = nn.Linear(feature_dim, num_classes)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        head.weight.copy_(torch.randn(head.weight.shape, generator=gen) * std)
        head.bias.zero_()
    return head


def forward_inference(model: MultiModalMAE, oct_vol=None, ir_img=None, availability: ModalityAvailability = None):
    """Pooled features routed by availability.

    Dual: both encoders with fusion, concatenated mean-pooled tokens (2C).
    Single: that encoder alone, fusion skipped, mean-pooled tokens (C).  The
    withheld input is never touched.
    """
    if availability is None:
        availability = ModalityAvailability(oct_vol is not None, ir_img is not None)
    if availability.has_oct and oct_vol is None:
        raise MissingModality("OCT volume required but not supplied")
    if availability.has_enface and ir_img is None:
        raise MissingModality("en face image required but not supplied")
    return model.forward_features(
        oct_vol if availability.has_oct else None,
        ir_img if availability.has_enface else None,
    )


class AdaptiveClassifier(nn.Module):
    """Pre-trained backbone plus a linear head on pooled features.

    Each stream's pooled vector is layer-normalized before the linear map.  A
    head trained on dual features (2C inputs) also serves single-modality
    requests: the available stream's pooled vector is multiplied by that
    stream's column block of the head weights.
    """

    def __init__(self, backbone: MultiModalMAE, num_classes: int, mode: str = "dual", seed: int = 0):
        super().__init__()
        self.backbone = backbone
        self.mode = mode
        C = backbone.config.embed_dim
        self.norm_oct = nn.LayerNorm(C)
        self.norm_ir = nn.LayerNorm(C)
        self.head = attach_head(2 * C if mode == "dual" else C, num_classes, seed)

    def head_parameters(self):
        yield from self.norm_oct.parameters()
        yield from self.norm_ir.parameters()
        yield from self.head.parameters()

    def encoder_parameters(self):
        return self.backbone.encoder_parameters()

    def logits(self, oct_vol=None, ir_img=None, availability: ModalityAvailability = None):
        if availability is None:
            availability = ModalityAvailability.from_mode(self.mode)
        feats = forward_inference(self.backbone, oct_vol, ir_img, availability)
        C = self.backbone.config.embed_dim
        if availability.dual:
            feats = torch.cat([self.norm_oct(feats[:, :C]), self.norm_ir(feats[:, C:])], dim=-1)
        else:
            feats = (self.norm_oct if availability.has_oct else self.norm_ir)(feats)
        if feats.shape[-1] == self.head.in_features:
            return self.head(feats)
        cols = slice(0, C) if availability.has_oct else slice(C, 2 * C)
        return F.linear(feats, self.head.weight[:, cols], self.head.bias)

    forward = logits


def parameter_checksum(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _inputs(batch_vol, batch_img, availability):
    return (batch_vol if availability.has_oct else None, batch_img if availability.has_enface else None)


def _validate(y, num_classes):
    if y.numel() == 0:
        raise EmptyDataset("fine-tuning needs at least one sample")
    if int(y.min()) < 0 or int(y.max()) >= num_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")


def _batches(n, batch_size, gen):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def finetune(
    classifier: AdaptiveClassifier,
    train,
    config: FinetuneConfig,
    mode: FinetuneMode = FinetuneMode.FEW_SHOT,
    availability: ModalityAvailability = None,
    valid=None,
):
    """Two-phase fine-tuning.

    ``train`` / ``valid`` are (volumes, images, labels) tensors.  Phase 1 trains
    the head only with encoders and fusion frozen; phase 2 trains encoders,
    fusion and head with AdamW under the cosine warm-up schedule.  Returns
    (classifier, history rows).
    """
    from .evaluation import auroc

    availability = availability or ModalityAvailability.from_mode(classifier.mode)
    vol, img, y = train
    _validate(y, config.num_classes)
    n = y.shape[0]
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    steps_per_epoch = math.ceil(n / config.batch_size)

    def val_auroc():
        if valid is None:
            return float("nan")
        probs = predict(classifier, valid[0], valid[1], availability)
        try:
            return auroc(probs.numpy() if config.num_classes > 2 else probs[:, 1].numpy(), valid[2].numpy())
        except Exception:
            return float("nan")

    def run_phase(name, epochs, params, lr_at):
        if epochs <= 0:
            return
        opt = torch.optim.AdamW(params, lr=lr_at(0), weight_decay=config.weight_decay)
        step = 0
        for epoch in range(epochs):
            classifier.train()
            losses = []
            for idx in _batches(n, config.batch_size, gen):
                lr = lr_at(step)
                for g in opt.param_groups:
                    g["lr"] = lr
                o, i = _inputs(vol[idx], img[idx], availability)
                loss = F.cross_entropy(classifier.logits(o, i, availability), y[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
                step += 1
            history.append({"phase": name, "epoch": epoch, "steps": step, "loss": float(np.mean(losses)),
                            "val_auroc": val_auroc(), "lr": lr})

    run_phase_one = mode == FinetuneMode.FEW_SHOT or config.phase1_in_full
    if run_phase_one:
        frozen = list(classifier.encoder_parameters())
        flags = [p.requires_grad for p in frozen]
        for p in frozen:
            p.requires_grad_(False)
        try:
            run_phase("head", config.phase1_epochs, list(classifier.head_parameters()), lambda s: config.phase1_lr)
        finally:
            for p, f in zip(frozen, flags):
                p.requires_grad_(f)

    total = config.total_steps or config.phase2_epochs * steps_per_epoch
    if config.phase2_epochs > 0:
        warm = min(config.warmup_steps, total - 1)
        params = list(classifier.encoder_parameters()) + list(classifier.head_parameters())
        run_phase("full", config.phase2_epochs, params,
                  lambda s: cosine_warmup_lr(min(s, total), warm, total, config.base_lr))
    classifier.eval()
    return classifier, history


@torch.no_grad()
def predict(classifier: AdaptiveClassifier, oct_vol=None, ir_img=None, availability: ModalityAvailability = None,
            batch_size: int = 64) -> torch.Tensor:
    """Softmax class probabilities, evaluated in eval mode."""
    availability = availability or ModalityAvailability.from_mode(classifier.mode)
    if availability.has_oct and oct_vol is None:
        raise MissingModality("OCT volume required but not supplied")
    if availability.has_enface and ir_img is None:
        raise MissingModality("en face image required but not supplied")
    was_training = classifier.training
    classifier.eval()
    ref = oct_vol if availability.has_oct else ir_img
    single = ref.dim() == (4 if availability.has_oct else 3) - 1
    if single:
        oct_vol = None if oct_vol is None else oct_vol[None]
        ir_img = None if ir_img is None else ir_img[None]
        ref = ref[None]
    out = []
    for i in range(0, ref.shape[0], batch_size):
        sl = slice(i, i + batch_size)
        o = oct_vol[sl] if availability.has_oct else None
        m = ir_img[sl] if availability.has_enface else None
        out.append(classifier.logits(o, m, availability).softmax(dim=-1))
    classifier.train(was_training)
    probs = torch.cat(out)
    return probs[0] if single else probs
