"""Pre-training losses: masked reconstruction, relation reconstruction, overlap consistency."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .backbone import IR, OCT, PretrainOutputs, RelationMatrix
from .errors import IndexMismatch, InvalidRatio, NegativeWeight, ShapeMismatch
from .patching import MaskEnsemble, masked_count, patchify_image, patchify_volume


@dataclass
class LossBreakdown:
    l_recon: torch.Tensor
    l_cross_relation: torch.Tensor
    l_consistency: torch.Tensor
    l_total: torch.Tensor
    lambdas: tuple

    def as_floats(self) -> dict:
        return {
            "l_recon": float(self.l_recon.detach()),
            "l_cross_relation": float(self.l_cross_relation.detach()),
            "l_consistency": float(self.l_consistency.detach()),
            "l_total": float(self.l_total.detach()),
        }


def normalize_patches(patches: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Zero mean, unit variance within each patch (last axis)."""
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, keepdim=True, unbiased=False)
    return (patches - mean) / torch.sqrt(var + eps)


def _mse(pred, target):
    if pred.shape != target.shape:
        raise IndexMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return ((pred - target) ** 2).mean()


def loss_recon(pred_patches, target_patches, mask_view=None, per_patch_norm: bool = False):
    """MSE over masked patches only.

    ``pred_patches`` / ``target_patches`` are either tensors covering exactly the
    masked indices (shape (..., m, P)), or lists over views of
    ``{modality: tensor}`` dicts, in which case the value is averaged over
    modalities within a view and then over views.
    """
    if isinstance(pred_patches, torch.Tensor):
        if mask_view is not None and pred_patches.shape[-2] != int(mask_view.masked.sum()):
            raise IndexMismatch("predictions do not cover the masked index set")
        target = normalize_patches(target_patches) if per_patch_norm else target_patches
        return _mse(pred_patches, target)
    per_view = []
    for preds, targets in zip(pred_patches, target_patches, strict=True):
        mods = [
            _mse(preds[m], normalize_patches(targets[m]) if per_patch_norm else targets[m])
            for m in preds
        ]
        per_view.append(torch.stack(mods).mean())
    return torch.stack(per_view).mean()


def mask_relation_indicator(nq: int, nk: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= ratio < 1.0:
        raise InvalidRatio(f"relation mask ratio must lie in [0, 1), got {ratio}")
    flat = np.zeros(nq * nk, dtype=bool)
    flat[rng.permutation(nq * nk)[: masked_count(nq * nk, ratio)]] = True
    return flat.reshape(nq, nk)


def mask_relations(dense, ratio: float, rng: np.random.Generator):
    """Erase ``round(ratio * Nq * Nk)`` entries of a relation matrix.

    Returns ``(masked_matrix, indicator)``; erased entries are set to 0 and
    flagged True in the indicator.
    """
    values = dense.values if isinstance(dense, RelationMatrix) else dense
    values = torch.as_tensor(values)
    nq, nk = values.shape[-2:]
    indicator = torch.from_numpy(mask_relation_indicator(nq, nk, ratio, rng))
    return values.masked_fill(indicator, 0.0), indicator


def loss_cross_relation(dense, predicted):
    """MSE over every entry of the complete relation matrices.

    Accepts matching tensors, matching dicts keyed by (layer, direction), or
    lists of such dicts (one per view); averages over all items.
    """
    if isinstance(dense, torch.Tensor):
        if dense.shape != predicted.shape:
            raise ShapeMismatch(f"relation shapes differ: {tuple(dense.shape)} vs {tuple(predicted.shape)}")
        return ((predicted - dense.detach()) ** 2).mean()
    if isinstance(predicted, (list, tuple)):
        return torch.stack([loss_cross_relation(dense, p) for p in predicted]).mean()
    if set(dense) != set(predicted):
        raise ShapeMismatch("relation keys differ between dense and predicted")
    return torch.stack([loss_cross_relation(dense[k], predicted[k]) for k in dense]).mean()


def _consistency_one(preds: Sequence[torch.Tensor], masks: torch.Tensor):
    """Sum of squared differences over pairwise overlaps and the element count.

    preds[k]: (B, m, P) predictions at view k's masked indices (ascending);
    masks: (K, B, N) bool.
    """
    K, B, N = masks.shape
    if K < 2:
        zero = preds[0].sum() * 0.0 if preds else torch.zeros(())
        return zero, 0
    P = preds[0].shape[-1]
    full = []
    for k in range(K):
        if preds[k].shape[:2] != (B, int(masks[k, 0].sum())):
            raise IndexMismatch(f"view {k} predictions do not match its mask")
        canvas = preds[k].new_zeros(B, N, P)
        idx = torch.argsort(masks[k].to(torch.int8), dim=1, stable=True)[:, N - preds[k].shape[1]:]
        full.append(canvas.scatter(1, idx[..., None].expand(-1, -1, P), preds[k]))
    total = preds[0].sum() * 0.0
    count = 0
    for i, j in combinations(range(K), 2):
        both = (masks[i] & masks[j]).to(full[i].dtype)[..., None]
        total = total + (((full[i] - full[j]) ** 2) * both).sum()
        count += int(both.sum()) * P
    return total, count


def loss_consistency(view_predictions, ensemble):
    """Mean squared disagreement between views on patches masked in both.

    ``view_predictions`` is a list over views.  Each item is either a tensor
    (m_k, P) / (B, m_k, P) for a single modality, or a dict modality -> tensor,
    in which case ``ensemble`` is a dict modality -> masks and the result is
    the mean over modalities that have any overlap.
    """
    if isinstance(view_predictions[0], dict):
        vals = []
        for mod in view_predictions[0]:
            total, count = _consistency_one([v[mod] for v in view_predictions], _as_masks(ensemble[mod]))
            if count:
                vals.append(total / count)
        if not vals:
            return view_predictions[0][next(iter(view_predictions[0]))].sum() * 0.0
        return torch.stack(vals).mean()
    preds = [p if p.dim() == 3 else p[None] for p in view_predictions]
    total, count = _consistency_one(preds, _as_masks(ensemble))
    return total / count if count else total


def _as_masks(ensemble) -> torch.Tensor:
    if isinstance(ensemble, MaskEnsemble):
        return torch.from_numpy(ensemble.masks())[:, None, :]
    masks = torch.as_tensor(ensemble)
    return masks[:, None, :] if masks.dim() == 2 else masks


def loss_total(l_recon, l_cross_relation, l_consistency, lambda1=1.0, lambda2=1.0, lambda3=1.0) -> LossBreakdown:
    if min(lambda1, lambda2, lambda3) < 0:
        raise NegativeWeight(f"loss weights must be >= 0, got {(lambda1, lambda2, lambda3)}")
    parts = [torch.as_tensor(v, dtype=torch.float64) if not isinstance(v, torch.Tensor) else v
             for v in (l_recon, l_cross_relation, l_consistency)]
    total = lambda1 * parts[0] + lambda2 * parts[1] + lambda3 * parts[2]
    return LossBreakdown(*parts, total, (lambda1, lambda2, lambda3))


def reconstruction_targets(oct_vol, ir_img, outputs: PretrainOutputs):
    """Ground-truth patches gathered at each view's masked positions."""
    from .backbone import gather_tokens

    t_oct = patchify_volume(oct_vol)
    t_ir = patchify_image(ir_img)
    return [
        {OCT: gather_tokens(t_oct, v.masked_idx[OCT]), IR: gather_tokens(t_ir, v.masked_idx[IR])}
        for v in outputs.views
    ]


def pretrain_losses(outputs: PretrainOutputs, oct_target, ir_target, config) -> LossBreakdown:
    """All three objectives and their weighted sum for one forward_pretrain result.

    ``oct_target`` / ``ir_target`` are the volumes/images the reconstructions are
    scored against (normally the encoder inputs themselves).
    """
    targets = reconstruction_targets(oct_target, ir_target, outputs)
    preds = [v.pred for v in outputs.views]
    l_rec = loss_recon(preds, targets, per_patch_norm=config.per_patch_norm)
    l_rel = loss_cross_relation(outputs.dense_relations, [v.predicted_relations for v in outputs.views])
    masks = {mod: torch.stack([v.masks[mod] for v in outputs.views]) for mod in (OCT, IR)}
    l_con = loss_consistency(preds, masks)
    return loss_total(l_rec, l_rel, l_con, config.lambda_recon, config.lambda_relation, config.lambda_consistency)


# -- finite differences ------------------------------------------------------------

@dataclass
class GradCheckReport:
    name: str
    checked: int
    max_rel_error: float
    failures: list = field(default_factory=list)
    rel_errors: list = field(default_factory=list)
    tol: float = 1e-4
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-5,
    tol: float = 1e-4,
    n_samples: int = 64,
    seed: int = 0,
    floor: float = 1e-6,
    name: str = "loss",
) -> GradCheckReport:
    """Compare autograd gradients against central differences on sampled entries.

    Relative error is |g - fd| / max(|g|, |fd|, floor); entries where both are
    below ``floor`` count as agreeing at zero.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    flat_choices = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    report = GradCheckReport(name=name, checked=0, max_rel_error=0.0, tol=tol)
    for flat in flat_choices:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[pi])
        p = params[pi]
        view = p.data.view(-1)
        orig = view[local].item()
        with torch.no_grad():
            view[local] = orig + epsilon
            up = float(loss_fn())
            view[local] = orig - epsilon
            down = float(loss_fn())
            view[local] = orig
        fd = (up - down) / (2 * epsilon)
        g = float(grads[pi].view(-1)[local])
        rel = abs(g - fd) / max(abs(g), abs(fd), floor)
        report.rel_errors.append(rel)
        report.checked += 1
        report.max_rel_error = max(report.max_rel_error, rel)
        if rel > tol:
            report.failures.append((pi, local, g, fd, rel))
    return report
