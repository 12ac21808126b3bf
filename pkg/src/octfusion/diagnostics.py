"""Toy-model gradient and masking diagnostics shared by the CLI and the test suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import ModelConfig, MultiModalMAE, sample_pretrain_masks
from .objectives import GradCheckReport, finite_difference_check, pretrain_losses
from .patching import patchify_image, patchify_volume, unpatchify_image, unpatchify_volume

LOSS_NAMES = ("l_recon", "l_cross_relation", "l_consistency")


def toy_config(**overrides) -> ModelConfig:
    """C=16 model over 8 OCT tokens (2x2x2 grid) and 6 en face tokens (3x2 grid).

    Encoders have two blocks so the fusion block sits at depth 0 and the
    one-block decoders can mix tokens, which the consistency term needs to be
    non-trivial.
    """
    base = dict(embed_dim=16, enc_depth_oct=2, enc_depth_ir=2, n_heads=2, dec_dim=8, dec_depth=1, dec_heads=2,
                vol_shape=(32, 32, 10), img_shape=(48, 32), seed=0)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ToyProblem:
    config: ModelConfig
    model: MultiModalMAE
    oct: torch.Tensor
    ir: torch.Tensor
    masks_oct: torch.Tensor
    masks_ir: torch.Tensor
    indicators: list
    dense: dict

    def outputs(self):
        return self.model.forward_pretrain(self.oct, self.ir, self.masks_oct, self.masks_ir, self.indicators,
                                           dense=self.dense)

    def losses(self, oct_target=None, ir_target=None, outputs=None):
        outputs = outputs if outputs is not None else self.outputs()
        return pretrain_losses(outputs, self.oct if oct_target is None else oct_target,
                               self.ir if ir_target is None else ir_target, self.config)


def toy_problem(seed: int = 0, **overrides) -> ToyProblem:
    cfg = toy_config(**overrides)
    torch.manual_seed(seed)
    model = MultiModalMAE(cfg).double()
    gen = torch.Generator().manual_seed(seed)
    oct_vol = torch.rand((1, *cfg.vol_shape), generator=gen, dtype=torch.float64)
    ir_img = torch.rand((1, *cfg.img_shape), generator=gen, dtype=torch.float64)
    masks_oct, masks_ir, ind, _ = sample_pretrain_masks(cfg, 1, np.random.default_rng(seed))
    dense = model.dense_relations(patchify_volume(oct_vol), patchify_image(ir_img))
    return ToyProblem(cfg, model, oct_vol, ir_img, masks_oct, masks_ir, ind, dense)


def gradient_checks(n_samples: int = 64, epsilon: float = 1e-5, tol: float = 1e-4, seed: int = 0):
    """Central-difference check of each loss term w.r.t. sampled model parameters (float64).

    The pass-1 relation target is computed once and held fixed, matching its
    role as a detached constant during training.
    """
    prob = toy_problem(seed)
    params = list(prob.model.parameters())
    reports = {}
    for name in LOSS_NAMES:
        t0 = time.time()
        rep = finite_difference_check(lambda: getattr(prob.losses(), name), params, epsilon=epsilon, tol=tol,
                                      n_samples=n_samples, seed=seed, name=name)
        rep.seconds = time.time() - t0
        reports[name] = rep
    return reports


@dataclass
class ContractReport:
    checked: int
    max_abs_fd: float
    input_grad_norm: float
    tol: float = 1e-8

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_abs_fd <= self.tol


def mae_contract_check(epsilon: float = 1e-5, seed: int = 0, tol: float = 1e-8) -> ContractReport:
    """Reconstruction-only loss is blind to the content of patches that stay visible.

    With lambda_relation = lambda_consistency = 0 and a single mask view, every
    pixel of every visible patch in the reconstruction target is perturbed by
    +-epsilon and the central difference of the loss is recorded.  The
    gradient w.r.t. the encoder *input* is also reported; it is non-zero since
    visible pixels are what the encoder sees.
    """
    prob = toy_problem(seed, lambda_relation=0.0, lambda_consistency=0.0, k_views=1)
    with torch.no_grad():
        outputs = prob.outputs()
    t_oct = patchify_volume(prob.oct)
    t_ir = patchify_image(prob.ir)
    vis_oct = (~prob.masks_oct[0, 0]).nonzero().flatten().tolist()
    vis_ir = (~prob.masks_ir[0, 0]).nonzero().flatten().tolist()
    vol_shape, img_shape = prob.config.vol_shape, prob.config.img_shape

    def loss_with(po, pi):
        return float(prob.losses(unpatchify_volume(po, vol_shape), unpatchify_image(pi, img_shape), outputs).l_total)

    worst, checked = 0.0, 0
    for patches, visible, is_oct in ((t_oct, vis_oct, True), (t_ir, vis_ir, False)):
        for n in visible:
            for j in range(patches.shape[-1]):
                up, down = patches.clone(), patches.clone()
                up[0, n, j] += epsilon
                down[0, n, j] -= epsilon
                if is_oct:
                    fd = (loss_with(up, t_ir) - loss_with(down, t_ir)) / (2 * epsilon)
                else:
                    fd = (loss_with(t_oct, up) - loss_with(t_oct, down)) / (2 * epsilon)
                worst = max(worst, abs(fd))
                checked += 1

    oct_in = prob.oct.clone().requires_grad_(True)
    out = prob.model.forward_pretrain(oct_in, prob.ir, prob.masks_oct, prob.masks_ir, prob.indicators,
                                      dense=prob.dense)
    loss = pretrain_losses(out, prob.oct, prob.ir, prob.config).l_total
    (g,) = torch.autograd.grad(loss, oct_in)
    return ContractReport(checked, worst, float(g.norm()), tol)


def summarize(reports: dict) -> list[str]:
    lines = []
    for name, rep in reports.items():
        if isinstance(rep, GradCheckReport):
            lines.append(f"{'PASS' if rep.passed else 'FAIL'} {name}: checked={rep.checked} "
                         f"max_rel_error={rep.max_rel_error:.3e} tol={rep.tol:g}")
        else:
            lines.append(f"{'PASS' if rep.passed else 'FAIL'} {name}: checked={rep.checked} "
                         f"max_abs_fd={rep.max_abs_fd:.3e} tol={rep.tol:g}")
    return lines


__all__ = ["toy_config", "toy_problem", "gradient_checks", "mae_contract_check", "summarize"]
