"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict line."""
import copy
import itertools
import time

import numpy as np
import pytest
import torch

from octfusion.adaptation import (
    AdaptiveClassifier,
    FinetuneConfig,
    FinetuneMode,
    ModalityAvailability,
    finetune,
    parameter_checksum,
)
from octfusion.backbone import ModelConfig, MultiModalMAE, sample_pretrain_masks
from octfusion.core_types import AgeGroup, DemographicRecord, RaceEthnicity, Sex
from octfusion.data_pipeline import SignalSpec, Split, generate_cohort, split_patients
from octfusion.diagnostics import gradient_checks, mae_contract_check, toy_problem
from octfusion.evaluation import (
    UNDEFINED,
    ConfusionCounts,
    PredictionSet,
    auprc,
    auroc,
    cohen_kappa,
    f1_from,
    fairness_report,
    mcc,
)
from octfusion.objectives import loss_consistency, loss_cross_relation, loss_recon, pretrain_losses
from octfusion.patching import sample_mask_ensemble, sample_mask_view
from octfusion.runner import ExperimentConfig, PretrainConfig, finetune_run, pretrain_loop, prediction_set, subset_harness


def test_criterion_01_gradient_correctness(verdict):
    t0 = time.time()
    reports = gradient_checks(n_samples=64, epsilon=1e-5, tol=1e-4)
    elapsed = time.time() - t0
    worst = max(r.max_rel_error for r in reports.values())
    ok = all(r.passed for r in reports.values()) and elapsed < 60
    detail = ", ".join(f"{k}={r.max_rel_error:.1e}" for k, r in reports.items()) + f", {elapsed:.1f}s"
    assert verdict(1, "gradient correctness", ok, detail), worst


def test_criterion_02_mask_mechanics(verdict):
    rng = np.random.default_rng(0)
    exact = 0
    for _ in range(1000):
        n = int(rng.integers(2, 5000))
        ratio = float(rng.uniform(0.01, 0.99))
        exact += sample_mask_view(n, ratio, rng).masked.sum() == int(np.floor(ratio * n + 0.5))
    sizes = [len(sample_mask_ensemble(1024, 0.75, 2, np.random.default_rng(s)).pairwise_overlap[(0, 1)])
             for s in range(1000)]
    n, k = 1024, 768
    sigma = np.sqrt(k * (k / n) * ((n - k) / n) * ((n - k) / (n - 1)) / 1000)
    dev = abs(np.mean(sizes) - 576)
    ok = exact == 1000 and dev < 3 * sigma
    assert verdict(2, "mask mechanics", ok, f"{exact}/1000 exact, mean overlap {np.mean(sizes):.2f} "
                                             f"(|dev| {dev:.2f} < 3sigma {3 * sigma:.2f})")


def test_criterion_03_mae_contract(verdict):
    rep = mae_contract_check()
    ok = rep.passed and rep.input_grad_norm > 0
    assert verdict(3, "MAE contract", ok, f"{rep.checked} visible pixels, max |fd| {rep.max_abs_fd:.1e}")


def test_criterion_04_fixed_points(verdict):
    rng = np.random.default_rng(0)
    ens1 = sample_mask_ensemble(8, 0.75, 1, rng)
    k1 = float(loss_consistency([torch.rand(6, 4)], ens1))
    ens2 = sample_mask_ensemble(8, 0.5, 2, rng)
    full = torch.rand(8, 4)
    same = float(loss_consistency([full[torch.from_numpy(v.masked_idx)] for v in ens2.views], ens2))
    d = torch.rand(8, 6)
    rel = float(loss_cross_relation(d, d.clone()))
    t = torch.rand(12, 1280)
    rec = float(loss_recon(t.clone(), t))

    # the same fixed points through the model: relation copy-through with nothing erased
    prob = toy_problem(0, relation_mask_ratio=0.0, k_views=1)
    model = MultiModalMAE(prob.config, copy_through_relations=True).double()
    out = model.forward_pretrain(prob.oct, prob.ir, prob.masks_oct, prob.masks_ir, prob.indicators)
    losses = pretrain_losses(out, prob.oct, prob.ir, prob.config)
    model_rel, model_con = float(losses.l_cross_relation.detach()), float(losses.l_consistency.detach())
    ok = k1 == 0.0 and same == 0.0 and rel == 0.0 and rec == 0.0 and model_rel == 0.0 and model_con == 0.0
    assert verdict(4, "fixed points", ok, f"K=1 {k1}, identical views {same}, relation {rel}, recon {rec}")


def test_criterion_05_adaptive_purity(verdict):
    t0 = time.time()
    cfg = ModelConfig(embed_dim=32, enc_depth_oct=2, enc_depth_ir=2, n_heads=2, dec_dim=16, dec_depth=1,
                      vol_shape=(32, 32, 10), img_shape=(32, 32))
    clf = AdaptiveClassifier(MultiModalMAE(cfg), 2).eval()
    g = torch.Generator().manual_seed(0)
    vol, img = torch.rand(4, 32, 32, 10, generator=g), torch.rand(4, 32, 32, generator=g)
    enface, octonly = ModalityAvailability(False, True), ModalityAvailability(True, False)
    with torch.no_grad():
        ref_e = clf.logits(vol, img, enface)
        ref_o = clf.logits(vol, img, octonly)
        same_e = all(torch.equal(ref_e, clf.logits(torch.rand(4, 32, 32, 10, generator=g), img, enface))
                     for _ in range(10))
        same_o = all(torch.equal(ref_o, clf.logits(vol, torch.rand(4, 32, 32, generator=g), octonly))
                     for _ in range(10))
    elapsed = time.time() - t0
    ok = same_e and same_o and elapsed < 10
    assert verdict(5, "adaptive-inference purity", ok, f"en face {same_e}, OCT {same_o}, {elapsed:.2f}s")


def test_criterion_06_fusion_identity(verdict):
    model = MultiModalMAE(ModelConfig(vol_shape=(32, 32, 10), img_shape=(32, 32))).eval().zero_fusion_()
    g = torch.Generator().manual_seed(1)
    vol, img = torch.rand(3, 32, 32, 10, generator=g), torch.rand(3, 32, 32, generator=g)
    with torch.no_grad():
        dual = model.forward_features(vol, img)
        single = torch.cat([model.forward_features(vol, None), model.forward_features(None, img)], -1)
    err = float(torch.max(torch.abs(dual - single)))
    assert verdict(6, "fusion residual identity", err <= 1e-6, f"max abs diff {err:.1e}")


def test_criterion_07_freeze_integrity(verdict):
    cfg = ModelConfig(embed_dim=32, enc_depth_oct=2, enc_depth_ir=2, n_heads=2, dec_dim=16, dec_depth=1,
                      vol_shape=(32, 32, 10), img_shape=(32, 32))
    vol, img, y = generate_cohort(10, 0.5, seed=0, dims=(32, 32, 10)).tensors()
    clf = AdaptiveClassifier(MultiModalMAE(cfg), 2)
    before = parameter_checksum(clf.encoder_parameters())
    head_before = parameter_checksum(clf.head.parameters())
    _, hist = finetune(clf, (vol, img, y), FinetuneConfig(phase1_epochs=50, phase2_epochs=0, batch_size=5),
                       FinetuneMode.FEW_SHOT)
    steps = hist[-1]["steps"]
    frozen = parameter_checksum(clf.encoder_parameters()) == before
    moved = parameter_checksum(clf.head.parameters()) != head_before
    ok = steps == 100 and frozen and moved
    assert verdict(7, "freeze integrity", ok, f"{steps} head-only steps, encoder+fusion checksum unchanged={frozen}")


def _mann_whitney(s, y):
    pos, neg = s[y == 1], s[y == 0]
    return sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))


def test_criterion_08_metric_oracles(verdict):
    rng = np.random.default_rng(0)
    worst_auc = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 31))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = np.round(rng.random(n), 1)
        worst_auc = max(worst_auc, abs(auroc(s, y) - _mann_whitney(s, y)))
    f1 = f1_from(0.904, 0.907).value
    worst_other = 0.0
    for _ in range(200):
        tp, fp, tn, fn = (int(v) for v in rng.integers(1, 30, 4))
        direct_mcc = (tp * tn - fp * fn) / np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
        n = tp + fp + tn + fn
        po = (tp + tn) / n
        pe = ((tp + fp) * (tp + fn) + (tn + fn) * (tn + fp)) / n**2
        direct_kappa = (po - pe) / (1 - pe)
        cc = ConfusionCounts(tp, fp, tn, fn)
        worst_other = max(worst_other, abs(mcc(cc) - direct_mcc), abs(cohen_kappa(cc) - direct_kappa))
        y = rng.integers(0, 2, 12)
        y[0] = 1
        s = rng.random(12)
        order = np.argsort(-s)
        hits = np.cumsum(y[order])
        direct_ap = float(np.sum((hits / np.arange(1, 13))[y[order] == 1]) / y.sum())
        worst_other = max(worst_other, abs(auprc(s, y) - direct_ap))
    ok = worst_auc <= 1e-9 and abs(100 * f1 - 90.5) <= 0.1 and worst_other <= 1e-9
    assert verdict(8, "metric oracles", ok, f"AUROC err {worst_auc:.1e}, F1 {100 * f1:.2f}%, "
                                             f"MCC/kappa/AUPRC err {worst_other:.1e}")


def test_criterion_09_fairness_grid(verdict):
    prot = DemographicRecord(AgeGroup.GE75, Sex.FEMALE, RaceEthnicity.NHB)
    priv = DemographicRecord(AgeGroup.A45_64, Sex.MALE, RaceEthnicity.NHW)

    def two_groups(a, b, da, db):
        return PredictionSet(np.concatenate([a[0], b[0]]), np.concatenate([a[1], b[1]]), (),
                             [da] * len(a[0]) + [db] * len(b[0]))

    block = (np.array([0.9, 0.8, 0.3, 0.6, 0.2, 0.1, 0.7, 0.4]), np.array([1, 1, 1, 0, 0, 0, 1, 0]))
    equal = fairness_report(two_groups(block, block, prot, priv))
    all_one = all(c.ratio == 1.0 for c in equal.cells.values()) and len(equal.cells) == 24

    rng = np.random.default_rng(0)
    a = (rng.random(40), rng.integers(0, 2, 40))
    b = (rng.random(35), rng.integers(0, 2, 35))
    fwd = fairness_report(two_groups(a, b, prot, priv))
    back = fairness_report(two_groups(a, b, priv, prot))
    defined = [(c.ratio, back.cells[k].ratio) for k, c in fwd.cells.items() if c.ratio is not UNDEFINED]
    inverted = bool(defined) and all(abs(r * s - 1.0) <= 1e-12 for r, s in defined)

    no_fp = (np.array([0.9, 0.1, 0.1]), np.array([1, 0, 1]))
    zero = fairness_report(two_groups((np.array([0.9, 0.9, 0.1]), np.array([1, 0, 0])), no_fp, prot, priv))
    undefined = zero.ratio("sex", "FPR") is UNDEFINED and zero.cells[("sex", "FPR")].status == "UNDEFINED"
    ok = all_one and inverted and undefined
    assert verdict(9, "fairness grid", ok, f"identical groups all 1.0={all_one}, {len(defined)} cells inverted, "
                                           f"zero denominator UNDEFINED={undefined}")


def test_criterion_10_split_fidelity(verdict):
    patients = [f"P{i:03d}" for i in range(100)]
    a = split_patients(patients, seed=0)
    counts = tuple(sum(v == s for v in a.values()) for s in (Split.PRETRAIN, Split.FT_TRAIN, Split.FT_VALID,
                                                             Split.FT_TEST))
    groups = [{p for p, v in a.items() if v == s} for s in Split]
    leak = sum(len(x & y) for x, y in itertools.combinations(groups, 2))
    covered = set().union(*groups) == set(patients)
    deterministic = split_patients(patients, seed=0) == a and split_patients(patients, seed=1) != a
    ok = counts == (80, 8, 2, 10) and leak == 0 and covered and deterministic
    assert verdict(10, "split fidelity", ok, f"counts {counts}, leaked patients {leak}, deterministic {deterministic}")


# -- end-to-end on the desk configuration --------------------------------------------------------------

DESK = dict(vol_shape=(64, 64, 10), img_shape=(64, 64))


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    t0 = time.time()
    cfg = ExperimentConfig(model=ModelConfig(**DESK), pretrain=PretrainConfig(epochs=50, batch_size=8, lr=1e-3))
    cohort = generate_cohort(64, 0.5, seed=0, dims=DESK["vol_shape"])
    model, record = pretrain_loop(cfg, cohort, out_dir=tmp_path_factory.mktemp("pretrain"))
    return cfg, model, record, time.time() - t0


@pytest.mark.slow
def test_criterion_11_end_to_end(pretrained, verdict):
    cfg, model, record, elapsed = pretrained
    epoch_means = [np.mean([r["l_total"] for r in record.rows if r["epoch"] == e]) for e in (0, 49)]
    reduction = epoch_means[1] / epoch_means[0]
    t0 = time.time()
    train = generate_cohort(200, 0.5, seed=1, dims=DESK["vol_shape"])
    test = generate_cohort(200, 0.5, seed=2, dims=DESK["vol_shape"])
    scores = {}
    for mode in ("dual", "enface"):
        clf, _ = finetune_run(model, cfg, train, mode=mode, seed=0)
        scores[mode] = auroc(prediction_set(clf, test, mode).scores[:, 1], test.tensors()[2].numpy())
    elapsed += time.time() - t0
    ok = reduction < 0.5 and scores["dual"] >= 0.90 and scores["enface"] >= 0.75 and elapsed <= 900
    assert verdict(11, "end-to-end synthetic learning", ok,
                   f"L_total {epoch_means[0]:.4f} -> {epoch_means[1]:.4f} ({reduction:.2f}x), "
                   f"dual AUROC {scores['dual']:.3f}, en face AUROC {scores['enface']:.3f}, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_12_subset_harness(pretrained, verdict, tmp_path):
    cfg, model, _, _ = pretrained
    # weaker, noisier signal than criterion 11 so the small subsets leave seed-to-seed spread
    spec = SignalSpec(class_id=1, oct_amplitude=0.5, enface_amplitude=0.35, noise_sd=0.1, oct_radius=5,
                      enface_radius=5)
    # a pool larger than the biggest subset, so every size is a genuine subsample
    train = generate_cohort(400, 0.5, seed=11, dims=DESK["vol_shape"], base_spec=spec)
    test = generate_cohort(200, 0.5, seed=12, dims=DESK["vol_shape"], base_spec=spec)
    short = copy.deepcopy(cfg)
    short.finetune = FinetuneConfig(phase1_epochs=3, phase2_epochs=5)
    res = subset_harness(model, short, train, test, sizes=(200, 100, 50), seeds=range(1, 11), out_dir=tmp_path)
    complete = len(res.runs) == 30 and [r["n_seeds"] for r in res.summary] == [10, 10, 10]
    emitted = all(r["ci_low"] <= r["mean"] <= r["ci_high"] for r in res.summary)
    narrower = {s: (res.ci_width(s, 10), res.ci_width(s, 3)) for s in (200, 100, 50)}
    # one comparison for the task: CI width averaged over the subset sizes
    w10, w3 = (float(np.mean([w[i] for w in narrower.values()])) for i in (0, 1))
    ok = complete and emitted and w10 < w3
    detail = "; ".join(f"n={r['size']} {r['mean']:.3f} [{r['ci_low']:.3f}, {r['ci_high']:.3f}]" for r in res.summary)
    detail += f"; mean CI width 10 seeds {w10:.3f} vs 3 seeds {w3:.3f} (per size " + \
        ", ".join(f"{s}: {a:.3f}/{b:.3f}" for s, (a, b) in narrower.items()) + ")"
    assert verdict(12, "subset harness", ok, detail)
