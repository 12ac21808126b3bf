import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from octfusion.adaptation import (
    AdaptiveClassifier,
    FinetuneConfig,
    FinetuneMode,
    ModalityAvailability,
    attach_head,
    cosine_warmup_lr,
    finetune,
    forward_inference,
    parameter_checksum,
    predict,
    select_mode,
)
from octfusion.backbone import ModelConfig, MultiModalMAE
from octfusion.data_pipeline import generate_cohort
from octfusion.errors import EmptyDataset, InvalidSchedule, LabelOutOfRange, MissingModality


def small_config(**kw):
    base = dict(embed_dim=16, enc_depth_oct=2, enc_depth_ir=2, n_heads=2, dec_dim=8, dec_depth=1, dec_heads=2,
                vol_shape=(32, 32, 10), img_shape=(32, 32))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(40, 0.5, seed=3, dims=(32, 32, 10)).tensors()


class TestAvailability:
    def test_needs_one(self):
        with pytest.raises(MissingModality):
            ModalityAvailability(False, False)

    def test_modes(self):
        assert ModalityAvailability.from_mode("enface").mode == "enface"
        assert ModalityAvailability.from_mode("dual").dual


class TestSchedule:
    def test_endpoints(self):
        assert cosine_warmup_lr(0, 10, 100, 1e-3) == 0.0
        assert cosine_warmup_lr(10, 10, 100, 1e-3) == pytest.approx(1e-3)
        assert cosine_warmup_lr(100, 10, 100, 1e-3) == pytest.approx(0.0, abs=1e-18)

    def test_invalid(self):
        with pytest.raises(InvalidSchedule):
            cosine_warmup_lr(0, 10, 10, 1e-3)
        with pytest.raises(InvalidSchedule):
            FinetuneConfig(warmup_steps=5, total_steps=5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 50), st.integers(1, 200), st.floats(1e-6, 1.0))
    def test_shape(self, warm, extra, base):
        total = warm + extra
        lrs = [cosine_warmup_lr(s, warm, total, base) for s in range(total + 1)]
        assert all(a <= b + 1e-15 for a, b in zip(lrs[:warm], lrs[1:warm + 1]))
        assert all(a >= b - 1e-15 for a, b in zip(lrs[warm:], lrs[warm + 1:]))
        # continuity at the junction: one step either side approaches base_lr
        assert abs(lrs[warm] - base) < 1e-12
        assert base - lrs[warm - 1] <= base / warm + 1e-12


class TestHead:
    def test_binary_and_five_class(self):
        assert attach_head(32, 2)(torch.rand(1, 32)).shape == (1, 2)
        assert attach_head(32, 5)(torch.rand(1, 32)).shape == (1, 5)

    def test_same_seed_same_init(self):
        a, b = attach_head(8, 3, seed=4), attach_head(8, 3, seed=4)
        assert torch.equal(a.weight, b.weight)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            attach_head(8, 1)


class TestInference:
    def test_bypass_purity(self):
        model = MultiModalMAE(small_config()).eval()
        g = torch.Generator().manual_seed(0)
        vol, img = torch.rand(2, 32, 32, 10, generator=g), torch.rand(2, 32, 32, generator=g)
        ref = forward_inference(model, vol, img, ModalityAvailability(False, True))
        for _ in range(5):
            other = forward_inference(model, torch.rand(2, 32, 32, 10), img, ModalityAvailability(False, True))
            assert torch.equal(ref, other)
        ref_oct = forward_inference(model, vol, img, ModalityAvailability(True, False))
        assert torch.equal(ref_oct, forward_inference(model, vol, None, ModalityAvailability(True, False)))

    def test_zero_fusion_concatenation(self):
        model = MultiModalMAE(small_config()).eval().zero_fusion_()
        vol, img = torch.rand(2, 32, 32, 10), torch.rand(2, 32, 32)
        dual = forward_inference(model, vol, img)
        single = torch.cat([forward_inference(model, vol, None), forward_inference(model, None, img)], -1)
        assert dual.shape == (2, 32)
        assert torch.max(torch.abs(dual - single)) <= 1e-6

    def test_missing(self):
        model = MultiModalMAE(small_config())
        with pytest.raises(MissingModality):
            forward_inference(model, None, torch.rand(1, 32, 32), ModalityAvailability(True, True))

    def test_predict_distribution(self):
        clf = AdaptiveClassifier(MultiModalMAE(small_config()), 2)
        vol, img = torch.rand(3, 32, 32, 10), torch.rand(3, 32, 32)
        for av in ("dual", "oct", "enface"):
            p = predict(clf, vol, img, ModalityAvailability.from_mode(av))
            assert p.shape == (3, 2)
            torch.testing.assert_close(p.sum(-1), torch.ones(3), atol=1e-6, rtol=0)
        assert torch.equal(predict(clf, vol, img), predict(clf, vol, img))
        assert predict(clf, vol[0], img[0]).shape == (2,)


class TestFinetune:
    def test_phase1_freezes_encoder(self, cohort):
        vol, img, y = cohort
        clf = AdaptiveClassifier(MultiModalMAE(small_config()), 2)
        before = parameter_checksum(clf.encoder_parameters())
        head_before = parameter_checksum(clf.head.parameters())
        cfg = FinetuneConfig(phase1_epochs=2, phase2_epochs=0, batch_size=5)
        finetune(clf, (vol[:10], img[:10], y[:10]), cfg, FinetuneMode.FEW_SHOT)
        assert parameter_checksum(clf.encoder_parameters()) == before
        assert parameter_checksum(clf.head.parameters()) != head_before
        assert all(p.requires_grad for p in clf.encoder_parameters())

    def test_zero_epochs_is_noop(self, cohort):
        clf = AdaptiveClassifier(MultiModalMAE(small_config()), 2)
        before = parameter_checksum(clf.parameters())
        _, hist = finetune(clf, cohort, FinetuneConfig(phase1_epochs=0, phase2_epochs=0))
        assert hist == [] and parameter_checksum(clf.parameters()) == before

    def test_phase2_updates_encoder(self, cohort):
        clf = AdaptiveClassifier(MultiModalMAE(small_config()), 2)
        before = parameter_checksum(clf.encoder_parameters())
        finetune(clf, cohort, FinetuneConfig(phase1_epochs=0, phase2_epochs=1, warmup_steps=1))
        assert parameter_checksum(clf.encoder_parameters()) != before

    def test_separable_task_fits(self, cohort):
        vol, img, y = cohort
        clf = AdaptiveClassifier(MultiModalMAE(small_config()), 2, mode="enface")
        # oracle: a directly fit linear model separates the initial pooled features
        with torch.no_grad():
            feats = clf.norm_ir(forward_inference(clf.backbone, None, img)).numpy()
        oracle = LogisticRegression(C=1e4, max_iter=5000).fit(feats, y.numpy())
        assert oracle.score(feats, y.numpy()) == 1.0
        cfg = FinetuneConfig(phase1_epochs=0, phase2_epochs=25, batch_size=8, base_lr=3e-3, warmup_steps=5)
        assert 25 * math.ceil(40 / 8) <= 200
        finetune(clf, (vol, img, y), cfg, FinetuneMode.FULL, ModalityAvailability.from_mode("enface"))
        acc = (predict(clf, None, img, ModalityAvailability.from_mode("enface")).argmax(-1) == y).float().mean()
        assert float(acc) == 1.0

    def test_history_rows(self, cohort):
        vol, img, y = cohort
        clf = AdaptiveClassifier(MultiModalMAE(small_config()), 2)
        _, hist = finetune(clf, (vol[:20], img[:20], y[:20]), FinetuneConfig(phase1_epochs=1, phase2_epochs=1),
                           valid=(vol[20:], img[20:], y[20:]))
        assert [h["phase"] for h in hist] == ["head", "full"]
        assert all(0.0 <= h["val_auroc"] <= 1.0 for h in hist)

    def test_errors(self, cohort):
        vol, img, y = cohort
        clf = AdaptiveClassifier(MultiModalMAE(small_config()), 2)
        with pytest.raises(EmptyDataset):
            finetune(clf, (vol[:0], img[:0], y[:0]), FinetuneConfig())
        with pytest.raises(LabelOutOfRange):
            finetune(clf, (vol[:2], img[:2], torch.tensor([0, 2])), FinetuneConfig())

    def test_mode_selection(self):
        assert select_mode(500) is FinetuneMode.FEW_SHOT
        assert select_mode(501) is FinetuneMode.FULL

    def test_single_mode_on_dual_head(self):
        clf = AdaptiveClassifier(MultiModalMAE(small_config()), 2, mode="dual")
        vol, img = torch.rand(2, 32, 32, 10), torch.rand(2, 32, 32)
        p_dual = predict(clf, vol, img)
        p_en = predict(clf, None, img, ModalityAvailability.from_mode("enface"))
        assert p_en.shape == p_dual.shape
