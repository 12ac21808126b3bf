import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from octfusion.core_types import (
    DemographicRecord,
    EnFaceImage,
    Eye,
    LabelRecord,
    ManifestRow,
    OctVolume,
    Sex,
    load_array,
    normalize_intensity,
    save_array,
    validate_pair,
)
from octfusion.errors import (
    DegenerateRange,
    LabelOutOfRange,
    NonFiniteInput,
    PairMismatch,
    ShapeMismatch,
)


def _vol(pid="P1", eye=Eye.RIGHT, scan="S1", shape=(16, 16, 5)):
    return OctVolume(np.full(shape, 0.5, np.float32), pid, eye, scan)


def _img(pid="P1", eye=Eye.RIGHT, scan="S1", shape=(16, 16)):
    return EnFaceImage(np.full(shape, 0.5, np.float32), pid, eye, scan)


class TestNormalizeIntensity:
    def test_lower_bound_maps_to_zero(self):
        assert np.all(normalize_intensity(np.full((3, 3), -2.0), -2.0, 5.0) == 0.0)

    def test_upper_bound_maps_to_one(self):
        assert np.all(normalize_intensity(np.full((3, 3), 5.0), -2.0, 5.0) == 1.0)

    def test_clipping(self):
        np.testing.assert_array_equal(normalize_intensity([-3.0, 6.0], -2.0, 5.0), [0.0, 1.0])

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFiniteInput):
            normalize_intensity([0.0, np.nan], 0.0, 1.0)
        with pytest.raises(NonFiniteInput):
            normalize_intensity([np.inf], 0.0, 1.0)

    @pytest.mark.parametrize("lo,hi", [(1.0, 1.0), (2.0, 1.0)])
    def test_degenerate_range(self, lo, hi):
        with pytest.raises(DegenerateRange):
            normalize_intensity([0.5], lo, hi)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 1)))
    def test_idempotent_on_unit_interval(self, x):
        once = normalize_intensity(x, 0.0, 1.0)
        np.testing.assert_array_equal(once, x)
        np.testing.assert_array_equal(normalize_intensity(once, 0.0, 1.0), once)


class TestDomainTypes:
    def test_volume_dims_enforced(self):
        with pytest.raises(ShapeMismatch):
            _vol(shape=(16, 16, 4))
        with pytest.raises(ShapeMismatch):
            _vol(shape=(15, 16, 5))

    def test_image_range_enforced(self):
        with pytest.raises(DegenerateRange):
            EnFaceImage(np.full((16, 16), 1.5, np.float32), "P", Eye.LEFT, "S")
        with pytest.raises(NonFiniteInput):
            EnFaceImage(np.full((16, 16), np.nan, np.float32), "P", Eye.LEFT, "S")

    def test_arrays_are_read_only(self):
        v = _vol()
        with pytest.raises(ValueError):
            v.voxels[0, 0, 0] = 0.0

    def test_label_range(self):
        LabelRecord("amd", 1, 2)
        with pytest.raises(LabelOutOfRange):
            LabelRecord("amd", 2, 2)
        with pytest.raises(LabelOutOfRange):
            LabelRecord("amd", 0, 1)

    def test_demographics_coerced(self):
        d = DemographicRecord("GE75", "FEMALE", "NHB")
        assert d.sex is Sex.FEMALE
        with pytest.raises(ValueError):
            DemographicRecord(sex="X")


class TestValidatePair:
    def test_matching(self):
        pair = validate_pair(_vol(), _img())
        assert pair.patient_id == "P1" and pair.eye is Eye.RIGHT and pair.scan_id == "S1"

    def test_eye_mismatch(self):
        with pytest.raises(PairMismatch) as e:
            validate_pair(_vol(eye=Eye.LEFT), _img(eye=Eye.RIGHT))
        assert e.value.field == "eye"

    def test_scan_mismatch(self):
        with pytest.raises(PairMismatch) as e:
            validate_pair(_vol(scan="A"), _img(scan="B"))
        assert e.value.field == "scan_id"

    def test_first_differing_field_reported(self):
        with pytest.raises(PairMismatch) as e:
            validate_pair(_vol(pid="A", scan="A"), _img(pid="B", scan="B"))
        assert e.value.field == "patient_id"


def test_array_file_round_trip(tmp_path):
    x = np.random.default_rng(0).random((16, 32, 5)).astype(np.float32)
    save_array(tmp_path / "a.f32", x)
    raw = (tmp_path / "a.f32").read_bytes()
    header, body = raw.split(b"\n", 1)
    assert b'"<f4"' in header
    np.testing.assert_array_equal(np.frombuffer(body, "<f4").reshape(x.shape), x)
    np.testing.assert_array_equal(load_array(tmp_path / "a.f32"), x)


def test_manifest_row_load(tmp_path):
    save_array(tmp_path / "o.f32", np.zeros((16, 16, 5)))
    save_array(tmp_path / "e.f32", np.ones((16, 16)))
    row = ManifestRow("P", "S", Eye.LEFT, "o.f32", "e.f32", 5, acquisition_time="2024-01-02T03:04:05")
    pair = row.load(tmp_path)
    assert pair.oct.shape == (16, 16, 5) and pair.acquisition_time.year == 2024
