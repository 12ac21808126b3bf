"""Domain types for paired volumetric OCT / en face samples.

Arrays are stored as float32 numpy grids with intensities in [0, 1].  The
on-disk format for a single array is a one-line JSON header followed by raw
little-endian float32 bytes.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateRange, LabelOutOfRange, NonFiniteInput, PairMismatch, ShapeMismatch

PATCH_HW = 16
PATCH_DEPTH = 5


class Eye(str, enum.Enum):
    LEFT = "LEFT"
    RIGHT = "RIGHT"


class Laterality(str, enum.Enum):
    LEFT = "LEFT"
    RIGHT = "RIGHT"
    BOTH = "BOTH"


class AgeGroup(str, enum.Enum):
    LT45 = "LT45"
    A45_64 = "A45_64"
    A65_74 = "A65_74"
    GE75 = "GE75"
    UNKNOWN = "UNKNOWN"


class Sex(str, enum.Enum):
    FEMALE = "FEMALE"
    MALE = "MALE"
    UNKNOWN = "UNKNOWN"


class RaceEthnicity(str, enum.Enum):
    NHW = "NHW"
    NHB = "NHB"
    HISPANIC = "HISPANIC"
    OTHER = "OTHER"
    UNKNOWN = "UNKNOWN"


def normalize_intensity(raw, lo: float, hi: float) -> np.ndarray:
    """Map ``raw`` linearly so that ``lo -> 0`` and ``hi -> 1``, clipping outside."""
    arr = np.asarray(raw, dtype=np.float64)
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise DegenerateRange(f"need lo < hi, got lo={lo}, hi={hi}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("input contains NaN or Inf")
    return np.clip((arr - lo) / (hi - lo), 0.0, 1.0)


def _check_grid(values: np.ndarray, ndim: int, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != ndim:
        raise ShapeMismatch(f"{what} must be {ndim}-D, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise NonFiniteInput(f"{what} contains NaN or Inf")
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise DegenerateRange(f"{what} intensities must lie in [0, 1]")
    h, w = values.shape[:2]
    if h % PATCH_HW or w % PATCH_HW:
        raise ShapeMismatch(f"{what} H and W must be divisible by {PATCH_HW}, got {h}x{w}")
    return values


@dataclass(frozen=True, eq=False)
class OctVolume:
    """H x W x D volume; D indexes B-scans."""

    voxels: np.ndarray
    patient_id: str
    eye: Eye
    scan_id: str

    def __post_init__(self):
        vox = _check_grid(self.voxels, 3, "OCT volume")
        if vox.shape[2] % PATCH_DEPTH:
            raise ShapeMismatch(
                f"OCT depth must be divisible by {PATCH_DEPTH}, got {vox.shape[2]}; see depth_resample"
            )
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "eye", Eye(self.eye))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True, eq=False)
class EnFaceImage:
    pixels: np.ndarray
    patient_id: str
    eye: Eye
    scan_id: str

    def __post_init__(self):
        pix = _check_grid(self.pixels, 2, "en face image")
        pix.setflags(write=False)
        object.__setattr__(self, "pixels", pix)
        object.__setattr__(self, "eye", Eye(self.eye))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class PairedSample:
    oct: OctVolume
    enface: EnFaceImage
    acquisition_time: Optional[datetime] = None

    @property
    def patient_id(self) -> str:
        return self.oct.patient_id

    @property
    def eye(self) -> Eye:
        return self.oct.eye

    @property
    def scan_id(self) -> str:
        return self.oct.scan_id


def validate_pair(oct: OctVolume, enface: EnFaceImage, acquisition_time=None) -> PairedSample:
    for name in ("patient_id", "eye", "scan_id"):
        a, b = getattr(oct, name), getattr(enface, name)
        if a != b:
            raise PairMismatch(name, a, b)
    return PairedSample(oct, enface, acquisition_time)


@dataclass(frozen=True)
class LabelRecord:
    task_id: str
    label: int
    num_classes: int = 2
    laterality: Laterality = Laterality.BOTH

    def __post_init__(self):
        if self.num_classes < 2:
            raise LabelOutOfRange(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 <= self.label < self.num_classes:
            raise LabelOutOfRange(f"label {self.label} outside [0, {self.num_classes})")
        object.__setattr__(self, "laterality", Laterality(self.laterality))


@dataclass(frozen=True)
class DemographicRecord:
    age_group: AgeGroup = AgeGroup.UNKNOWN
    sex: Sex = Sex.UNKNOWN
    race_ethnicity: RaceEthnicity = RaceEthnicity.UNKNOWN

    def __post_init__(self):
        object.__setattr__(self, "age_group", AgeGroup(self.age_group))
        object.__setattr__(self, "sex", Sex(self.sex))
        object.__setattr__(self, "race_ethnicity", RaceEthnicity(self.race_ethnicity))


# -- raw array files ---------------------------------------------------------

def save_array(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = json.dumps({"shape": list(arr.shape), "dtype": "<f4"})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(arr.tobytes(order="C"))


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = fh.read()
    arr = np.frombuffer(data, dtype=header.get("dtype", "<f4"))
    return arr.reshape(header["shape"]).astype(np.float32)


MANIFEST_COLUMNS = (
    "patient_id",
    "scan_id",
    "eye",
    "oct_path",
    "enface_path",
    "n_frames",
    "modality_tag",
    "acquisition_time",
)


@dataclass
class ManifestRow:
    """One line of a dataset manifest, pointing at the two array files."""

    patient_id: str
    scan_id: str
    eye: Eye
    oct_path: str
    enface_path: str
    n_frames: int
    modality_tag: str = "OCT+ENFACE"
    acquisition_time: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def load(self, root=None) -> PairedSample:
        root = Path(root) if root is not None else Path(".")
        vol = OctVolume(load_array(root / self.oct_path), self.patient_id, Eye(self.eye), self.scan_id)
        img = EnFaceImage(load_array(root / self.enface_path), self.patient_id, Eye(self.eye), self.scan_id)
        when = datetime.fromisoformat(self.acquisition_time) if self.acquisition_time else None
        return validate_pair(vol, img, when)
