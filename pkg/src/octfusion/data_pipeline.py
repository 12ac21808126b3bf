"""Manifest curation, patient-level splits, subset sampling and synthetic cohorts."""
from __future__ import annotations

import csv
import enum
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .core_types import (
    MANIFEST_COLUMNS,
    AgeGroup,
    DemographicRecord,
    EnFaceImage,
    Eye,
    LabelRecord,
    Laterality,
    ManifestRow,
    OctVolume,
    PairedSample,
    RaceEthnicity,
    Sex,
    load_array,
    save_array,
    validate_pair,
)
from .errors import InvalidPrevalence, SubsetTooLarge, TooFewPatients


# -- curation ------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    patient_id: str
    scan_id: str
    eye: str
    n_frames: int
    modality_tag: str = "OCT+ENFACE"
    has_image_dir: bool = True
    has_metadata: bool = True
    is_macular: bool = True
    is_valid: bool = True  # False for completed/invalid entries

    def __post_init__(self):
        if self.n_frames < 0:
            raise ValueError("n_frames must be >= 0")


CURATION_RULES = OrderedDict(
    [
        ("missing_image_dir", lambda r: not r.has_image_dir),
        ("missing_metadata", lambda r: not r.has_metadata),
        ("fewer_than_one_frame", lambda r: r.n_frames < 1),
        ("invalid_or_completed", lambda r: not r.is_valid),
        ("non_macular", lambda r: not r.is_macular),
    ]
)


def curate(records: Iterable[ManifestRecord]):
    """Apply the exclusion rules in order; each record is charged to the first rule it fails.

    Returns (retained records, OrderedDict rule -> number excluded).
    """
    log = OrderedDict((name, 0) for name in CURATION_RULES)
    kept = []
    for rec in records:
        for name, rule in CURATION_RULES.items():
            if rule(rec):
                log[name] += 1
                break
        else:
            kept.append(rec)
    return kept, log


def clean_control_patients(patient_labels: dict, disease_tasks: Optional[Iterable[str]] = None) -> set:
    """Patients with no positive label in any of ``disease_tasks``.

    ``patient_labels`` maps patient_id -> {task_id: label}.  Stands in for the
    "no retinal or glaucoma diagnosis code" rule.
    """
    tasks = None if disease_tasks is None else set(disease_tasks)
    clean = set()
    for pid, labels in patient_labels.items():
        relevant = [v for t, v in labels.items() if tasks is None or t in tasks]
        if not any(int(v) > 0 for v in relevant):
            clean.add(pid)
    return clean


# -- splitting -------------------------------------------------------------------------

class Split(str, enum.Enum):
    PRETRAIN = "PRETRAIN"
    FT_TRAIN = "FT_TRAIN"
    FT_VALID = "FT_VALID"
    FT_TEST = "FT_TEST"


def largest_remainder(n: int, weights: Sequence[float]) -> list[int]:
    """Integer apportionment of ``n`` proportional to ``weights`` (ties go to the earlier slot)."""
    total = float(sum(weights))
    quotas = [n * w / total for w in weights]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_patients(patients, pretrain_frac: float = 0.8, ft_ratios=(4, 1, 5), seed: int = 0) -> dict:
    """Assign every patient to exactly one of PRETRAIN / FT_TRAIN / FT_VALID / FT_TEST."""
    ids = sorted(set(patients))
    if len(ids) < 10:
        raise TooFewPatients(f"need at least 10 patients, got {len(ids)}")
    if not 0.0 <= pretrain_frac < 1.0:
        raise ValueError("pretrain_frac must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_pre, n_ft = largest_remainder(len(ids), (pretrain_frac, 1.0 - pretrain_frac))
    counts = largest_remainder(n_ft, ft_ratios)
    labels = [Split.PRETRAIN] * n_pre
    for split, c in zip((Split.FT_TRAIN, Split.FT_VALID, Split.FT_TEST), counts):
        labels += [split] * c
    return dict(zip(order, labels))


def subset_sample(train_set: Sequence, n: int, seed: int) -> list:
    if n > len(train_set):
        raise SubsetTooLarge(f"requested {n} samples from a pool of {len(train_set)}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(train_set), size=n, replace=False))
    return [train_set[i] for i in idx]


# -- synthetic data ------------------------------------------------------------------------

@dataclass(frozen=True)
class SignalSpec:
    """Class-conditional signal planted into a noisy constant background.

    The volume receives a Gaussian blob; the en face image receives a Gaussian
    spot at the same (h, w) location, i.e. the blob's planar projection.
    Centers are fractions of the grid extent.
    """

    class_id: int = 0
    oct_center: tuple = (0.5, 0.5, 0.5)
    oct_radius: float = 6.0
    oct_amplitude: float = 0.5
    enface_center: Optional[tuple] = None  # defaults to the blob's (h, w)
    enface_radius: float = 6.0
    enface_amplitude: float = 0.35
    background: float = 0.3
    noise_sd: float = 0.05

    def __post_init__(self):
        top = self.background + max(self.oct_amplitude, self.enface_amplitude)
        if self.background < 0 or top > 1.0 + 1e-9:
            raise ValueError("background + amplitude must stay within [0, 1]")


def _gaussian(shape, center, radius):
    axes = [np.arange(s, dtype=np.float64) for s in shape]
    grids = np.meshgrid(*axes, indexing="ij")
    sq = sum(((g - c * (s - 1)) / r) ** 2 for g, c, s, r in zip(grids, center, shape, radius))
    return np.exp(-0.5 * sq)


def generate_synthetic_pair(
    spec: SignalSpec,
    dims=(64, 64, 10),
    rng: Optional[np.random.Generator] = None,
    patient_id: str = "P0000",
    eye: Eye = Eye.RIGHT,
    scan_id: Optional[str] = None,
    task_id: str = "synthetic",
    num_classes: int = 2,
):
    rng = np.random.default_rng(0) if rng is None else rng
    h, w, d = dims
    vol = np.full((h, w, d), spec.background)
    img = np.full((h, w), spec.background)
    if spec.class_id != 0:
        # depth radius scaled so the blob spans a similar fraction of slices
        vol += spec.oct_amplitude * _gaussian(
            (h, w, d), spec.oct_center, (spec.oct_radius, spec.oct_radius, max(spec.oct_radius * d / h, 1.0))
        )
        ec = spec.enface_center if spec.enface_center is not None else spec.oct_center[:2]
        img += spec.enface_amplitude * _gaussian((h, w), ec, (spec.enface_radius, spec.enface_radius))
    if spec.noise_sd > 0:
        vol += rng.normal(0.0, spec.noise_sd, vol.shape)
        img += rng.normal(0.0, spec.noise_sd, img.shape)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    scan_id = scan_id or f"{patient_id}-{Eye(eye).value[0]}"
    pair = validate_pair(OctVolume(vol, patient_id, eye, scan_id), EnFaceImage(img, patient_id, eye, scan_id))
    label = LabelRecord(task_id, int(spec.class_id > 0) if num_classes == 2 else spec.class_id,
                        num_classes, Laterality(Eye(eye).value))
    return pair, label


# proportions from the full-cohort demographics table (patient level for sex/race,
# scan level for age); missing EHR data folded into UNKNOWN
DEFAULT_DEMOGRAPHIC_MIX = {
    "sex": {Sex.FEMALE: 0.4544, Sex.MALE: 0.3033, Sex.UNKNOWN: 0.2423},
    "race": {
        RaceEthnicity.NHW: 0.4399,
        RaceEthnicity.NHB: 0.2065,
        RaceEthnicity.HISPANIC: 0.0541,
        RaceEthnicity.OTHER: 0.0460,
        RaceEthnicity.UNKNOWN: 0.2535,
    },
    "age": {
        AgeGroup.LT45: 0.1019,
        AgeGroup.A45_64: 0.2885,
        AgeGroup.A65_74: 0.2255,
        AgeGroup.GE75: 0.2165,
        AgeGroup.UNKNOWN: 0.1676,
    },
}

_ATTR_OF = {**{v: "sex" for v in Sex}, **{v: "race" for v in RaceEthnicity}, **{v: "age" for v in AgeGroup}}


def _resolve_mix(mix) -> dict:
    """Accept the nested default layout or a flat {enum value: prob} override."""
    out = {k: dict(v) for k, v in DEFAULT_DEMOGRAPHIC_MIX.items()}
    if not mix:
        return out
    flat = {}
    for key, val in mix.items():
        if key in ("sex", "race", "age"):
            out[key] = dict(val)
        else:
            flat.setdefault(_ATTR_OF[key], {})[key] = val
    out.update(flat)
    return out


def _draw(rng, dist: dict):
    keys = list(dist)
    p = np.asarray([dist[k] for k in keys], dtype=np.float64)
    return keys[rng.choice(len(keys), p=p / p.sum())]


@dataclass
class Cohort:
    samples: list
    labels: list
    demographics: list
    manifest: list

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i], self.labels[i], self.demographics[i]

    @property
    def patient_ids(self) -> list:
        return [s.patient_id for s in self.samples]

    def select(self, indices) -> "Cohort":
        idx = list(indices)
        return Cohort(
            [self.samples[i] for i in idx],
            [self.labels[i] for i in idx],
            [self.demographics[i] for i in idx],
            [self.manifest[i] for i in idx],
        )

    def by_patients(self, patients) -> "Cohort":
        keep = set(patients)
        return self.select(i for i, s in enumerate(self.samples) if s.patient_id in keep)

    def tensors(self):
        """Stacked (B, H, W, D) volumes, (B, H, W) images and (B,) labels."""
        vol = torch.from_numpy(np.stack([s.oct.voxels for s in self.samples]))
        img = torch.from_numpy(np.stack([s.enface.pixels for s in self.samples]))
        y = torch.tensor([l.label for l in self.labels], dtype=torch.long)
        return vol, img, y


def patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_cohort(
    n_patients: int,
    prevalence: float = 0.5,
    demographic_mix=None,
    rng=None,
    dims=(64, 64, 10),
    eyes=(Eye.RIGHT,),
    seed: Optional[int] = None,
    base_spec: Optional[SignalSpec] = None,
    center_jitter: float = 0.15,
    task_id: str = "synthetic",
) -> Cohort:
    """Synthetic cohort with one pair per patient-eye and Bernoulli(prevalence) labels.

    Each patient draws from its own stream derived from (seed, patient index),
    so any patient can be regenerated independently of the others.
    """
    if not 0.0 < prevalence < 1.0:
        raise InvalidPrevalence(f"prevalence must lie in (0, 1), got {prevalence}")
    if seed is None:
        seed = int((rng or np.random.default_rng()).integers(2**31))
    mix = _resolve_mix(demographic_mix)
    base = base_spec or SignalSpec(class_id=1)
    samples, labels, demo, manifest = [], [], [], []
    for p in range(n_patients):
        prng = patient_rng(seed, p)
        pid = f"P{p:05d}"
        record = DemographicRecord(_draw(prng, mix["age"]), _draw(prng, mix["sex"]), _draw(prng, mix["race"]))
        for eye in eyes:
            eye = Eye(eye)
            positive = prng.random() < prevalence
            center = tuple(
                float(np.clip(c + prng.uniform(-center_jitter, center_jitter), 0.1, 0.9)) for c in base.oct_center
            )
            spec = replace(base, class_id=int(positive), oct_center=center)
            pair, label = generate_synthetic_pair(spec, dims, prng, pid, eye, task_id=task_id)
            samples.append(pair)
            labels.append(label)
            demo.append(record)
            manifest.append(ManifestRecord(pid, pair.scan_id, eye.value, dims[2]))
    return Cohort(samples, labels, demo, manifest)


# -- on-disk layout ------------------------------------------------------------------------

LABEL_COLUMNS = ("patient_id", "scan_id", "eye", "task_id", "label", "num_classes", "laterality",
                 "age_group", "sex", "race_ethnicity")


def write_cohort(cohort: Cohort, out_dir) -> Path:
    """manifest.csv + labels.csv + arrays/*.f32 (JSON header + little-endian float32)."""
    out = Path(out_dir)
    (out / "arrays").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fm, open(out / "labels.csv", "w", newline="") as fl:
        mw = csv.DictWriter(fm, fieldnames=MANIFEST_COLUMNS)
        lw = csv.DictWriter(fl, fieldnames=LABEL_COLUMNS)
        mw.writeheader()
        lw.writeheader()
        for s, lab, dem in zip(cohort.samples, cohort.labels, cohort.demographics):
            oct_rel = f"arrays/{s.scan_id}_oct.f32"
            ir_rel = f"arrays/{s.scan_id}_enface.f32"
            save_array(out / oct_rel, s.oct.voxels)
            save_array(out / ir_rel, s.enface.pixels)
            mw.writerow({
                "patient_id": s.patient_id, "scan_id": s.scan_id, "eye": s.eye.value,
                "oct_path": oct_rel, "enface_path": ir_rel, "n_frames": s.oct.shape[2],
                "modality_tag": "OCT+ENFACE",
                "acquisition_time": s.acquisition_time.isoformat() if s.acquisition_time else "",
            })
            lw.writerow({
                "patient_id": s.patient_id, "scan_id": s.scan_id, "eye": s.eye.value,
                "task_id": lab.task_id, "label": lab.label, "num_classes": lab.num_classes,
                "laterality": lab.laterality.value, "age_group": dem.age_group.value,
                "sex": dem.sex.value, "race_ethnicity": dem.race_ethnicity.value,
            })
    return out


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        return [
            ManifestRow(
                patient_id=r["patient_id"], scan_id=r["scan_id"], eye=Eye(r["eye"]),
                oct_path=r["oct_path"], enface_path=r["enface_path"], n_frames=int(r["n_frames"]),
                modality_tag=r.get("modality_tag") or "OCT+ENFACE",
                acquisition_time=r.get("acquisition_time") or None,
            )
            for r in csv.DictReader(fh)
        ]


def read_cohort(root, task_id: Optional[str] = None) -> Cohort:
    root = Path(root)
    rows = read_manifest(root / "manifest.csv")
    with open(root / "labels.csv", newline="") as fh:
        label_rows = [r for r in csv.DictReader(fh) if task_id is None or r["task_id"] == task_id]
    by_scan = {r["scan_id"]: r for r in label_rows}
    samples, labels, demo, manifest = [], [], [], []
    for row in rows:
        if row.scan_id not in by_scan:
            continue
        lr = by_scan[row.scan_id]
        samples.append(row.load(root))
        labels.append(LabelRecord(lr["task_id"], int(lr["label"]), int(lr["num_classes"]), lr["laterality"]))
        demo.append(DemographicRecord(lr["age_group"], lr["sex"], lr["race_ethnicity"]))
        manifest.append(ManifestRecord(row.patient_id, row.scan_id, row.eye.value, row.n_frames, row.modality_tag))
    return Cohort(samples, labels, demo, manifest)


def task_ids(root) -> set:
    with open(Path(root) / "labels.csv", newline="") as fh:
        return {r["task_id"] for r in csv.DictReader(fh)}


def write_split(assignment: dict, path) -> None:
    Path(path).write_text(json.dumps({pid: s.value for pid, s in sorted(assignment.items())}, indent=1))


def read_split(path) -> dict:
    return {pid: Split(s) for pid, s in json.loads(Path(path).read_text()).items()}
