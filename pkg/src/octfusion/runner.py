"""Experiment orchestration: configs, checkpoints, training loops, reports."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .adaptation import (
    AdaptiveClassifier,
    FinetuneConfig,
    ModalityAvailability,
    finetune,
    predict,
    select_mode,
)
from .backbone import ModelConfig, MultiModalMAE, RelationMatrix, sample_pretrain_masks
from .data_pipeline import Cohort, Split, subset_sample
from .errors import CheckpointCorrupted, InvalidConfig, MissingCheckpoint, TaskNotFound
from .evaluation import PredictionSet, evaluate_predictions, fairness_report, mean_ci
from .objectives import pretrain_losses

log = logging.getLogger(__name__)

OUTPUT_ENV = "OCTFUSION_OUT"


def output_root(default="runs") -> Path:
    return Path(os.environ.get(OUTPUT_ENV, default))


# -- configuration ----------------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.05
    seed: int = 0


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig())
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    data_dir: str = ""
    split_file: str = ""
    tasks: list = field(default_factory=lambda: ["synthetic"])
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    mode: str = "dual"

    def __post_init__(self):
        if not self.seeds:
            raise InvalidConfig("seeds must be non-empty")
        ModalityAvailability.from_mode(self.mode)

    def check_paths(self):
        for p in (self.data_dir, self.split_file):
            if p and not Path(p).exists():
                raise InvalidConfig(f"path does not exist: {p}")

    def to_flat(self) -> dict:
        flat = {}
        for section, obj in (("model", self.model), ("pretrain", self.pretrain), ("finetune", self.finetune)):
            d = obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)
            flat.update({f"{section}.{k}": v for k, v in d.items()})
        for k in ("data_dir", "split_file", "tasks", "seeds", "output_dir", "mode"):
            flat[k] = getattr(self, k)
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        sections = {"model": {}, "pretrain": {}, "finetune": {}}
        top = {}
        for key, val in flat.items():
            head, _, rest = key.partition(".")
            if rest and head in sections:
                sections[head][rest] = val
            else:
                top[key] = val
        base = ModelConfig().to_dict()
        base.update(sections["model"])
        return cls(
            model=ModelConfig.from_dict(base),
            pretrain=PretrainConfig(**sections["pretrain"]),
            finetune=FinetuneConfig(**sections["finetune"]),
            **top,
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_flat(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_flat(json.loads(Path(path).read_text()))

    @property
    def hash(self) -> str:
        return config_hash(self.to_flat())


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class RunRecord:
    config_hash: str
    version: str = __version__
    rows: list = field(default_factory=list)
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, default=str)


# -- checkpoints ----------------------------------------------------------------------------

CHECKPOINT_FORMAT = "octfusion-ckpt/1"


def _dtype_name(t: torch.Tensor) -> str:
    return str(t.dtype).replace("torch.", "")


def _write_tensors(tensors: dict, path: Path) -> list:
    index = []
    offset = 0
    with open(path, "wb") as fh:
        for name, t in tensors.items():
            t = t.detach().cpu().contiguous()
            arr = t.numpy()
            data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            fh.write(data)
            index.append({"name": name, "dtype": _dtype_name(t), "shape": list(t.shape),
                          "offset": offset, "nbytes": len(data)})
            offset += len(data)
    return index


def _read_tensors(path: Path, index: list) -> dict:
    raw = path.read_bytes()
    out = {}
    for e in index:
        np_dtype = torch.empty(0, dtype=getattr(torch, e["dtype"])).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(raw, dtype=np_dtype, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        out[e["name"]] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True).reshape(e["shape"]))
    return out


def save_checkpoint(directory, model: torch.nn.Module, config: dict, step: int = 0, epoch: int = 0,
                    optimizer: Optional[torch.optim.Optimizer] = None, rng: Optional[np.random.Generator] = None,
                    extra: Optional[dict] = None) -> Path:
    """config.json + tensors.bin (little-endian blobs) + state.json with a sha256 of the blobs."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        for pid, st in sd["state"].items():
            for key, val in st.items():
                tensors[f"opt.{pid}.{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
        opt_meta = sd["param_groups"]
    index = _write_tensors(tensors, d / "tensors.bin")
    (d / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True, default=str))
    state = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "global_step": step,
        "epoch": epoch,
        "index": index,
        "optimizer_param_groups": opt_meta,
        "rng": rng.bit_generator.state if rng is not None else None,
        "torch_rng": torch.get_rng_state().tolist(),
        "sha256": hashlib.sha256((d / "tensors.bin").read_bytes()).hexdigest(),
        "extra": extra or {},
    }
    (d / "state.json").write_text(json.dumps(state, default=str))
    return d


@dataclass
class Checkpoint:
    config: dict
    state: dict
    tensors: dict

    @property
    def model_state(self) -> dict:
        return {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}

    def optimizer_state(self) -> Optional[dict]:
        groups = self.state.get("optimizer_param_groups")
        if groups is None:
            return None
        st = {}
        for name, t in self.tensors.items():
            if name.startswith("opt."):
                _, pid, key = name.split(".", 2)
                st.setdefault(int(pid), {})[key] = t
        return {"state": st, "param_groups": groups}

    def restore_rng(self) -> Optional[np.random.Generator]:
        if self.state.get("torch_rng") is not None:
            torch.set_rng_state(torch.tensor(self.state["torch_rng"], dtype=torch.uint8))
        if self.state.get("rng") is None:
            return None
        rng = np.random.default_rng()
        rng.bit_generator.state = self.state["rng"]
        return rng


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    if not (d / "state.json").exists():
        raise MissingCheckpoint(f"no checkpoint at {d}")
    state = json.loads((d / "state.json").read_text())
    if state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointCorrupted(f"unsupported checkpoint format {state.get('format')!r}")
    blob = d / "tensors.bin"
    if hashlib.sha256(blob.read_bytes()).hexdigest() != state["sha256"]:
        raise CheckpointCorrupted(f"checksum mismatch in {blob}")
    config = json.loads((d / "config.json").read_text())
    return Checkpoint(config, state, _read_tensors(blob, state["index"]))


def load_pretrained(directory) -> tuple[MultiModalMAE, Checkpoint]:
    ck = load_checkpoint(directory)
    cfg = ExperimentConfig.from_flat(ck.config)
    model = MultiModalMAE(cfg.model)
    model.load_state_dict(ck.model_state)
    return model, ck


# -- pre-training ---------------------------------------------------------------------------

LOSS_LOG_COLUMNS = ("step", "epoch", "l_recon", "l_cross_relation", "l_consistency", "l_total", "lr", "config_hash")


def _append_csv(path: Path, rows: Sequence[dict], columns) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        if new:
            w.writeheader()
        w.writerows(rows)


def pretrain_loop(config: ExperimentConfig, cohort: Cohort, out_dir=None, resume_from=None,
                  epochs: Optional[int] = None, check_invariants: bool = True):
    """Self-supervised pre-training over ``cohort``; checkpoints after every epoch.

    Returns (model, RunRecord).  Resuming restores weights, optimizer moments and
    the sampling stream, so a resumed run continues exactly where it stopped.
    """
    start = time.time()
    out = Path(out_dir or Path(config.output_dir) / "pretrain")
    out.mkdir(parents=True, exist_ok=True)
    cfg = config.model
    pc = config.pretrain
    h = config.hash
    model = MultiModalMAE(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=pc.lr, weight_decay=pc.weight_decay)
    rng = np.random.default_rng(pc.seed)
    step, first_epoch = 0, 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        model.load_state_dict(ck.model_state)
        opt.load_state_dict(ck.optimizer_state())
        rng = ck.restore_rng()
        step, first_epoch = ck.state["global_step"], ck.state["epoch"] + 1
    vol, img, _ = cohort.tensors()
    n = vol.shape[0]
    record = RunRecord(config_hash=h, config=config.to_flat())
    log_path = out / "pretrain_log.csv"
    last_epoch = (epochs if epochs is not None else pc.epochs) - 1
    model.train()
    for epoch in range(first_epoch, last_epoch + 1):
        perm = rng.permutation(n)
        rows = []
        for b in range(0, n, pc.batch_size):
            idx = torch.from_numpy(perm[b:b + pc.batch_size])
            masks_oct, masks_ir, indicators, _ = sample_pretrain_masks(cfg, len(idx), rng)
            outputs = model.forward_pretrain(vol[idx], img[idx], masks_oct, masks_ir, indicators)
            if check_invariants:
                for (layer, d), values in outputs.dense_relations.items():
                    RelationMatrix(d, values, layer).check()
            losses = pretrain_losses(outputs, vol[idx], img[idx], cfg)
            opt.zero_grad(set_to_none=True)
            losses.l_total.backward()
            opt.step()
            step += 1
            row = {"step": step, "epoch": epoch, **losses.as_floats(), "lr": opt.param_groups[0]["lr"],
                   "config_hash": h}
            rows.append(row)
        _append_csv(log_path, rows, LOSS_LOG_COLUMNS)
        record.rows.extend(rows)
        save_checkpoint(out / "checkpoint", model, config.to_flat(), step=step, epoch=epoch, optimizer=opt, rng=rng)
        log.info("epoch %d step %d l_total %.5f", epoch, step, rows[-1]["l_total"])
    record.wall_clock = time.time() - start
    (out / "run_record.json").write_text(record.to_json())
    return model, record


# -- fine-tuning / evaluation -------------------------------------------------------------------

def finetune_run(pretrained: MultiModalMAE, config: ExperimentConfig, train: Cohort, valid: Optional[Cohort] = None,
                 mode: Optional[str] = None, seed: Optional[int] = None, out_dir=None, task: str = "synthetic"):
    mode = mode or config.mode
    seed = config.finetune.seed if seed is None else seed
    ft = FinetuneConfig(**{**config.finetune.to_dict(), "seed": seed})
    torch.manual_seed(seed)
    clf = AdaptiveClassifier(copy.deepcopy(pretrained), ft.num_classes, mode, seed=seed)
    clf, history = finetune(
        clf, train.tensors(), ft, select_mode(len(train)), ModalityAvailability.from_mode(mode),
        valid.tensors() if valid is not None and len(valid) else None,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        h = config.hash
        _write_rows(out / "history.csv", [{**r, "config_hash": h} for r in history])
        save_checkpoint(out / "checkpoint", clf, config.to_flat(), step=len(history),
                        extra={"mode": mode, "num_classes": ft.num_classes, "task": task, "seed": seed})
    return clf, history


def load_classifier(directory) -> AdaptiveClassifier:
    ck = load_checkpoint(directory)
    cfg = ExperimentConfig.from_flat(ck.config)
    extra = ck.state["extra"]
    clf = AdaptiveClassifier(MultiModalMAE(cfg.model), extra["num_classes"], extra["mode"])
    clf.load_state_dict(ck.model_state)
    clf.eval()
    return clf


def _write_rows(path: Path, rows: list) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def prediction_set(clf: AdaptiveClassifier, cohort: Cohort, mode: str) -> PredictionSet:
    vol, img, y = cohort.tensors()
    av = ModalityAvailability.from_mode(mode)
    probs = predict(clf, vol if av.has_oct else None, img if av.has_enface else None, av)
    return PredictionSet(probs.double().numpy(), y.numpy(), cohort.patient_ids, cohort.demographics)


METRIC_COLUMNS = ("task", "mode", "metric", "value", "config_hash")
FAIRNESS_COLUMNS = ("task", "mode", "attribute", "metric", "protected", "privileged", "ratio", "status", "config_hash")


def evaluate_run(checkpoint, test: Cohort, task: str, mode: str, out_dir=None, available_tasks=None):
    """Metrics (and the fairness grid when demographics are present) for one checkpoint.

    Returns (metric rows, fairness rows).
    """
    if available_tasks is not None and task not in available_tasks:
        raise TaskNotFound(task)
    if not Path(checkpoint, "state.json").exists():
        raise MissingCheckpoint(f"no checkpoint at {checkpoint}")
    clf = load_classifier(checkpoint)
    h = config_hash(load_checkpoint(checkpoint).config)
    preds = prediction_set(clf, test, mode)
    metrics = evaluate_predictions(preds)
    rows = [{"task": task, "mode": mode, "metric": k, "value": v, "config_hash": h} for k, v in metrics.items()]
    fair_rows = []
    if preds.demographics and preds.num_classes == 2:
        for r in fairness_report(preds).rows():
            fair_rows.append({"task": task, "mode": mode, **r, "config_hash": h})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / f"metrics_{task}_{mode}.csv", rows)
        if fair_rows:
            _write_rows(out / f"fairness_{task}_{mode}.csv", fair_rows)
    return rows, fair_rows


# -- data-efficiency harness ---------------------------------------------------------------------

@dataclass
class HarnessResult:
    runs: list  # {size, seed, auroc}
    summary: list  # {size, n_seeds, mean, ci_low, ci_high, ci_width}
    advisories: list = field(default_factory=list)

    def ci_width(self, size: int, n_seeds: Optional[int] = None) -> float:
        vals = [r["auroc"] for r in self.runs if r["size"] == size][: n_seeds]
        _, lo, hi = mean_ci(vals)
        return hi - lo


def subset_harness(pretrained: MultiModalMAE, config: ExperimentConfig, train: Cohort, test: Cohort,
                   sizes=(200, 100, 50), seeds: Sequence[int] = tuple(range(1, 11)), mode: Optional[str] = None,
                   out_dir=None, plot: bool = True) -> HarnessResult:
    """Fine-tune on random subsets of ``train`` and score AUROC on the fixed ``test`` cohort."""
    from .evaluation import auroc

    mode = mode or config.mode
    h = config.hash
    runs = []
    for size in sizes:
        for seed in seeds:
            sub = train.select(subset_sample(list(range(len(train))), size, seed))
            clf, _ = finetune_run(pretrained, config, sub, mode=mode, seed=seed)
            preds = prediction_set(clf, test, mode)
            score = auroc(preds.scores if preds.num_classes > 2 else preds.scores[:, 1], preds.labels)
            runs.append({"size": size, "seed": seed, "auroc": score, "mode": mode, "config_hash": h})
            log.info("subset size %d seed %d auroc %.4f", size, seed, score)
    summary = []
    for size in sizes:
        vals = [r["auroc"] for r in runs if r["size"] == size]
        mean, lo, hi = mean_ci(vals)
        summary.append({"size": size, "n_seeds": len(vals), "mean": mean, "ci_low": lo, "ci_high": hi,
                        "ci_width": hi - lo, "mode": mode, "config_hash": h})
    advisories = []
    by_size = sorted(summary, key=lambda r: -r["size"])
    for big, small in zip(by_size, by_size[1:]):
        if small["mean"] > big["mean"]:
            advisories.append(f"mean AUROC at n={small['size']} exceeds n={big['size']} (non-monotone)")
    result = HarnessResult(runs, summary, advisories)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "subset_runs.csv", runs)
        _write_rows(out / "subset_summary.csv", summary)
        (out / "advisories.txt").write_text("\n".join(advisories) + ("\n" if advisories else ""))
        if plot:
            from .plotting import plot_subset_summary

            plot_subset_summary(summary, out / "subset_auroc.png")
    return result


def split_cohort(cohort: Cohort, assignment: dict) -> dict:
    return {s: cohort.by_patients(p for p, a in assignment.items() if a == s) for s in Split}
