"""Patch tokenization, positional tables, depth resampling and random masking."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import torch

from .core_types import PATCH_DEPTH, PATCH_HW, EnFaceImage, OctVolume
from .errors import InvalidK, InvalidRatio, InvalidTarget, ShapeMismatch


class PatchKind(str, enum.Enum):
    VOL_16x16x5 = "VOL_16x16x5"
    IMG_16x16 = "IMG_16x16"


@dataclass(frozen=True)
class PatchSpec:
    kind: PatchKind
    patch_h: int = PATCH_HW
    patch_w: int = PATCH_HW
    patch_d: int = 1

    def __post_init__(self):
        if min(self.patch_h, self.patch_w, self.patch_d) <= 0:
            raise ShapeMismatch("patch dimensions must be positive")

    @property
    def patch_len(self) -> int:
        return self.patch_h * self.patch_w * self.patch_d

    def grid(self, shape) -> tuple[int, ...]:
        dims = (self.patch_h, self.patch_w, self.patch_d)[: len(shape)]
        for size, p in zip(shape, dims):
            if size % p:
                raise ShapeMismatch(f"input shape {tuple(shape)} not divisible by patch {dims}")
        return tuple(s // p for s, p in zip(shape, dims))


VOLUME_SPEC = PatchSpec(PatchKind.VOL_16x16x5, patch_d=PATCH_DEPTH)
IMAGE_SPEC = PatchSpec(PatchKind.IMG_16x16)


def grid_positions(grid) -> np.ndarray:
    """Integer coordinates of every patch in row-major order, shape (N, ndim)."""
    return np.stack(np.unravel_index(np.arange(math.prod(grid)), grid), axis=1)


# -- torch patchify (batched; used by the model) ------------------------------

def patchify_volume(x: torch.Tensor, spec: PatchSpec = VOLUME_SPEC) -> torch.Tensor:
    """(B, H, W, D) -> (B, N1, ph*pw*pd), patches in row-major (h, w, d) order."""
    b, h, w, d = x.shape
    gh, gw, gd = spec.grid((h, w, d))
    x = x.reshape(b, gh, spec.patch_h, gw, spec.patch_w, gd, spec.patch_d)
    x = x.permute(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, gh * gw * gd, spec.patch_len)


def unpatchify_volume(p: torch.Tensor, shape, spec: PatchSpec = VOLUME_SPEC) -> torch.Tensor:
    h, w, d = shape
    gh, gw, gd = spec.grid((h, w, d))
    b = p.shape[0]
    x = p.reshape(b, gh, gw, gd, spec.patch_h, spec.patch_w, spec.patch_d)
    x = x.permute(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(b, h, w, d)


def patchify_image(x: torch.Tensor, spec: PatchSpec = IMAGE_SPEC) -> torch.Tensor:
    """(B, H, W) -> (B, N2, ph*pw)."""
    b, h, w = x.shape
    gh, gw = spec.grid((h, w))
    x = x.reshape(b, gh, spec.patch_h, gw, spec.patch_w).permute(0, 1, 3, 2, 4)
    return x.reshape(b, gh * gw, spec.patch_h * spec.patch_w)


def unpatchify_image(p: torch.Tensor, shape, spec: PatchSpec = IMAGE_SPEC) -> torch.Tensor:
    h, w = shape
    gh, gw = spec.grid((h, w))
    b = p.shape[0]
    x = p.reshape(b, gh, gw, spec.patch_h, spec.patch_w).permute(0, 1, 3, 2, 4)
    return x.reshape(b, h, w)


# -- single-sample API --------------------------------------------------------

def _as_grid(x, ndim):
    if isinstance(x, (OctVolume, EnFaceImage)):
        x = x.voxels if isinstance(x, OctVolume) else x.pixels
    x = np.asarray(x)
    if x.ndim != ndim:
        raise ShapeMismatch(f"expected a {ndim}-D grid, got shape {x.shape}")
    return x


def partition_volume(vol, spec: PatchSpec = VOLUME_SPEC) -> tuple[np.ndarray, np.ndarray]:
    """Split a volume into flattened patch vectors plus their grid coordinates."""
    x = _as_grid(vol, 3)
    grid = spec.grid(x.shape)
    patches = patchify_volume(torch.from_numpy(np.array(x, copy=True))[None], spec)[0].numpy()
    return patches, grid_positions(grid)


def unpartition_volume(patches, shape, spec: PatchSpec = VOLUME_SPEC) -> np.ndarray:
    t = torch.as_tensor(np.asarray(patches))[None]
    return unpatchify_volume(t, shape, spec)[0].numpy()


def partition_image(img, spec: PatchSpec = IMAGE_SPEC) -> tuple[np.ndarray, np.ndarray]:
    x = _as_grid(img, 2)
    grid = spec.grid(x.shape)
    patches = patchify_image(torch.from_numpy(np.array(x, copy=True))[None], spec)[0].numpy()
    return patches, grid_positions(grid)


def unpartition_image(patches, shape, spec: PatchSpec = IMAGE_SPEC) -> np.ndarray:
    t = torch.as_tensor(np.asarray(patches))[None]
    return unpatchify_image(t, shape, spec)[0].numpy()


def positional_encoding(positions, dim: int, grid, seed: int = 0, std: float = 0.02) -> np.ndarray:
    """Initial values for a learnable positional table.

    A table covering the whole patch grid is drawn from N(0, std^2) with a
    generator seeded by ``seed`` and the rows for ``positions`` are returned,
    so a coordinate always maps to the same row regardless of which other
    coordinates are requested.
    """
    if dim <= 0 or dim % 2:
        raise ShapeMismatch(f"embedding dim must be positive and even, got {dim}")
    positions = np.atleast_2d(np.asarray(positions, dtype=np.int64))
    grid = tuple(int(g) for g in grid)
    if positions.shape[1] != len(grid):
        raise ShapeMismatch(f"positions have {positions.shape[1]} coords, grid has {len(grid)}")
    if np.any(positions < 0) or np.any(positions >= np.asarray(grid)):
        raise ShapeMismatch("position outside grid")
    gen = torch.Generator().manual_seed(seed)
    table = torch.randn(math.prod(grid), dim, generator=gen, dtype=torch.float64) * std
    flat = np.ravel_multi_index(tuple(positions.T), grid)
    return table[flat].numpy()


def depth_resample(vol, target_d: int):
    """Linearly resample a volume along depth to ``target_d`` slices.

    Slice k is sampled at source depth (k + 0.5) * D / target_d - 0.5, clamped
    to the valid range.  Accepts a raw (H, W, D) array or an OctVolume and
    returns the same kind.
    """
    if target_d < 2 or target_d % PATCH_DEPTH:
        raise InvalidTarget(f"target depth must be a multiple of {PATCH_DEPTH} and >= 2, got {target_d}")
    meta = vol if isinstance(vol, OctVolume) else None
    x = np.asarray(meta.voxels if meta is not None else vol, dtype=np.float32)
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (H, W, D), got {x.shape}")
    d = x.shape[2]
    if d == target_d:
        out = x.copy()
    else:
        z = (np.arange(target_d) + 0.5) * d / target_d - 0.5
        z = np.clip(z, 0.0, d - 1)
        lo = np.floor(z).astype(int)
        hi = np.minimum(lo + 1, d - 1)
        t = (z - lo).astype(np.float32)
        out = x[:, :, lo] + t * (x[:, :, hi] - x[:, :, lo])
        out = np.clip(out, 0.0, 1.0).astype(np.float32)
    if meta is None:
        return out
    return OctVolume(out, meta.patient_id, meta.eye, meta.scan_id)


# -- masking ------------------------------------------------------------------

def masked_count(n: int, ratio: float) -> int:
    # round half away from zero; n * ratio is non-negative here
    return int(math.floor(n * ratio + 0.5))


@dataclass(frozen=True, eq=False)
class MaskView:
    masked: np.ndarray  # bool, length N
    ratio: float

    @property
    def n(self) -> int:
        return int(self.masked.shape[0])

    @property
    def masked_idx(self) -> np.ndarray:
        return np.flatnonzero(self.masked)

    @property
    def visible_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.masked)

    def __eq__(self, other):
        return isinstance(other, MaskView) and self.ratio == other.ratio and np.array_equal(self.masked, other.masked)


def _check_ratio(ratio: float, n: int):
    if not 0.0 < ratio < 1.0:
        raise InvalidRatio(f"mask ratio must lie in (0, 1), got {ratio}")
    if n < 2:
        raise InvalidRatio(f"need at least 2 tokens to mask, got {n}")


def sample_mask_view(n: int, ratio: float, rng: np.random.Generator) -> MaskView:
    _check_ratio(ratio, n)
    masked = np.zeros(n, dtype=bool)
    masked[rng.permutation(n)[: masked_count(n, ratio)]] = True
    masked.setflags(write=False)
    return MaskView(masked, ratio)


@dataclass(frozen=True, eq=False)
class MaskEnsemble:
    views: list
    pairwise_overlap: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.views)

    @property
    def n(self) -> int:
        return self.views[0].n

    @classmethod
    def from_views(cls, views) -> "MaskEnsemble":
        views = list(views)
        if not views:
            raise InvalidK("ensemble needs at least one view")
        if len({(v.n, v.ratio) for v in views}) != 1:
            raise InvalidRatio("all views must share N and ratio")
        overlap = {
            (i, j): np.flatnonzero(views[i].masked & views[j].masked)
            for i, j in combinations(range(len(views)), 2)
        }
        return cls(views, overlap)

    def masks(self) -> np.ndarray:
        """(K, N) boolean array."""
        return np.stack([v.masked for v in self.views])

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.n,
                "ratio": self.views[0].ratio,
                "views": [np.packbits(v.masked).tobytes().hex() for v in self.views],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MaskEnsemble":
        obj = json.loads(text)
        views = []
        for hexbits in obj["views"]:
            bits = np.unpackbits(np.frombuffer(bytes.fromhex(hexbits), dtype=np.uint8))[: obj["n"]]
            views.append(MaskView(bits.astype(bool), obj["ratio"]))
        return cls.from_views(views)


def sample_mask_ensemble(n: int, ratio: float, k: int, rng: np.random.Generator) -> MaskEnsemble:
    if k < 1:
        raise InvalidK(f"K must be >= 1, got {k}")
    return MaskEnsemble.from_views(sample_mask_view(n, ratio, rng) for _ in range(k))
