"""Two-stream masked autoencoder with bidirectional cross-attention fusion.

Shapes follow (B, N, C): batch, tokens, channels.  Volumes are (B, H, W, D)
and en face images (B, H, W).  Everything is written so the model also runs
in float64, which the gradient checks rely on.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimMismatch, InvalidConfig, InvariantViolation, MaskMismatch, ShapeMismatch
from .patching import (
    IMAGE_SPEC,
    VOLUME_SPEC,
    patchify_image,
    patchify_volume,
    positional_encoding,
    grid_positions,
)

OCT = "oct"
IR = "ir"


class Direction(str, enum.Enum):
    OCT_QUERIES_IR = "OCT_QUERIES_IR"
    IR_QUERIES_OCT = "IR_QUERIES_OCT"


@dataclass
class ModelConfig:
    embed_dim: int = 192
    enc_depth_oct: int = 4
    enc_depth_ir: int = 4
    n_heads: int = 4
    fusion_layers: Optional[tuple] = None  # None -> the single middle block
    dec_dim: int = 96
    dec_depth: int = 2
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    mask_ratio_oct: Optional[float] = None
    mask_ratio_ir: Optional[float] = None
    k_views: int = 2
    relation_mask_ratio: float = 0.5
    lambda_recon: float = 1.0
    lambda_relation: float = 1.0
    lambda_consistency: float = 1.0
    per_patch_norm: bool = False
    vol_shape: tuple = (64, 64, 10)
    img_shape: tuple = (64, 64)
    seed: int = 0

    def __post_init__(self):
        self.vol_shape = tuple(int(v) for v in self.vol_shape)
        self.img_shape = tuple(int(v) for v in self.img_shape)
        if self.fusion_layers is None:
            self.fusion_layers = (max(min(self.enc_depth_oct, self.enc_depth_ir) // 2 - 1, 0),)
        self.fusion_layers = tuple(sorted(int(i) for i in self.fusion_layers))
        self.validate()

    def validate(self):
        C = self.embed_dim
        if C <= 0 or C % self.n_heads:
            raise InvalidConfig(f"embed_dim {C} must be divisible by n_heads {self.n_heads}")
        if self.dec_dim % self.dec_heads or self.dec_dim > C:
            raise InvalidConfig("dec_dim must be <= embed_dim and divisible by dec_heads")
        depth = min(self.enc_depth_oct, self.enc_depth_ir)
        if self.dec_depth >= max(depth, 1) and not (depth == 0 and self.dec_depth == 0):
            raise InvalidConfig("decoders must be shallower than the encoders")
        if any(i < 0 or i >= depth for i in self.fusion_layers):
            raise InvalidConfig(f"fusion layers {self.fusion_layers} outside [0, {depth})")
        for r in (self.ratio_oct, self.ratio_ir):
            if not 0.0 < r < 1.0:
                raise InvalidConfig(f"mask ratio {r} outside (0, 1)")
        if not 0.0 <= self.relation_mask_ratio < 1.0:
            raise InvalidConfig("relation_mask_ratio must lie in [0, 1)")
        if self.k_views < 1:
            raise InvalidConfig("k_views must be >= 1")
        if min(self.lambda_recon, self.lambda_relation, self.lambda_consistency) < 0:
            raise InvalidConfig("loss weights must be non-negative")

    @property
    def ratio_oct(self) -> float:
        return self.mask_ratio if self.mask_ratio_oct is None else self.mask_ratio_oct

    @property
    def ratio_ir(self) -> float:
        return self.mask_ratio if self.mask_ratio_ir is None else self.mask_ratio_ir

    @property
    def vol_grid(self):
        return VOLUME_SPEC.grid(self.vol_shape)

    @property
    def img_grid(self):
        return IMAGE_SPEC.grid(self.img_shape)

    @property
    def n_oct(self) -> int:
        return math.prod(self.vol_grid)

    @property
    def n_ir(self) -> int:
        return math.prod(self.img_grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion_layers"] = list(self.fusion_layers)
        d["vol_shape"] = list(self.vol_shape)
        d["img_shape"] = list(self.img_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# -- attention primitives -------------------------------------------------------

def masked_softmax(logits: torch.Tensor, erased: Optional[torch.Tensor]) -> torch.Tensor:
    """Softmax over the last axis that ignores ``erased`` keys.

    Rows whose keys are all erased produce all-zero weights instead of NaN.
    """
    if erased is None:
        return logits.softmax(dim=-1)
    logits = logits.masked_fill(erased, torch.finfo(logits.dtype).min)
    probs = logits.softmax(dim=-1).masked_fill(erased, 0.0)
    return probs


class Attention(nn.Module):
    """Multi-head attention that also returns head-averaged probabilities."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context=None, erased=None):
        context = x if context is None else context
        b, nq, c = x.shape
        nk = context.shape[1]
        h = self.heads
        q = self.q(x).reshape(b, nq, h, c // h).transpose(1, 2)
        k = self.k(context).reshape(b, nk, h, c // h).transpose(1, 2)
        v = self.v(context).reshape(b, nk, h, c // h).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(c // h)
        probs = masked_softmax(logits, None if erased is None else erased[:, None])
        out = (probs @ v).transpose(1, 2).reshape(b, nq, c)
        return self.proj(out), probs.mean(dim=1)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))[0]
        return x + self.mlp(self.norm2(x))


class CrossModalFusion(nn.Module):
    """Residual bidirectional cross-attention between the two token streams.

    Each stream is normalized with its own LayerNorm and shifted by a learnable
    modality embedding before acting as query or key/value.  The update is
    purely additive, so zeroing every parameter of this block leaves both
    streams untouched.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_oct = nn.LayerNorm(dim)
        self.norm_ir = nn.LayerNorm(dim)
        self.embed_oct = nn.Parameter(torch.zeros(dim))
        self.embed_ir = nn.Parameter(torch.zeros(dim))
        self.oct_from_ir = Attention(dim, heads)
        self.ir_from_oct = Attention(dim, heads)

    def forward(self, z_oct, z_ir, erased=None):
        """``erased`` optionally maps Direction -> (B, Nq, Nk) bool of blocked relations."""
        if z_oct.shape[-1] != z_ir.shape[-1]:
            raise DimMismatch(f"channel mismatch {z_oct.shape[-1]} vs {z_ir.shape[-1]}")
        erased = erased or {}
        a = self.norm_oct(z_oct) + self.embed_oct
        b = self.norm_ir(z_ir) + self.embed_ir
        upd_oct, rel_oi = self.oct_from_ir(a, b, erased.get(Direction.OCT_QUERIES_IR))
        upd_ir, rel_io = self.ir_from_oct(b, a, erased.get(Direction.IR_QUERIES_OCT))
        relations = {Direction.OCT_QUERIES_IR: rel_oi, Direction.IR_QUERIES_OCT: rel_io}
        return z_oct + upd_oct, z_ir + upd_ir, relations


@dataclass
class RelationMatrix:
    direction: Direction
    values: torch.Tensor  # (B, Nq, Nk) or (Nq, Nk)
    layer: int

    def check(self, atol: float = 1e-5):
        v = self.values
        if torch.any(v < 0) or torch.any(v > 1 + atol):
            raise InvariantViolation("relation entries must lie in [0, 1]")
        if not torch.allclose(v.sum(-1), torch.ones_like(v.sum(-1)), atol=atol):
            raise InvariantViolation("relation rows must sum to 1")


# -- encoders / decoders --------------------------------------------------------

class Encoder(nn.Module):
    """Patch embedding + learnable positional table + transformer blocks.

    Only visible tokens are embedded; ``idx`` carries their grid indices.
    """

    def __init__(self, patch_len: int, grid, dim: int, depth: int, heads: int, mlp_ratio: float, seed: int):
        super().__init__()
        self.patch_embed = nn.Linear(patch_len, dim)
        n = math.prod(grid)
        table = positional_encoding(grid_positions(grid), dim, grid, seed=seed)
        self.pos_embed = nn.Parameter(torch.tensor(table, dtype=torch.float32))
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.num_tokens = n

    def embed(self, patches, idx):
        if patches.shape[1] != idx.shape[1]:
            raise ShapeMismatch("patch and index counts differ")
        return self.patch_embed(patches) + self.pos_embed[idx]

    def forward(self, patches, idx):
        x = self.embed(patches, idx)
        for blk in self.blocks:
            x = blk(x)
        return x


class Decoder(nn.Module):
    def __init__(self, enc_dim: int, dim: int, depth: int, heads: int, mlp_ratio: float,
                 grid, patch_len: int, seed: int):
        super().__init__()
        self.norm_in = nn.LayerNorm(enc_dim)
        self.embed = nn.Linear(enc_dim, dim)
        table = positional_encoding(grid_positions(grid), dim, grid, seed=seed)
        self.pos_embed = nn.Parameter(torch.tensor(table, dtype=torch.float32))
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.pred = nn.Linear(dim, patch_len)
        self.num_tokens = math.prod(grid)

    def forward(self, latents, vis_idx, mask_token):
        """Return (hidden states for all N positions, per-position patch predictions)."""
        b, nv, _ = latents.shape
        n = self.num_tokens
        x = self.embed(self.norm_in(latents))
        full = mask_token.to(x.dtype).expand(b, n, -1).clone()
        full = full.scatter(1, vis_idx[..., None].expand(-1, -1, x.shape[-1]), x)
        full = full + self.pos_embed
        for blk in self.blocks:
            full = blk(full)
        hidden = self.norm(full)
        return hidden, self.pred(hidden)


class RelationHead(nn.Module):
    """Predicts relation matrices from decoder states as a bilinear score map.

    With ``copy_through`` set, the head returns the (partially erased) dense
    matrix it is given; this debug mode makes the relation loss vanish when
    nothing is erased.
    """

    def __init__(self, dim: int, keys, copy_through: bool = False):
        super().__init__()
        self.keys = list(keys)
        self.q = nn.ModuleDict({self._name(k): nn.Linear(dim, dim) for k in self.keys})
        self.k = nn.ModuleDict({self._name(k): nn.Linear(dim, dim) for k in self.keys})
        self.copy_through = copy_through

    @staticmethod
    def _name(key):
        layer, direction = key
        return f"{layer}_{Direction(direction).value}"

    def forward(self, h_oct, h_ir, masked_dense=None):
        out = {}
        for key in self.keys:
            if self.copy_through:
                out[key] = masked_dense[key]
                continue
            name = self._name(key)
            src, dst = (h_oct, h_ir) if key[1] == Direction.OCT_QUERIES_IR else (h_ir, h_oct)
            scores = self.q[name](src) @ self.k[name](dst).transpose(-2, -1)
            out[key] = (scores / math.sqrt(src.shape[-1])).softmax(dim=-1)
        return out


# -- outputs --------------------------------------------------------------------

@dataclass
class ViewOutputs:
    masks: dict  # modality -> (B, N) bool
    masked_idx: dict  # modality -> (B, m) long, ascending
    visible_idx: dict
    pred: dict  # modality -> (B, m, patch_len), masked positions only
    pred_full: dict  # modality -> (B, N, patch_len)
    relation_indicator: dict  # (layer, direction) -> (B, Nq, Nk) bool
    predicted_relations: dict  # (layer, direction) -> (B, Nq, Nk)
    pass2_relations: dict


@dataclass
class PretrainOutputs:
    dense_relations: dict  # (layer, direction) -> (B, Nq, Nk), detached
    views: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.views)


def split_indices(mask: torch.Tensor):
    """(B, N) bool with equal counts per row -> (visible_idx, masked_idx), ascending."""
    counts = mask.sum(dim=1)
    if counts.numel() and not torch.all(counts == counts[0]):
        raise MaskMismatch("every sample in a batch must mask the same number of tokens")
    m = int(counts[0]) if counts.numel() else 0
    order = torch.argsort(mask.to(torch.int8), dim=1, stable=True)
    n = mask.shape[1]
    return order[:, : n - m], order[:, n - m:]


def gather_tokens(x, idx):
    return x.gather(1, idx[..., None].expand(-1, -1, x.shape[-1]))


def gather_pairs(mat, rows, cols):
    """mat (B, Nq, Nk), rows (B, r), cols (B, c) -> (B, r, c)."""
    sub = mat.gather(1, rows[..., None].expand(-1, -1, mat.shape[-1]))
    return sub.gather(2, cols[:, None, :].expand(-1, rows.shape[1], -1))


class MultiModalMAE(nn.Module):
    def __init__(self, config: ModelConfig, copy_through_relations: bool = False):
        super().__init__()
        self.config = cfg = config
        C = cfg.embed_dim
        self.enc_oct = Encoder(VOLUME_SPEC.patch_len, cfg.vol_grid, C, cfg.enc_depth_oct,
                               cfg.n_heads, cfg.mlp_ratio, cfg.seed)
        self.enc_ir = Encoder(IMAGE_SPEC.patch_len, cfg.img_grid, C, cfg.enc_depth_ir,
                              cfg.n_heads, cfg.mlp_ratio, cfg.seed + 1)
        self.fusion = nn.ModuleDict({str(i): CrossModalFusion(C, cfg.n_heads) for i in cfg.fusion_layers})
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.dec_dim))
        self.dec_oct = Decoder(C, cfg.dec_dim, cfg.dec_depth, cfg.dec_heads, cfg.mlp_ratio,
                               cfg.vol_grid, VOLUME_SPEC.patch_len, cfg.seed + 2)
        self.dec_ir = Decoder(C, cfg.dec_dim, cfg.dec_depth, cfg.dec_heads, cfg.mlp_ratio,
                              cfg.img_grid, IMAGE_SPEC.patch_len, cfg.seed + 3)
        self.relation_head = RelationHead(cfg.dec_dim, self.relation_keys, copy_through_relations)
        self._init_weights(cfg.seed)

    @property
    def relation_keys(self):
        return [(i, d) for i in self.config.fusion_layers for d in Direction]

    def _init_weights(self, seed):
        gen = torch.Generator().manual_seed(seed + 1000)
        for name, mod in self.named_modules():
            if isinstance(mod, nn.Linear):
                bound = math.sqrt(6.0 / (mod.in_features + mod.out_features))
                with torch.no_grad():
                    mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen) * 2 * bound - bound)
                    mod.bias.zero_()
        with torch.no_grad():
            self.mask_token.copy_(torch.randn(self.mask_token.shape, generator=gen) * 0.02)

    # -- parameter groups --------------------------------------------------

    def encoder_parameters(self):
        """Encoders and fusion: the part frozen in the first fine-tuning phase."""
        yield from self.enc_oct.parameters()
        yield from self.enc_ir.parameters()
        yield from self.fusion.parameters()

    def pretrain_only_parameters(self):
        yield self.mask_token
        yield from self.dec_oct.parameters()
        yield from self.dec_ir.parameters()
        yield from self.relation_head.parameters()

    def zero_fusion_(self):
        with torch.no_grad():
            for p in self.fusion.parameters():
                p.zero_()
        return self

    # -- encoding ------------------------------------------------------------

    def patchify(self, oct_vol=None, ir_img=None):
        p_oct = None if oct_vol is None else patchify_volume(oct_vol)
        p_ir = None if ir_img is None else patchify_image(ir_img)
        return p_oct, p_ir

    def encode(self, patches, idx, modality: str):
        """Single-stream encoding of visible tokens, no fusion."""
        enc = self.enc_oct if modality == OCT else self.enc_ir
        if patches.shape[-1] != enc.patch_embed.in_features:
            raise ShapeMismatch(f"patch length {patches.shape[-1]} does not match {modality} encoder")
        return enc(patches, idx)

    def encode_pair(self, p_oct, idx_oct, p_ir, idx_ir, fuse: bool = True, erased=None):
        """Run both encoders block by block, fusing after the configured blocks.

        ``erased`` maps layer -> {Direction: (B, Nq, Nk) bool}.
        Returns (z_oct, z_ir, relations) where relations maps (layer, Direction)
        to head-averaged attention probabilities.
        """
        x = self.enc_oct.embed(p_oct, idx_oct)
        y = self.enc_ir.embed(p_ir, idx_ir)
        relations = {}
        depth = max(len(self.enc_oct.blocks), len(self.enc_ir.blocks))
        for i in range(depth):
            if i < len(self.enc_oct.blocks):
                x = self.enc_oct.blocks[i](x)
            if i < len(self.enc_ir.blocks):
                y = self.enc_ir.blocks[i](y)
            if fuse and str(i) in self.fusion:
                x, y, rel = self.fusion[str(i)](x, y, None if erased is None else erased.get(i))
                for d, r in rel.items():
                    relations[(i, d)] = r
        return x, y, relations

    def decode(self, latents, vis_idx, masked_idx, modality: str):
        """Reconstruct patches at ``masked_idx`` from visible latents."""
        dec = self.dec_oct if modality == OCT else self.dec_ir
        if vis_idx.shape[1] + masked_idx.shape[1] != dec.num_tokens or latents.shape[1] != vis_idx.shape[1]:
            raise MaskMismatch("visible latents inconsistent with the mask view")
        hidden, pred_full = dec(latents, vis_idx, self.mask_token)
        return hidden, pred_full, gather_tokens(pred_full, masked_idx)

    # -- pre-training ----------------------------------------------------------

    def dense_relations(self, p_oct, p_ir):
        """Pass 1: all tokens, no masking; returned matrices carry no gradient."""
        b = p_oct.shape[0]
        dev = p_oct.device
        idx_oct = torch.arange(p_oct.shape[1], device=dev).expand(b, -1)
        idx_ir = torch.arange(p_ir.shape[1], device=dev).expand(b, -1)
        with torch.no_grad():
            _, _, rel = self.encode_pair(p_oct, idx_oct, p_ir, idx_ir)
        return {k: v.detach() for k, v in rel.items()}

    def forward_pretrain(self, oct_vol, ir_img, masks_oct, masks_ir, relation_indicators, dense=None):
        """Two-pass pre-training forward.

        masks_oct: (K, B, N1) bool, masks_ir: (K, B, N2) bool.
        relation_indicators: list over views of {(layer, Direction): (B, Nq, Nk) bool}
        marking the dense relation entries erased for that view.
        ``dense`` may carry pass-1 relations computed earlier; they are constants
        either way.
        """
        p_oct, p_ir = self.patchify(oct_vol, ir_img)
        if dense is None:
            dense = self.dense_relations(p_oct, p_ir)
        out = PretrainOutputs(dense_relations=dense)
        for k in range(masks_oct.shape[0]):
            m_oct, m_ir = masks_oct[k], masks_ir[k]
            vis_oct, msk_oct = split_indices(m_oct)
            vis_ir, msk_ir = split_indices(m_ir)
            indicator = relation_indicators[k]
            erased = {}
            for (layer, d), ind in indicator.items():
                rows, cols = (vis_oct, vis_ir) if d == Direction.OCT_QUERIES_IR else (vis_ir, vis_oct)
                erased.setdefault(layer, {})[d] = gather_pairs(ind, rows, cols)
            z_oct, z_ir, rel2 = self.encode_pair(
                gather_tokens(p_oct, vis_oct), vis_oct, gather_tokens(p_ir, vis_ir), vis_ir, erased=erased
            )
            h_oct, full_oct, pred_oct = self.decode(z_oct, vis_oct, msk_oct, OCT)
            h_ir, full_ir, pred_ir = self.decode(z_ir, vis_ir, msk_ir, IR)
            masked_dense = {key: dense[key].masked_fill(indicator[key], 0.0) for key in dense}
            predicted = self.relation_head(h_oct, h_ir, masked_dense)
            out.views.append(
                ViewOutputs(
                    masks={OCT: m_oct, IR: m_ir},
                    masked_idx={OCT: msk_oct, IR: msk_ir},
                    visible_idx={OCT: vis_oct, IR: vis_ir},
                    pred={OCT: pred_oct, IR: pred_ir},
                    pred_full={OCT: full_oct, IR: full_ir},
                    relation_indicator=indicator,
                    predicted_relations=predicted,
                    pass2_relations=rel2,
                )
            )
        return out

    # -- inference -------------------------------------------------------------

    def forward_features(self, oct_vol=None, ir_img=None):
        """Mean-pooled features; fusion runs only when both inputs are present."""
        if oct_vol is None and ir_img is None:
            raise ShapeMismatch("need at least one modality")
        if oct_vol is not None and ir_img is not None:
            p_oct, p_ir = self.patchify(oct_vol, ir_img)
            b = p_oct.shape[0]
            idx_oct = torch.arange(p_oct.shape[1], device=p_oct.device).expand(b, -1)
            idx_ir = torch.arange(p_ir.shape[1], device=p_ir.device).expand(b, -1)
            z_oct, z_ir, _ = self.encode_pair(p_oct, idx_oct, p_ir, idx_ir)
            return torch.cat([z_oct.mean(1), z_ir.mean(1)], dim=-1)
        if oct_vol is not None:
            p = patchify_volume(oct_vol)
            idx = torch.arange(p.shape[1], device=p.device).expand(p.shape[0], -1)
            return self.enc_oct(p, idx).mean(1)
        p = patchify_image(ir_img)
        idx = torch.arange(p.shape[1], device=p.device).expand(p.shape[0], -1)
        return self.enc_ir(p, idx).mean(1)


# -- sampling helpers -------------------------------------------------------------

def sample_pretrain_masks(config: ModelConfig, batch: int, rng: np.random.Generator):
    """Draw K mask views per sample per modality plus relation-erasure indicators.

    Returns (masks_oct (K,B,N1), masks_ir (K,B,N2), indicators list[K]) and the
    per-sample MaskEnsembles for auditing.
    """
    from .objectives import mask_relation_indicator
    from .patching import sample_mask_ensemble

    K = config.k_views
    ens_oct = [sample_mask_ensemble(config.n_oct, config.ratio_oct, K, rng) for _ in range(batch)]
    ens_ir = [sample_mask_ensemble(config.n_ir, config.ratio_ir, K, rng) for _ in range(batch)]
    masks_oct = torch.from_numpy(np.stack([e.masks() for e in ens_oct], axis=1))
    masks_ir = torch.from_numpy(np.stack([e.masks() for e in ens_ir], axis=1))
    shapes = {
        Direction.OCT_QUERIES_IR: (config.n_oct, config.n_ir),
        Direction.IR_QUERIES_OCT: (config.n_ir, config.n_oct),
    }
    indicators = []
    for _ in range(K):
        view = {}
        for layer in config.fusion_layers:
            for d, (nq, nk) in shapes.items():
                view[(layer, d)] = torch.from_numpy(
                    np.stack([mask_relation_indicator(nq, nk, config.relation_mask_ratio, rng) for _ in range(batch)])
                )
        indicators.append(view)
    return masks_oct, masks_ir, indicators, (ens_oct, ens_ir)
