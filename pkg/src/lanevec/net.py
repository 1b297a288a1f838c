"""Set-prediction network for lane-level vectorization.

Pieces: a small CNN+FPN image encoder, a prompt encoder for neighbor-tile
vectorizations with a FIFO memory bank, a query decoder (joint
self-attention, image cross-attention, prompt cross-attention and
intra-instance self-attention), and shared classification/regression heads
plus segmentation and topology heads.
"""
from __future__ import annotations

import io
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .mapmodel import GROUP_POLYGON, N_CLS, ElementInstance, TileFrame

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_groups: int = 8
    n_lines: int = 30
    n_points: int = 20
    n_classes: int = N_CLS
    d_model: int = 256
    n_heads: int = 8
    decoder_layers: int = 6
    memory_depth: int = 3
    image_size: int = 256
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    stage_strides: tuple[int, ...] = (2, 2, 2, 2)
    pe_frequencies: int = 8
    ffn_mult: int = 4

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.stage_strides = tuple(self.stage_strides)
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "memory_depth":
                if v < 0:
                    raise ValueError("memory_depth must be >= 0")
            elif isinstance(v, tuple):
                if not v or min(v) <= 0:
                    raise ValueError(f"{f.name} must hold positive values")
            elif v <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if len(self.encoder_channels) != len(self.stage_strides):
            raise ValueError("encoder_channels and stage_strides must have equal length")
        if self.image_size % self.stride:
            raise ValueError("image_size must be a multiple of the encoder stride")

    @property
    def stride(self) -> int:
        return int(np.prod(self.stage_strides))

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride


# ---------------------------------------------------------------- building blocks

def mlp(dims: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def sine_position_2d(h: int, w: int, d: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine encoding, shape (h*w, d)."""
    quarter = d // 4
    freqs = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float32) / quarter))
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w * 2 * math.pi
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    gy, gx = gy.reshape(-1, 1) * freqs, gx.reshape(-1, 1) * freqs
    pe = torch.cat([gx.sin(), gx.cos(), gy.sin(), gy.cos()], dim=1)
    if pe.shape[1] < d:
        pe = F.pad(pe, (0, d - pe.shape[1]))
    return pe


class ImageEncoder(nn.Module):
    """Four conv stages plus a top-down pyramid fused into one d_model map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stages = nn.ModuleList()
        c_in = 1
        for c, s in zip(cfg.encoder_channels, cfg.stage_strides):
            g = math.gcd(8, c)
            self.stages.append(nn.Sequential(
                nn.Conv2d(c_in, c, 3, stride=s, padding=1), nn.GroupNorm(g, c), nn.ReLU(),
                nn.Conv2d(c, c, 3, padding=1), nn.GroupNorm(g, c), nn.ReLU(),
            ))
            c_in = c
        self.lateral = nn.ModuleList(nn.Conv2d(c, cfg.d_model, 1) for c in cfg.encoder_channels)
        self.smooth = nn.Conv2d(cfg.d_model, cfg.d_model, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        lat = [l(f) for l, f in zip(self.lateral, feats)]
        top = lat[-1]
        pyramid = [top]
        for f in reversed(lat[:-1]):
            top = f + F.interpolate(top, size=f.shape[-2:], mode="nearest")
            pyramid.append(top)
        size = lat[-1].shape[-2:]
        fused = sum(F.adaptive_avg_pool2d(p, size) for p in pyramid)
        return self.smooth(fused)


class PromptEncoder(nn.Module):
    """Encode point sequences plus class vectors into (m, n_points, d) embeddings.

    Coordinates go through multi-frequency sin/cos features and an MLP; the
    class vector through its own MLP, broadcast over points; both are
    concatenated and mixed by a final MLP.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.register_buffer(
            "freqs", math.pi * 2.0 ** (torch.arange(cfg.pe_frequencies, dtype=torch.float32) - 2))
        self.geo = mlp([4 * cfg.pe_frequencies + 2, d, d])
        self.sem = mlp([cfg.n_classes, d, d])
        self.out = mlp([2 * d, d, d])

    def forward(self, points: torch.Tensor, classes: torch.Tensor) -> torch.Tensor:
        ang = points[..., None] * self.freqs  # (..., P, 2, F)
        pe = torch.cat([ang.sin().flatten(-2), ang.cos().flatten(-2), points], dim=-1)
        geo = self.geo(pe)
        sem = self.sem(classes)[..., None, :].expand_as(geo)
        return self.out(torch.cat([geo, sem], dim=-1))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h = cfg.d_model, cfg.n_heads
        self.self_attn = nn.MultiheadAttention(d, h, batch_first=True)
        self.image_attn = nn.MultiheadAttention(d, h, batch_first=True)
        self.prompt_attn = nn.MultiheadAttention(d, h, batch_first=True)
        self.intra_attn = nn.MultiheadAttention(d, h, batch_first=True)
        self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(5))
        self.ffn = mlp([d, cfg.ffn_mult * d, d])
        # prompt path starts silent; early noisy prompts otherwise slow down training
        nn.init.zeros_(self.prompt_attn.out_proj.weight)
        nn.init.zeros_(self.prompt_attn.out_proj.bias)
        self.keep_intra_weights = False
        self.intra_weights: torch.Tensor | None = None

    def forward(self, x, pos, image_tokens, image_pos, prompt_tokens, prompt_pad, has_prompt,
                intra_mask):
        q = self.norms[0](x)
        x = x + self.self_attn(q + pos, q + pos, q, need_weights=False)[0]
        q = self.norms[1](x)
        x = x + self.image_attn(q + pos, image_tokens + image_pos, image_tokens,
                                need_weights=False)[0]
        if prompt_tokens is not None:
            q = self.norms[2](x)
            out = self.prompt_attn(q + pos, prompt_tokens, prompt_tokens,
                                   key_padding_mask=prompt_pad, need_weights=False)[0]
            x = x + out * has_prompt[:, None, None]
        q = self.norms[3](x)
        out, w = self.intra_attn(q + pos, q + pos, q, attn_mask=intra_mask,
                                 need_weights=self.keep_intra_weights, average_attn_weights=True)
        if self.keep_intra_weights:
            self.intra_weights = w.detach()
        x = x + out
        return x + self.ffn(self.norms[4](x))


@dataclass
class PromptFrame:
    """One memory slot: instances of a scanned tile in the current tile's normalized frame."""

    points: torch.Tensor  # (m, n_points, 2)
    classes: torch.Tensor  # (m, n_classes) one-hot or probabilities
    ids: tuple[str, ...] = ()
    tile_index: tuple[int, int] = (0, 0)

    @property
    def size(self) -> int:
        return int(self.points.shape[0])


@dataclass
class PromptEmbedding:
    embeddings: torch.Tensor  # (M_ins, n_points, d)
    ids: tuple[str, ...]
    tiles: tuple[tuple[int, int], ...]
    weights: torch.Tensor | None = None  # per-frame weights
    points: torch.Tensor | None = None   # (M_ins, n_points, 2) raw prompt coordinates
    classes: torch.Tensor | None = None  # (M_ins, n_classes)

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])


@dataclass
class PromptRecord:
    """Stored vectorization of one tile, world frame."""

    tile_index: tuple[int, int]
    elements: tuple[ElementInstance, ...]


class MemoryBank:
    """FIFO of the last ``depth`` tiles' vectorizations."""

    def __init__(self, depth: int):
        self.depth = depth
        self.records: deque[PromptRecord] = deque()
        self.last_scan_order = -1

    def push(self, record: PromptRecord) -> "MemoryBank":
        if self.depth == 0:
            return self
        self.records.append(record)
        while len(self.records) > self.depth:
            self.records.popleft()
        return self

    def __len__(self) -> int:
        return len(self.records)

    def frames(self, frame: TileFrame, n_classes: int = N_CLS) -> list[PromptFrame]:
        """Stored records expressed in ``frame``'s normalized coordinates."""
        return [record_to_frame(r, frame, n_classes) for r in self.records]


def memory_update(bank: MemoryBank, record: PromptRecord) -> MemoryBank:
    return bank.push(record)


def record_to_frame(record: PromptRecord, frame: TileFrame, n_classes: int = N_CLS) -> PromptFrame:
    elems = record.elements
    if elems:
        pts = np.stack([frame.world_to_normalized(e.points) for e in elems])
        cls = np.eye(n_classes)[[e.cls for e in elems]]
    else:
        pts = np.zeros((0, 0, 2))
        cls = np.zeros((0, n_classes))
    return PromptFrame(torch.as_tensor(pts, dtype=torch.float32),
                       torch.as_tensor(cls, dtype=torch.float32),
                       tuple(e.instance_id for e in elems), tuple(record.tile_index))


@dataclass
class RawPredictions:
    cls_logits: torch.Tensor   # (B, N_l, N_cls + 1)
    points: torch.Tensor       # (B, N_l, N_p, 2), normalized
    poly_logits: torch.Tensor  # (B, N_g, 2): [group_polygon, background]
    poly_points: torch.Tensor  # (B, N_g, N_p, 2)
    seg_logits: torch.Tensor   # (B, H, W)
    topo_logits: list[torch.Tensor]  # per sample (M_ins, N_l)
    prompts: list[PromptEmbedding]

    def element_log_probs(self) -> torch.Tensor:
        """Log-probabilities over element classes plus background (polygon class excluded)."""
        logits = self.cls_logits.clone()
        logits[..., GROUP_POLYGON] = float("-inf")
        return logits.log_softmax(-1)

    def polygon_log_probs(self) -> torch.Tensor:
        return self.poly_logits.log_softmax(-1)


class LaneMapNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, P = cfg.d_model, cfg.n_points
        self.encoder = ImageEncoder(cfg)
        self.cpe = PromptEncoder(cfg)
        self.frame_weight = mlp([d, d, 1])
        nn.init.zeros_(self.frame_weight[-1].weight)
        nn.init.zeros_(self.frame_weight[-1].bias)
        self.n_inst = cfg.n_groups + cfg.n_lines + 1
        self.instance_embed = nn.Embedding(self.n_inst, d)
        self.point_embed = nn.Embedding(P, d)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.final_norm = nn.LayerNorm(d)
        self.cls_head = mlp([d, d, cfg.n_classes + 1])
        self.reg_head = mlp([d, d, 2])
        self.seg_head = mlp([d, d, d])
        self.topo_encoder = PromptEncoder(cfg)
        self.topo_heads = cfg.n_heads
        self.topo_mlp = mlp([4 * cfg.n_heads, d // 2, 1])
        self.register_buffer("image_pos", sine_position_2d(cfg.feature_size, cfg.feature_size, d),
                             persistent=False)
        inst = torch.arange(self.n_inst).repeat_interleave(P)
        self.register_buffer("intra_mask", inst[:, None] != inst[None, :], persistent=False)

    # -- components -------------------------------------------------------

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        s = self.cfg.image_size
        if images.dim() == 3:
            images = images[:, None]
        if images.shape[-2:] != (s, s) or images.shape[1] != 1:
            raise ValueError(f"expected images of shape (B, 1, {s}, {s}), got {tuple(images.shape)}")
        return self.encoder(images)

    def cpe_encode(self, frame: PromptFrame) -> torch.Tensor:
        if frame.size == 0:
            return self.instance_embed.weight.new_zeros(0, self.cfg.n_points, self.cfg.d_model)
        return self.cpe(frame.points, frame.classes)

    def memory_view(self, frames: Sequence[PromptFrame]) -> PromptEmbedding:
        """Concatenate per-frame embeddings scaled by learned slot weights.

        Weights are a softmax over occupied slots times the slot count, so a
        single slot gets weight 1 and equal slots reproduce their inputs.
        """
        d, P = self.cfg.d_model, self.cfg.n_points
        if not frames:
            return PromptEmbedding(self.instance_embed.weight.new_zeros(0, P, d), (), ())
        embs = [self.cpe_encode(f) for f in frames]
        pooled = torch.stack([e.mean(dim=(0, 1)) if e.shape[0] else e.new_zeros(d) for e in embs])
        w = torch.softmax(self.frame_weight(pooled).squeeze(-1), dim=0) * len(frames)
        rows = [e * w[i] for i, e in enumerate(embs)]
        ids = tuple(i for f in frames for i in f.ids)
        tiles = tuple(f.tile_index for f in frames for _ in range(f.size))
        full = [f for f in frames if f.size]
        pts = torch.cat([f.points for f in full]) if full else None
        cls = torch.cat([f.classes for f in full]) if full else None
        return PromptEmbedding(torch.cat(rows, dim=0), ids, tiles, w, pts, cls)

    def query_combination(self) -> torch.Tensor:
        """Hierarchical queries: instance embedding + point embedding, (n_inst, P, d)."""
        return self.instance_embed.weight[:, None, :] + self.point_embed.weight[None, :, :]

    def decode(self, feat: torch.Tensor, prompts: Sequence[PromptEmbedding],
               queries: torch.Tensor | None = None):
        cfg = self.cfg
        B = feat.shape[0]
        P, d = cfg.n_points, cfg.d_model
        image_tokens = feat.flatten(2).transpose(1, 2)
        q = self.query_combination() if queries is None else queries
        pos = q.reshape(1, -1, d).expand(B, -1, -1)
        x = pos
        sizes = [p.size for p in prompts]
        prompt_tokens = prompt_pad = has_prompt = None
        if sizes and max(sizes) > 0:
            m = max(sizes)
            prompt_tokens = feat.new_zeros(B, m * P, d)
            prompt_pad = torch.ones(B, m * P, dtype=torch.bool, device=feat.device)
            for b, p in enumerate(prompts):
                if p.size:
                    prompt_tokens[b, : p.size * P] = p.embeddings.reshape(-1, d)
                    prompt_pad[b, : p.size * P] = False
                else:
                    prompt_pad[b, 0] = False  # dummy key; output is zeroed below
            has_prompt = torch.tensor([float(s > 0) for s in sizes], device=feat.device)
        for layer in self.layers:
            x = layer(x, pos, image_tokens, self.image_pos, prompt_tokens, prompt_pad, has_prompt,
                      self.intra_mask)
        x = self.final_norm(x).reshape(B, self.n_inst, P, d)
        g, l = cfg.n_groups, cfg.n_lines
        return x[:, :g], x[:, g:g + l], x[:, g + l:]

    def predict_heads(self, f_g, f_l, f_s, feat):
        g = f_g.shape[1]
        both = torch.cat([f_g, f_l], dim=1)
        logits = self.cls_head(both.mean(dim=2))
        pts = torch.sigmoid(self.reg_head(both))
        kernel = self.seg_head(f_s.mean(dim=2)).squeeze(1)  # (B, d)
        seg = torch.einsum("bd,bdhw->bhw", kernel, feat) / math.sqrt(self.cfg.d_model)
        seg = F.interpolate(seg[:, None], size=(self.cfg.image_size,) * 2, mode="bilinear",
                            align_corners=False)[:, 0]
        poly_logits = logits[:, :g][..., [GROUP_POLYGON, self.cfg.n_classes]]
        return logits[:, g:], pts[:, g:], poly_logits, pts[:, :g], seg

    def topology_head(self, points: torch.Tensor, class_probs: torch.Tensor,
                      prompt: PromptEmbedding) -> torch.Tensor:
        """Connection logits between context instances (rows) and current instances (cols).

        Correlations are taken per head between the endpoint embeddings of both
        sides (first/last x first/last), so the head sees which ends touch and
        is indifferent to the stored direction of either polyline. Context
        instances are also re-encoded by the topology encoder and added to their
        prompt embeddings; with shared weights on both sides the correlation
        behaves like a similarity kernel on endpoint position.
        """
        n = points.shape[0]
        if prompt.size == 0:
            return points.new_zeros(0, n)
        cur = self.topo_encoder(points, class_probs)[:, [0, -1]]  # (N_l, 2, d)
        ctx = prompt.embeddings[:, [0, -1]]  # (M, 2, d)
        if prompt.points is not None:
            ctx = ctx + self.topo_encoder(prompt.points, prompt.classes)[:, [0, -1]]
        h = self.topo_heads
        dh = cur.shape[-1] // h
        corr = torch.einsum("mahk,nbhk->mnabh", ctx.reshape(-1, 2, h, dh), cur.reshape(n, 2, h, dh))
        return self.topo_mlp(corr.flatten(2) / math.sqrt(dh)).squeeze(-1)

    # -- full pass -------------------------------------------------------

    def forward(self, images: torch.Tensor,
                prompt_frames: Sequence[Sequence[PromptFrame]] | None = None) -> RawPredictions:
        feat = self.encode_image(images)
        B = feat.shape[0]
        if prompt_frames is None:
            prompt_frames = [[] for _ in range(B)]
        prompts = [self.memory_view(list(fr)) for fr in prompt_frames]
        f_g, f_l, f_s = self.decode(feat, prompts)
        cls_logits, pts, poly_logits, poly_pts, seg = self.predict_heads(f_g, f_l, f_s, feat)
        probs = cls_logits.softmax(-1)[..., : self.cfg.n_classes]
        topo = [self.topology_head(pts[b], probs[b], prompts[b]) for b in range(B)]
        return RawPredictions(cls_logits, pts, poly_logits, poly_pts, seg, topo, prompts)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {
            "encoder": list(self.encoder.parameters()),
            "cpe": list(self.cpe.parameters()),
            "memory_weights": list(self.frame_weight.parameters()),
            "decoder": list(self.layers.parameters()) + list(self.final_norm.parameters())
            + [self.instance_embed.weight, self.point_embed.weight],
            "cls_head": list(self.cls_head.parameters()),
            "reg_head": list(self.reg_head.parameters()),
            "seg_head": list(self.seg_head.parameters()),
            "topology_head": list(self.topo_encoder.parameters()) + list(self.topo_mlp.parameters()),
        }
        return groups


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: LaneMapNet, step: int = 0,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> None:
    """Write an ``.npz`` archive of named float arrays plus a JSON metadata blob."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format_version": CHECKPOINT_VERSION, "step": int(step),
            "model_config": asdict(model.cfg), "extra": extra or {}}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        state = optimizer.state_dict()
        opt_meta = {"param_groups": state["param_groups"], "params": []}
        for group in optimizer.param_groups:
            for p in group["params"]:
                opt_meta["params"].append(names[id(p)])
        for idx, st in state["state"].items():
            pname = opt_meta["params"][idx]
            for key, val in st.items():
                arrays[f"opt/{pname}/{key}"] = torch.as_tensor(val).cpu().numpy()
        meta["optimizer"] = opt_meta
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, optimizer_factory=None):
    """Returns (model, step, optimizer or None, extra)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays.pop("meta").tobytes().decode())
    except FileNotFoundError:
        raise
    except Exception as exc:  # zip/json/decode failures all mean a corrupt file
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    model = LaneMapNet(ModelConfig(**meta["model_config"]))
    state = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items()
             if k.startswith("param/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint parameters do not match config: {exc}") from None
    opt = None
    if optimizer_factory is not None:
        opt = optimizer_factory(model)
        if "optimizer" in meta:
            om = meta["optimizer"]
            st = {"param_groups": om["param_groups"], "state": {}}
            for idx, pname in enumerate(om["params"]):
                keys = [k for k in arrays if k.startswith(f"opt/{pname}/")]
                if keys:
                    st["state"][idx] = {k.rsplit("/", 1)[1]: torch.from_numpy(arrays[k].copy())
                                        for k in keys}
            opt.load_state_dict(st)
    return model, meta["step"], opt, meta.get("extra", {})
