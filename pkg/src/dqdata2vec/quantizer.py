"""Level-specific pre-processing, adapter convolutions and the grouped
online K-means codebooks (with a Gumbel-softmax alternative for ablations)."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import SelfAttentionLayer, instance_norm, lengths_to_mask, sg
from .errors import ConfigError, DataError

L2_EPS = 1e-12
EXTRA_BLOCKS = ("none", "cnn", "transformer")


@dataclass
class AdapterConfig:
    kernel: int = 1
    stride: int = 1
    groups: int = 2
    deep_layers: int = 2
    deep_kernel: int = 3
    extra: str = "none"  # block preceding the base conv: none | cnn | transformer

    @property
    def enabled_deep(self) -> bool:
        return self.extra != "none"

    def validate(self, regime: str = "shallow", allow_unstable: bool = False):
        if self.extra not in EXTRA_BLOCKS:
            raise ConfigError(f"unknown adapter block {self.extra!r}; choose from {EXTRA_BLOCKS}")
        if self.stride != 1:
            raise ConfigError("adapter stride must be 1 (frame rate is preserved)")
        if self.enabled_deep and regime == "shallow" and not allow_unstable:
            raise ConfigError(
                "extra adapter block in the shallow regime collapses training; "
                "enable it only with the deep regime (or allow_unstable for ablations)"
            )


@dataclass
class QuantizationResult:
    q: torch.Tensor  # same shape as e
    indices: torch.Tensor  # [..., G]
    joint_index: torch.Tensor  # [...]
    km_loss: Optional[torch.Tensor] = None
    soft_probs: Optional[torch.Tensor] = None  # gumbel only: [..., G, N]


class Codebook(nn.Module):
    """G groups of N learnable sub-codewords, each of width D/G."""

    def __init__(self, dim, num_codewords, groups=2, level="frame", generator=None, init_scale=1.0):
        super().__init__()
        if dim % groups:
            raise ConfigError(f"dim={dim} not divisible by groups={groups}")
        if level not in ("utterance", "frame"):
            raise ConfigError(f"unknown codebook level {level!r}")
        self.groups, self.num_codewords, self.dim, self.level = groups, num_codewords, dim, level
        sub = dim // groups
        if init_scale <= 0:
            raise ConfigError("codebook init_scale must be positive")
        init = torch.randn(groups, num_codewords, sub, generator=generator) * (init_scale / math.sqrt(sub))
        self.entries = nn.Parameter(init)

    def extra_repr(self):
        return f"G={self.groups}, N={self.num_codewords}, D={self.dim}, level={self.level}"


def joint_index(indices: torch.Tensor, num_codewords: int) -> torch.Tensor:
    """Mixed-radix code over groups: i_1·N + i_2 for two groups."""
    out = torch.zeros(indices.shape[:-1], dtype=torch.long, device=indices.device)
    for g in range(indices.shape[-1]):
        out = out * num_codewords + indices[..., g]
    return out


def l2_normalize(x, dim=-1):
    return x / (x.norm(dim=dim, keepdim=True) + L2_EPS)


def masked_mean_pool(x, lengths):
    """Length-aware mean over time: [B, T, D] -> [B, 1, D]."""
    valid = lengths_to_mask(lengths, x.shape[1])[..., None].to(x.dtype)
    return (x * valid).sum(1, keepdim=True) / lengths.to(x.dtype).clamp(min=1)[:, None, None]


def preprocess_utterance_level(layers, lengths, norm="l2"):
    """L2Norm(Pool(mean of layers)) -> [B, 1, D].

    ``norm="instance"`` is the ablation variant: instance norm over time
    before pooling, which removes any per-utterance constant.
    """
    if not layers:
        raise ConfigError("no layers selected for utterance-level pre-processing")
    avg = torch.stack(list(layers)).mean(0)
    if norm == "l2":
        return l2_normalize(masked_mean_pool(avg, lengths))
    if norm == "instance":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return masked_mean_pool(instance_norm(avg, lengths), lengths)
    raise ConfigError(f"unknown utterance-level norm {norm!r}")


def preprocess_frame_level(layers, lengths, norm="instance"):
    """InsNorm(mean of InsNorm(layers)) -> [B, T, D].

    ``norm="l2"`` is the ablation variant: per-frame L2 norm of the layer mean.
    """
    if not layers:
        raise ConfigError("no layers selected for frame-level pre-processing")
    if norm == "instance":
        avg = torch.stack([instance_norm(y, lengths) for y in layers]).mean(0)
        return instance_norm(avg, lengths)
    if norm == "l2":
        valid = lengths_to_mask(lengths, layers[0].shape[1])[..., None]
        return l2_normalize(torch.stack(list(layers)).mean(0)) * valid
    raise ConfigError(f"unknown frame-level norm {norm!r}")


class _ConvBlock(nn.Module):
    def __init__(self, dim, layers, kernel):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(dim, dim, kernel, padding=kernel // 2) for _ in range(layers)
        )

    def forward(self, x, valid):
        for i, conv in enumerate(self.convs):
            x = conv((x * valid[..., None]).transpose(1, 2)).transpose(1, 2)
            if i < len(self.convs) - 1:
                x = F.gelu(x)
        return x * valid[..., None]


class Adapter(nn.Module):
    """Trainable map from gradient-stopped teacher features to quantizer input.

    The base 1×1 grouped convolution is always present.  An optional extra
    block (2-layer kernel-3 CNN, or one Transformer layer for ablations)
    precedes it.
    """

    def __init__(self, dim, cfg: AdapterConfig, inner_dim=None, heads=4):
        super().__init__()
        if dim % cfg.groups:
            raise ConfigError(f"dim={dim} not divisible by adapter groups={cfg.groups}")
        self.cfg = cfg
        if cfg.extra == "cnn":
            self.extra = _ConvBlock(dim, cfg.deep_layers, cfg.deep_kernel)
        elif cfg.extra == "transformer":
            self.extra = SelfAttentionLayer(dim, inner_dim or 2 * dim, heads)
        else:
            self.extra = None
        self.base = nn.Conv1d(dim, dim, cfg.kernel, stride=cfg.stride,
                              padding=cfg.kernel // 2, groups=cfg.groups)

    def reset_identity(self):
        with torch.no_grad():
            self.base.weight.zero_()
            per_group = self.base.weight.shape[0] // self.cfg.groups
            center = self.cfg.kernel // 2
            for o in range(self.base.weight.shape[0]):
                self.base.weight[o, o % per_group, center] = 1.0
            self.base.bias.zero_()

    def forward(self, y, lengths=None):
        if lengths is None:
            lengths = torch.full((y.shape[0],), y.shape[1], dtype=torch.long)
        valid = lengths_to_mask(lengths, y.shape[1])
        x = y
        if self.extra is not None:
            x = self.extra(x, valid)
        x = self.base((x * valid[..., None]).transpose(1, 2)).transpose(1, 2)
        return x * valid[..., None]


def adapter(y, module: Adapter, lengths=None):
    return module(y, lengths)


def _check_finite(e):
    if not bool(torch.isfinite(e).all()):
        raise DataError("non-finite values reached the quantizer (upstream collapse?)")


def group_distances(e: torch.Tensor, codebook: Codebook) -> torch.Tensor:
    """Squared Euclidean distances per group: [M, G, N] for flattened e [M, D]."""
    g, n, sub = codebook.entries.shape
    eg = e.reshape(-1, g, sub)
    diff = eg[:, :, None, :] - codebook.entries[None]
    return (diff ** 2).sum(-1)


def kmeans_quantize(e: torch.Tensor, codebook: Codebook) -> QuantizationResult:
    """Nearest sub-codeword per group (lowest index wins ties); q is the concatenation."""
    _check_finite(e)
    shape = e.shape
    g, n, sub = codebook.entries.shape
    if shape[-1] != g * sub:
        raise DataError(f"input width {shape[-1]} != codebook width {g * sub}")
    flat = e.reshape(-1, shape[-1])
    with torch.no_grad():
        idx = group_distances(sg(flat), codebook).argmin(-1)  # [M, G]
    q = codebook.entries[torch.arange(g)[None, :], idx]  # [M, G, sub]
    q = q.reshape(shape)
    indices = idx.reshape(*shape[:-1], g)
    return QuantizationResult(q=q, indices=indices, joint_index=joint_index(indices, n))


def kmeans_loss_terms(e, q, gamma=0.25, valid=None, reduction="mean"):
    """(codebook term, commitment term) of the online K-means objective."""
    t1 = (sg(e) - q) ** 2
    t2 = gamma * (e - sg(q)) ** 2
    if valid is not None:
        w = valid[..., None].to(e.dtype).expand_as(t1)
        if reduction == "sum":
            return (t1 * w).sum(), (t2 * w).sum()
        denom = w.sum().clamp(min=1)
        return (t1 * w).sum() / denom, (t2 * w).sum() / denom
    if reduction == "sum":
        return t1.sum(), t2.sum()
    return t1.mean(), t2.mean()


def kmeans_loss(e, q, gamma=0.25, valid=None, reduction="mean"):
    """‖sg(e) − q‖² + γ‖e − sg(q)‖²; the first term moves only the codebook,
    the second only the encoder side."""
    if gamma <= 0 or gamma == 1.0:
        raise ConfigError(f"gamma must be positive and != 1, got {gamma}")
    t1, t2 = kmeans_loss_terms(e, q, gamma, valid, reduction)
    return t1 + t2


def straight_through(e, q):
    """Forward value q, gradient copied to e, none to q."""
    if e.shape != q.shape:
        raise DataError(f"shape mismatch {tuple(e.shape)} vs {tuple(q.shape)}")
    # e - sg(e) is exactly zero, so the forward value is q bit for bit
    return sg(q) + (e - sg(e))


def gumbel_quantize(e, codebook: Codebook, temperature=1.0, generator=None,
                    projection: Optional[nn.Module] = None) -> QuantizationResult:
    """Gumbel-softmax codeword selection: hard one-hot forward, soft backward.

    Logits are negative squared distances unless a projection ``D -> G·N``
    is supplied.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    _check_finite(e)
    shape = e.shape
    g, n, sub = codebook.entries.shape
    flat = e.reshape(-1, shape[-1])
    if projection is None:
        logits = -group_distances(flat, codebook)
    else:
        logits = projection(flat).reshape(-1, g, n)
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
    gumbels = -torch.log(-torch.log(u.clamp(min=1e-20, max=1 - 1e-12)))
    soft = torch.softmax((logits + gumbels) / temperature, dim=-1)
    idx = soft.argmax(-1)
    hard = F.one_hot(idx, n).to(soft.dtype)
    weights = hard + soft - sg(soft)
    q = torch.einsum("mgn,gnd->mgd", weights, codebook.entries).reshape(shape)
    indices = idx.reshape(*shape[:-1], g)
    return QuantizationResult(q=q, indices=indices, joint_index=joint_index(indices, n),
                              soft_probs=soft.reshape(*shape[:-1], g, n))


def usage_perplexity(indices: torch.Tensor, num_codewords: int) -> list:
    """exp(entropy) of codeword usage per group, over all given positions."""
    flat = indices.reshape(-1, indices.shape[-1])
    out = []
    for g in range(flat.shape[1]):
        counts = torch.bincount(flat[:, g], minlength=num_codewords).double()
        p = counts / counts.sum().clamp(min=1)
        nz = p[p > 0]
        out.append(float(torch.exp(-(nz * nz.log()).sum())))
    return out


def save_codebook(codebook: Codebook, path):
    """Write ``<path>.npy`` (entries [G, N, D/G]) plus ``<path>.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path.with_suffix(".npy"), codebook.entries.detach().cpu().numpy())
    manifest = {"G": codebook.groups, "N": codebook.num_codewords, "D": codebook.dim,
                "level": codebook.level, "dtype": str(codebook.entries.dtype).replace("torch.", "")}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))


def load_codebook(path) -> Codebook:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    entries = np.load(path.with_suffix(".npy"))
    if entries.shape != (manifest["G"], manifest["N"], manifest["D"] // manifest["G"]):
        raise DataError(f"codebook tensor shape {entries.shape} disagrees with manifest {manifest}")
    cb = Codebook(manifest["D"], manifest["N"], manifest["G"], manifest["level"])
    cb.entries = nn.Parameter(torch.from_numpy(entries))
    return cb


class LevelQuantizer(nn.Module):
    """Adapter + codebook for one level (utterance or frame)."""

    def __init__(self, dim, num_codewords, level, adapter_cfg: AdapterConfig,
                 kind="kmeans", gumbel_logits="distance", gumbel_temperature=0.5,
                 heads=4, inner_dim=None, generator=None, init_scale=1.0):
        super().__init__()
        if kind not in ("kmeans", "gumbel"):
            raise ConfigError(f"unknown quantizer type {kind!r}")
        self.kind = kind
        self.gumbel_temperature = gumbel_temperature
        self.adapter = Adapter(dim, adapter_cfg, inner_dim=inner_dim, heads=heads)
        self.codebook = Codebook(dim, num_codewords, adapter_cfg.groups, level, generator=generator,
                                 init_scale=init_scale)
        self.projection = None
        if kind == "gumbel" and gumbel_logits == "projection":
            self.projection = nn.Linear(dim, adapter_cfg.groups * num_codewords)
        elif gumbel_logits not in ("distance", "projection"):
            raise ConfigError(f"unknown gumbel logits {gumbel_logits!r}")

    def forward(self, y_prime, lengths, gamma=0.25, generator=None):
        e = self.adapter(y_prime, lengths)
        valid = lengths_to_mask(lengths, e.shape[1])
        if self.kind == "kmeans":
            res = kmeans_quantize(e, self.codebook)
            res.km_loss = kmeans_loss(e, res.q, gamma, valid=valid)
        else:
            res = gumbel_quantize(e, self.codebook, self.gumbel_temperature, generator, self.projection)
            res.km_loss = e.sum() * 0.0
        return e, res
