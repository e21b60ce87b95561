"""Teacher-student backbone: conv feature encoder, Transformer context
encoders, span masking, EMA tracking, the averaged instance-normalised
regression target and the Smooth-L1 masked-prediction loss."""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

INSNORM_EPS = 1e-5



class StopGradientTape:
    """Records every stop-gradient value on one pass and replays it later.

    Finite-difference checks must hold ``sg(x)`` fixed at its value at the
    expansion point, otherwise the numeric derivative sees dependencies that
    autograd deliberately ignores.  Inside ``with tape:`` the first pass
    records and every ``replay()``-ed pass returns the recorded tensors in the
    same order.
    """

    def __init__(self):
        self.values: List[torch.Tensor] = []
        self.recording = True
        self.pos = 0

    def replay(self):
        self.recording = False
        self.pos = 0
        return self

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self.recording:
            v = x.detach().clone()
            self.values.append(v)
            return v
        if self.pos >= len(self.values):
            raise RuntimeError("replayed pass took more stop-gradients than were recorded")
        v = self.values[self.pos]
        self.pos += 1
        return v

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev, _ACTIVE_TAPE = _ACTIVE_TAPE, self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


_ACTIVE_TAPE: Optional[StopGradientTape] = None


def sg(x: torch.Tensor) -> torch.Tensor:
    """Stop-gradient.  Plain ``detach`` unless a StopGradientTape is active."""
    if _ACTIVE_TAPE is None:
        return x.detach()
    return _ACTIVE_TAPE(x)


@dataclass
class ModelConfig:
    """Backbone geometry.  Defaults are the desk-scale toy preset; ``base()``
    gives the full-scale layout.  Layer indices are 1-based."""

    feature_dim: int = 16
    conv_layers: list = field(default_factory=lambda: [(64, 2, 2), (64, 2, 2)])
    num_layers: int = 8
    model_dim: int = 64
    inner_dim: int = 128
    heads: int = 4
    top_k: int = 4
    y_l_layers: list = field(default_factory=lambda: [2, 3, 4])
    y_p_layers: list = field(default_factory=lambda: [5, 6])
    pos_conv_kernel: int = 9
    pos_conv_groups: int = 4
    mask_prob: float = 0.2
    mask_span: int = 3
    sl1_beta: float = 1.0

    @property
    def x_l_layer(self) -> int:
        return max(self.y_l_layers)

    @property
    def x_p_layer(self) -> int:
        return max(self.y_p_layers)

    def validate(self):
        if self.top_k > self.num_layers or self.top_k < 1:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, {self.num_layers}]")
        for name in ("y_l_layers", "y_p_layers"):
            layers = getattr(self, name)
            if not layers or any(not 1 <= i <= self.num_layers for i in layers):
                raise ConfigError(f"{name}={layers} must be a non-empty subset of [1..{self.num_layers}]")
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError(f"mask_prob={self.mask_prob} must lie in (0, 1)")
        if self.mask_span < 1:
            raise ConfigError("mask_span must be >= 1")
        if self.sl1_beta <= 0:
            raise ConfigError("sl1_beta must be positive")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if self.model_dim % self.pos_conv_groups:
            raise ConfigError("model_dim must be divisible by pos_conv_groups")
        for layer in self.conv_layers:
            if len(layer) != 3 or min(layer) < 1:
                raise ConfigError(f"bad conv layer spec {layer}")

    @classmethod
    def base(cls, feature_dim=1):
        return cls(
            feature_dim=feature_dim,
            conv_layers=[(512, 10, 5)] + [(512, 3, 2)] * 4 + [(512, 2, 2)] * 2,
            num_layers=12, model_dim=768, inner_dim=3072, heads=8, top_k=8,
            y_l_layers=[4, 5, 6], y_p_layers=[7, 8, 9],
            pos_conv_kernel=128, pos_conv_groups=16,
            mask_prob=0.065, mask_span=10,
        )

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "conv_layers" in d:
            d["conv_layers"] = [tuple(x) for x in d["conv_layers"]]
        for key in ("x_l_layer", "x_p_layer"):
            d.pop(key, None)
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["conv_layers"] = [list(x) for x in self.conv_layers]
        return d


@dataclass
class LayerOutputs:
    layers: List[torch.Tensor]  # L tensors [B, T, D]
    lengths: torch.Tensor

    def __getitem__(self, index_1based: int) -> torch.Tensor:
        return self.layers[index_1based - 1]

    def __len__(self):
        return len(self.layers)


@dataclass
class MaskInfo:
    mask: torch.Tensor  # [B, T] bool, True = masked
    spans: list  # per utterance: list of merged (start, length)


def lengths_to_mask(lengths: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    """Boolean [B, T] mask, True on valid frames."""
    if max_len is None:
        max_len = int(lengths.max()) if len(lengths) else 0
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def conv_output_length(length: int, conv_layers) -> int:
    for _, kernel, stride in conv_layers:
        length = (length - kernel) // stride + 1
    return length


def receptive_field(conv_layers) -> int:
    rf, jump = 1, 1
    for _, kernel, stride in conv_layers:
        rf += (kernel - 1) * jump
        jump *= stride
    return rf


def receptive_windows(length: int, conv_layers) -> List[Tuple[int, int]]:
    """Input-frame window [start, end) seen by each output frame."""
    rf = receptive_field(conv_layers)
    jump = int(np.prod([s for _, _, s in conv_layers])) if conv_layers else 1
    n = conv_output_length(length, conv_layers)
    return [(i * jump, i * jump + rf) for i in range(max(n, 0))]


class FeatureEncoder(nn.Module):
    """Stack of strided temporal convolutions followed by a projection to the model width."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        convs = []
        in_ch = cfg.feature_dim
        for channels, kernel, stride in cfg.conv_layers:
            convs.append(nn.Conv1d(in_ch, channels, kernel, stride=stride))
            in_ch = channels
        self.convs = nn.ModuleList(convs)
        self.norm = nn.LayerNorm(in_ch)
        self.proj = nn.Linear(in_ch, cfg.model_dim)
        self.min_length = receptive_field(cfg.conv_layers)

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        out = lengths.clone()
        for _, kernel, stride in self.cfg.conv_layers:
            out = torch.div(out - kernel, stride, rounding_mode="floor") + 1
        return out

    def forward(self, features: torch.Tensor, lengths: torch.Tensor):
        if features.shape[-1] != self.cfg.feature_dim:
            raise DataError(
                f"feature_dim mismatch: batch has {features.shape[-1]}, model expects {self.cfg.feature_dim}"
            )
        if int(lengths.min()) < self.min_length:
            raise DataError(
                f"utterance of length {int(lengths.min())} is shorter than the "
                f"receptive field; minimum length is {self.min_length}"
            )
        x = features * lengths_to_mask(lengths, features.shape[1])[..., None]
        x = x.transpose(1, 2)
        for conv in self.convs:
            x = F.gelu(conv(x))
        x = self.proj(self.norm(x.transpose(1, 2)))
        out_lengths = self.output_lengths(lengths)
        x = x * lengths_to_mask(out_lengths, x.shape[1])[..., None]
        return x, out_lengths


class SelfAttentionLayer(nn.Module):
    """Post-norm Transformer block with key-padding mask."""

    def __init__(self, dim, inner_dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ff1 = nn.Linear(dim, inner_dim)
        self.ff2 = nn.Linear(inner_dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, valid):
        b, t, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1) @ v
        attn = attn.transpose(1, 2).reshape(b, t, d)
        x = self.norm1(x + self.out(attn))
        x = self.norm2(x + self.ff2(F.gelu(self.ff1(x))))
        return x * valid[..., None]


class ConvPositional(nn.Module):
    def __init__(self, dim, kernel, groups):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=groups)

    def forward(self, x, valid):
        x = x * valid[..., None]
        y = self.conv(x.transpose(1, 2))
        if self.kernel % 2 == 0:
            y = y[..., :-1]
        return F.gelu(y.transpose(1, 2))


class ContextEncoder(nn.Module):
    """Convolutional positional layer plus L Transformer blocks; returns every block output."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pos = ConvPositional(cfg.model_dim, cfg.pos_conv_kernel, cfg.pos_conv_groups)
        self.norm = nn.LayerNorm(cfg.model_dim)
        self.layers = nn.ModuleList(
            SelfAttentionLayer(cfg.model_dim, cfg.inner_dim, cfg.heads) for _ in range(cfg.num_layers)
        )

    def forward(self, x, lengths) -> LayerOutputs:
        valid = lengths_to_mask(lengths, x.shape[1])
        x = self.norm(x + self.pos(x, valid)) * valid[..., None]
        outs = []
        for layer in self.layers:
            x = layer(x, valid)
            outs.append(x)
        return LayerOutputs(outs, lengths)


def span_mask(lengths, mask_prob, mask_span, rng: np.random.Generator, max_len=None) -> MaskInfo:
    """Each valid frame starts a span with probability ``mask_prob``; a span
    covers ``mask_span`` frames clipped at the utterance end.  Overlapping
    spans are merged."""
    if mask_span < 1:
        raise ConfigError("mask_span must be >= 1")
    lengths = torch.as_tensor(lengths)
    t_max = int(lengths.max()) if max_len is None else max_len
    mask = np.zeros((len(lengths), t_max), dtype=bool)
    spans = []
    for b, n in enumerate(lengths.tolist()):
        starts = np.flatnonzero(rng.random(n) < mask_prob)
        for s in starts:
            mask[b, s:min(s + mask_span, n)] = True
        spans.append(_runs(mask[b, :n]))
    return MaskInfo(torch.from_numpy(mask), spans)


def _runs(row):
    runs, start = [], None
    for i, m in enumerate(row):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i - start))
            start = None
    if start is not None:
        runs.append((start, len(row) - start))
    return runs


def instance_norm(x: torch.Tensor, lengths: torch.Tensor, eps: float = INSNORM_EPS) -> torch.Tensor:
    """Per-utterance, per-channel normalisation over valid frames, no affine.

    Length-1 utterances cannot be normalised; they come back as zeros.
    Padded frames are zero on output.
    """
    valid = lengths_to_mask(lengths, x.shape[1])[..., None].to(x.dtype)
    n = lengths.to(x.dtype).clamp(min=1)[:, None, None]
    mean = (x * valid).sum(1, keepdim=True) / n
    var = (((x - mean) * valid) ** 2).sum(1, keepdim=True) / n
    # clamping the std (instead of adding eps to the variance) keeps the
    # normalisation exact, and therefore idempotent, for any non-constant channel
    out = (x - mean) / torch.sqrt(var).clamp(min=eps) * valid
    degenerate = lengths <= 1
    if bool(degenerate.any()):
        warnings.warn("instance norm over a single frame is degenerate; returning zeros", RuntimeWarning)
        out = out * (~degenerate).to(x.dtype)[:, None, None]
    return out


def build_regression_target(teacher: LayerOutputs, top_k: int) -> torch.Tensor:
    """Average of the instance-normalised top ``top_k`` teacher layers."""
    num_layers = len(teacher)
    if not 1 <= top_k <= num_layers:
        raise ConfigError(f"top_k={top_k} must lie in [1, {num_layers}]")
    normed = [instance_norm(y, teacher.lengths) for y in teacher.layers[num_layers - top_k:]]
    return torch.stack(normed).mean(0)


def sl1_loss(target, pred, mask, beta=1.0) -> torch.Tensor:
    """Smooth-L1 averaged over masked frames and channels."""
    if beta <= 0:
        raise ConfigError("beta must be positive")
    mask = mask.to(torch.bool)
    if not bool(mask.any()):
        warnings.warn("sl1_loss called with an empty mask", RuntimeWarning)
        return pred.sum() * 0.0
    diff = (target - pred)[mask]
    absd = diff.abs()
    per = torch.where(absd <= beta, 0.5 * diff ** 2 / beta, absd - 0.5 * beta)
    return per.mean()


def ema_decay(step, tau_start, tau_end, anneal_steps) -> float:
    if anneal_steps <= 0 or step >= anneal_steps:
        return tau_end
    return tau_start + (tau_end - tau_start) * step / anneal_steps


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, tau: float):
    """θ_T ← τ·θ_T + (1−τ)·θ_S over matching parameters (and buffers)."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau={tau} must lie in [0, 1]")
    t_state = teacher.state_dict(keep_vars=True)
    s_state = student.state_dict(keep_vars=True)
    if t_state.keys() != s_state.keys():
        raise ConfigError("teacher/student parameter structures differ")
    for name, t in t_state.items():
        s = s_state[name]
        if t.shape != s.shape:
            raise ConfigError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if t.dtype.is_floating_point:
            t.mul_(tau).add_(s.detach(), alpha=1.0 - tau)
        else:
            t.copy_(s)
    return teacher


def make_teacher(student_encoder: nn.Module) -> nn.Module:
    teacher = copy.deepcopy(student_encoder)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher
