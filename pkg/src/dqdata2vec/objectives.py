"""Student-side predictors and every loss term of both training regimes."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import SelfAttentionLayer, lengths_to_mask
from .errors import ConfigError, DataError, RegimeError
from .quantizer import masked_mean_pool

COS_EPS = 1e-8
NEG_INF = -1e30
BLANK = 0


@dataclass
class LossWeights:
    gamma1: float = 0.1  # language branch
    gamma2: float = 0.2  # phoneme branch
    gamma3: float = 0.1  # supervised terms (deep regime)
    gamma_km: float = 0.25
    kappa: float = 0.1
    n_neg_phoneme: int = 50
    n_neg_language: Optional[int] = None  # None -> B-1

    def validate(self):
        if self.gamma1 < 0 or self.gamma2 < 0 or self.gamma3 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.gamma1 + self.gamma2 >= 1:
            raise ConfigError("gamma1 + gamma2 must be < 1")
        if self.gamma_km <= 0 or self.gamma_km == 1.0:
            raise ConfigError("gamma_km must be positive and != 1")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    sl1: torch.Tensor
    km_l: torch.Tensor
    km_p: torch.Tensor
    ctr_l: torch.Tensor
    ctr_p: torch.Tensor
    ce: torch.Tensor
    ctc: torch.Tensor
    total: torch.Tensor
    regime: str
    weights: LossWeights = field(default_factory=LossWeights)

    COMPONENTS = ("sl1", "km_l", "km_p", "ctr_l", "ctr_p", "ce", "ctc")

    def recompute_total(self) -> float:
        """Total rebuilt from the logged scalar components."""
        w = self.weights
        vals = {k: float(getattr(self, k).detach()) for k in self.COMPONENTS}
        sc = ((1 - w.gamma1 - w.gamma2) * vals["sl1"]
              + w.gamma1 * (vals["ctr_l"] + vals["km_l"])
              + w.gamma2 * (vals["ctr_p"] + vals["km_p"]))
        if self.regime == "deep":
            return sc + w.gamma3 * (vals["ce"] + vals["ctc"])
        return sc

    def as_floats(self) -> dict:
        out = {k: float(getattr(self, k).detach()) for k in self.COMPONENTS}
        out["total"] = float(self.total.detach())
        out["regime"] = self.regime
        return out


class Predictor(nn.Module):
    """``num_layers`` Transformer blocks followed by an affine map."""

    def __init__(self, dim, inner_dim, heads, num_layers=2):
        super().__init__()
        self.layers = nn.ModuleList(SelfAttentionLayer(dim, inner_dim, heads) for _ in range(num_layers))
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, lengths):
        valid = lengths_to_mask(lengths, x.shape[1])
        for layer in self.layers:
            x = layer(x, valid)
        return self.proj(x) * valid[..., None]


class Heads(nn.Module):
    def __init__(self, dim, inner_dim, heads, num_languages, num_phonemes, predictor_layers=2):
        super().__init__()
        self.pred_t = nn.Linear(dim, dim)
        self.pred_l = Predictor(dim, inner_dim, heads, predictor_layers)
        self.pred_p = Predictor(dim, inner_dim, heads, predictor_layers)
        self.lang_head = nn.Linear(dim, num_languages)
        self.ctc_head = nn.Linear(dim, num_phonemes + 1)  # index 0 = blank


def predictor_t(x_t, pred_t: nn.Module):
    return pred_t(x_t)


def predictor_l(x_l, lengths, pred_l: nn.Module):
    """Pool(Pred_l(x_l)) -> [B, 1, D]."""
    return masked_mean_pool(pred_l(x_l, lengths), lengths)


def predictor_p(x_p, lengths, pred_p: nn.Module):
    return pred_p(x_p, lengths)


def cosine(a, b):
    """Cosine similarity along the last axis with an epsilon-guarded norm."""
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp(min=COS_EPS)


def contrastive_loss(anchor, positive, negatives, kappa=0.1):
    """InfoNCE with cosine similarity.

    anchor, positive: [M, D]; negatives: [M, K, D] (K >= 1).  Mean over anchors.
    """
    if kappa <= 0:
        raise ConfigError("kappa must be positive")
    if negatives.shape[1] < 1:
        raise DataError("contrastive loss needs at least one negative")
    cands = torch.cat([positive[:, None, :], negatives], dim=1)
    logits = cosine(anchor[:, None, :], cands) / kappa
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def sample_negatives_phoneme(mask_row, n_neg, rng: np.random.Generator):
    """For each masked frame of one utterance, indices of other masked frames.

    Returns (positions [M], negatives [M, K]) with K = min(n_neg, M-1), or
    None when fewer than two frames are masked.
    """
    positions = np.flatnonzero(np.asarray(mask_row))
    m = len(positions)
    if m < 2:
        return None
    k = min(n_neg, m - 1)
    if k == m - 1:
        others = np.array([[j for j in range(m) if j != i] for i in range(m)], dtype=np.int64)
    else:
        # k distinct draws from the m-1 others: shift indices past the anchor
        draws = np.stack([rng.choice(m - 1, size=k, replace=False) for _ in range(m)])
        others = draws + (draws >= np.arange(m)[:, None])
    return positions, positions[others]


def sample_negatives_language(batch_size, rng: np.random.Generator, n_neg=None):
    """[B, K] indices of other utterances, K = min(n_neg, B-1); None if B < 2."""
    if batch_size < 2:
        return None
    k = batch_size - 1 if n_neg is None else min(n_neg, batch_size - 1)
    if k == batch_size - 1:
        return np.array([[j for j in range(batch_size) if j != i] for i in range(batch_size)], dtype=np.int64)
    draws = np.stack([rng.choice(batch_size - 1, size=k, replace=False) for _ in range(batch_size)])
    return draws + (draws >= np.arange(batch_size)[:, None])


def phoneme_contrastive(x_p, q_st, mask, n_neg, rng, kappa=0.1):
    """Masked frames are anchors; other masked frames of the same utterance are negatives."""
    anchors, positives, negatives = [], [], []
    mask_np = mask.cpu().numpy()
    for b in range(x_p.shape[0]):
        drawn = sample_negatives_phoneme(mask_np[b], n_neg, rng)
        if drawn is None:
            continue
        pos, neg = drawn
        pos_t, neg_t = torch.from_numpy(pos), torch.from_numpy(neg)
        anchors.append(x_p[b, pos_t])
        positives.append(q_st[b, pos_t])
        negatives.append(q_st[b][neg_t])
    if not anchors:
        return None
    # K varies per utterance; weight each utterance's mean by its anchor count
    total, count = 0.0, 0
    for a, p, n in zip(anchors, positives, negatives):
        total = total + contrastive_loss(a, p, n, kappa) * a.shape[0]
        count += a.shape[0]
    return total / count


def language_contrastive(x_l, q_st, rng, kappa=0.1, n_neg=None):
    """Pooled utterance vectors; negatives are other utterances of the batch."""
    idx = sample_negatives_language(x_l.shape[0], rng, n_neg)
    if idx is None:
        return None
    a = x_l[:, 0, :]
    q = q_st[:, 0, :]
    return contrastive_loss(a, q, q[torch.from_numpy(idx)], kappa)


def quantization_objective(ctr, km):
    return ctr + km


def shallow_total(sl1, qt_l, qt_p, weights: LossWeights):
    return (1 - weights.gamma1 - weights.gamma2) * sl1 + weights.gamma1 * qt_l + weights.gamma2 * qt_p


def deep_total(l_sc, ce, ctc, gamma3):
    return l_sc + gamma3 * (ce + ctc)


def _half_mask(n, rng):
    if n < 2:
        return rng.random(n) < 0.5
    m = np.zeros(n, dtype=bool)
    m[rng.choice(n, size=n // 2, replace=False)] = True
    return m


def mixing_mask(lengths, level, rng, max_len=None):
    """Binary selector, True = take the student representation.

    frame level: [B, T] with ⌊T_b/2⌋ True per utterance over valid frames;
    utterance level: [B, 1] with ⌊B/2⌋ True.  Bernoulli(0.5) for size 1.
    """
    lengths = torch.as_tensor(lengths)
    if level == "utterance":
        return torch.from_numpy(_half_mask(len(lengths), rng))[:, None]
    if level != "frame":
        raise ConfigError(f"unknown mixing level {level!r}")
    t_max = int(lengths.max()) if max_len is None else max_len
    out = np.zeros((len(lengths), t_max), dtype=bool)
    for b, n in enumerate(lengths.tolist()):
        out[b, :n] = _half_mask(n, rng)
    return torch.from_numpy(out)


def mix_representations(x, q_st, select_x):
    """u = x·M + q·(1−M) with M broadcast over the feature axis."""
    m = select_x[..., None].to(x.dtype)
    return x * m + q_st * (1 - m)


def ce_loss(u_l, lang_head: nn.Module, language_ids):
    if language_ids is None:
        raise RegimeError("deep regime needs language labels for every utterance")
    logits = lang_head(u_l[:, 0, :] if u_l.dim() == 3 else u_l)
    return F.cross_entropy(logits, language_ids)


def ctc_feasible(target, length) -> bool:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats <= length


def ctc_nll(log_probs, lengths, targets, blank=BLANK):
    """Per-utterance CTC negative log-likelihood via the forward recursion.

    log_probs: [B, T, V] log-softmax outputs; targets: list of label lists
    (labels != blank).  Infeasible items get +inf.
    """
    bsz, t_max, _ = log_probs.shape
    lengths = torch.as_tensor(lengths)
    u_max = max((len(y) for y in targets), default=0)
    s_max = 2 * u_max + 1
    ext = torch.full((bsz, s_max), blank, dtype=torch.long)
    allow_skip = torch.zeros((bsz, s_max), dtype=torch.bool)
    n_states = torch.zeros(bsz, dtype=torch.long)
    for b, y in enumerate(targets):
        if any(lab == blank for lab in y):
            raise DataError("CTC targets must not contain the blank symbol")
        for i, lab in enumerate(y):
            s = 2 * i + 1
            ext[b, s] = lab
            if i > 0 and y[i - 1] != lab:
                allow_skip[b, s] = True
        n_states[b] = 2 * len(y) + 1
    state_valid = torch.arange(s_max)[None, :] < n_states[:, None]
    neg = torch.tensor(NEG_INF, dtype=log_probs.dtype)

    emit = torch.gather(log_probs, 2, ext[:, None, :].expand(bsz, t_max, s_max))  # [B, T, S]
    alpha = torch.full((bsz, s_max), NEG_INF, dtype=log_probs.dtype)
    alpha[:, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[:, 1] = torch.where(n_states > 1, emit[:, 0, 1], neg)
    alpha = torch.where(state_valid, alpha, neg)
    for t in range(1, t_max):
        prev1 = F.pad(alpha[:, :-1], (1, 0), value=NEG_INF)
        prev2 = F.pad(alpha[:, :-2], (2, 0), value=NEG_INF) if s_max > 2 else torch.full_like(alpha, NEG_INF)
        prev2 = torch.where(allow_skip, prev2, neg)
        new = torch.logsumexp(torch.stack([alpha, prev1, prev2]), dim=0) + emit[:, t]
        new = torch.where(state_valid, new, neg)
        active = (t < lengths)[:, None]
        alpha = torch.where(active, new, alpha)
    last = n_states - 1
    end1 = alpha.gather(1, last[:, None])[:, 0]
    end2 = alpha.gather(1, (last - 1).clamp(min=0)[:, None])[:, 0]
    end2 = torch.where(n_states > 1, end2, neg)
    nll = -torch.logaddexp(end1, end2)
    feasible = torch.tensor([ctc_feasible(y, int(n)) for y, n in zip(targets, lengths)])
    return torch.where(feasible, nll, torch.full_like(nll, math.inf))


def ctc_loss(u_p, ctc_head: nn.Module, phoneme_seqs, lengths, high_resource_mask):
    """Mean CTC NLL over high-resource utterances; exactly 0 when there are none.

    ``phoneme_seqs`` holds phoneme ids in [0, P); they map to labels id+1.
    """
    hr = torch.as_tensor(high_resource_mask, dtype=torch.bool)
    if not bool(hr.any()):
        return u_p.sum() * 0.0
    if phoneme_seqs is None:
        raise RegimeError("deep regime needs phoneme labels for high-resource utterances")
    idx = torch.nonzero(hr)[:, 0]
    targets = []
    for i in idx.tolist():
        if phoneme_seqs[i] is None:
            raise RegimeError("missing phoneme labels on a high-resource utterance")
        targets.append([p + 1 for p in phoneme_seqs[i]])
    sub_len = torch.as_tensor(lengths)[idx]
    log_probs = F.log_softmax(ctc_head(u_p[idx]), dim=-1)
    nll = ctc_nll(log_probs, sub_len, targets)
    ok = torch.isfinite(nll)
    if not bool(ok.all()):
        warnings.warn(f"skipping {int((~ok).sum())} CTC-infeasible utterance(s)", RuntimeWarning)
    if not bool(ok.any()):
        return u_p.sum() * 0.0
    return nll[ok].mean()
