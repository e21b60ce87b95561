"""The full teacher-student model with language and phoneme quantizers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .backbone import (
    ContextEncoder,
    FeatureEncoder,
    LayerOutputs,
    MaskInfo,
    ModelConfig,
    build_regression_target,
    lengths_to_mask,
    make_teacher,
    sg,
    sl1_loss,
    span_mask,
)
from .errors import ConfigError, RegimeError
from .objectives import (
    Heads,
    LossReport,
    LossWeights,
    ce_loss,
    ctc_loss,
    deep_total,
    language_contrastive,
    mix_representations,
    mixing_mask,
    phoneme_contrastive,
    predictor_l,
    predictor_p,
    quantization_objective,
    shallow_total,
)
from .quantizer import (
    AdapterConfig,
    LevelQuantizer,
    masked_mean_pool,
    preprocess_frame_level,
    preprocess_utterance_level,
    straight_through,
)

REGIMES = ("shallow", "deep")


@dataclass
class QuantizerConfig:
    groups: int = 2
    use_lqt: bool = True
    use_pqt: bool = True
    lqt_norm: str = "l2"
    pqt_norm: str = "instance"
    lqt_type: str = "kmeans"
    pqt_type: str = "kmeans"
    extra_block: str = "none"  # none | cnn | transformer
    extra_levels: list = field(default_factory=lambda: ["utterance", "frame"])
    gumbel_logits: str = "distance"
    gumbel_temperature: float = 0.5
    adapter_init: str = "identity"  # identity | random (base 1x1 conv)
    # Utterance inputs have unit norm, so small codewords let direction (not
    # codeword norm) decide the nearest entry.
    lqt_init_scale: float = 0.1
    pqt_init_scale: float = 1.0
    allow_unstable: bool = False  # permit collapse-prone layouts (ablations only)

    def adapter_config(self, level) -> AdapterConfig:
        extra = self.extra_block if level in self.extra_levels else "none"
        return AdapterConfig(groups=self.groups, extra=extra)

    def validate(self, regime):
        if self.adapter_init not in ("identity", "random"):
            raise ConfigError(f"unknown adapter_init {self.adapter_init!r}")
        if not (self.use_lqt or self.use_pqt):
            raise ConfigError("at least one quantizer must be enabled")
        for level in ("utterance", "frame"):
            self.adapter_config(level).validate(regime, self.allow_unstable)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class DQData2vec(nn.Module):
    def __init__(self, cfg: ModelConfig, qcfg: QuantizerConfig, num_languages, num_phonemes,
                 regime="shallow", seed=0):
        super().__init__()
        if regime not in REGIMES:
            raise ConfigError(f"unknown regime {regime!r}")
        cfg.validate()
        qcfg.validate(regime)
        self.cfg, self.qcfg, self.regime = cfg, qcfg, regime
        self.num_languages, self.num_phonemes = num_languages, num_phonemes
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed + 1)
        d = cfg.model_dim
        self.feature_encoder = FeatureEncoder(cfg)
        self.mask_emb = nn.Parameter(torch.empty(d).uniform_())
        self.student = ContextEncoder(cfg)
        self.teacher = make_teacher(self.student)
        self.heads = Heads(d, cfg.inner_dim, cfg.heads, num_languages, num_phonemes)
        kw = dict(heads=cfg.heads, inner_dim=cfg.inner_dim, gumbel_logits=qcfg.gumbel_logits,
                  gumbel_temperature=qcfg.gumbel_temperature, generator=gen)
        self.lqt = LevelQuantizer(d, num_languages, "utterance", qcfg.adapter_config("utterance"),
                                  kind=qcfg.lqt_type, init_scale=qcfg.lqt_init_scale, **kw) if qcfg.use_lqt else None
        self.pqt = LevelQuantizer(d, num_phonemes, "frame", qcfg.adapter_config("frame"),
                                  kind=qcfg.pqt_type, init_scale=qcfg.pqt_init_scale, **kw) if qcfg.use_pqt else None
        if qcfg.adapter_init == "identity":
            for q in (self.lqt, self.pqt):
                if q is not None:
                    q.adapter.reset_identity()

    # parameters -------------------------------------------------------
    def trainable_parameters(self, regime=None):
        """Parameters the optimizer owns; supervised heads only in the deep regime."""
        regime = regime or self.regime
        skip = set()
        if regime == "shallow":
            skip = {id(p) for p in self.heads.lang_head.parameters()}
            skip |= {id(p) for p in self.heads.ctc_head.parameters()}
        return [p for p in self.parameters() if p.requires_grad and id(p) not in skip]

    def teacher_parameters(self):
        return list(self.teacher.parameters())

    def codebook_parameters(self):
        return [q.codebook.entries for q in (self.lqt, self.pqt) if q is not None]

    def adapter_parameters(self):
        out = []
        for q in (self.lqt, self.pqt):
            if q is not None:
                out += list(q.adapter.parameters())
        return out

    # forward pieces ---------------------------------------------------
    def feature_encode(self, features, lengths):
        return self.feature_encoder(features, lengths)

    def student_forward(self, latents, lengths, mask_info: Optional[MaskInfo] = None) -> LayerOutputs:
        x = latents
        if mask_info is not None:
            m = mask_info.mask[:, : latents.shape[1], None]
            x = torch.where(m, self.mask_emb.to(latents.dtype), latents)
        return self.student(x, lengths)

    def teacher_forward(self, latents, lengths) -> LayerOutputs:
        with torch.no_grad():
            out = self.teacher(latents.detach(), lengths)
        return LayerOutputs([sg(y) for y in out.layers], out.lengths)

    def level_inputs(self, teacher: LayerOutputs):
        """Pre-processed (gradient-stopped) inputs of the two quantizers."""
        lengths = teacher.lengths
        y_l = y_p = None
        if self.lqt is not None:
            y_l = preprocess_utterance_level([teacher[i] for i in self.cfg.y_l_layers], lengths,
                                             self.qcfg.lqt_norm)
        if self.pqt is not None:
            y_p = preprocess_frame_level([teacher[i] for i in self.cfg.y_p_layers], lengths,
                                         self.qcfg.pqt_norm)
        return y_l, y_p

    def quantize_levels(self, teacher: LayerOutputs, gamma=0.25, generator=None):
        y_l, y_p = self.level_inputs(teacher)
        bsz = teacher.lengths.shape[0]
        ones = torch.ones(bsz, dtype=torch.long)
        lang = self.lqt(y_l, ones, gamma, generator) if self.lqt is not None else None
        phone = self.pqt(y_p, teacher.lengths, gamma, generator) if self.pqt is not None else None
        return lang, phone

    @torch.no_grad()
    def infer_codes(self, batch):
        """Joint codeword indices from the unmasked teacher path.

        Returns (language codes [B] or None, phoneme codes [B, T'] or None,
        per-group indices, downsampled lengths).
        """
        z, lengths = self.feature_encode(batch.features, batch.lengths)
        teacher = self.teacher_forward(z, lengths)
        gen = torch.Generator().manual_seed(0)
        lang, phone = self.quantize_levels(teacher, generator=gen)
        return {
            "lengths": lengths,
            "lang_joint": lang[1].joint_index[:, 0] if lang else None,
            "lang_groups": lang[1].indices[:, 0] if lang else None,
            "phone_joint": phone[1].joint_index if phone else None,
            "phone_groups": phone[1].indices if phone else None,
        }

    def _qst(self, quantizer, e, res):
        # gumbel codewords are trained by the downstream losses directly
        return res.q if quantizer.kind == "gumbel" else straight_through(e, res.q)

    def compute_losses(self, batch, weights: LossWeights, rng: np.random.Generator,
                       generator=None, regime=None):
        """One forward pass; returns (LossReport, aux dict with code indices)."""
        regime = regime or self.regime
        if regime == "deep" and batch.language_ids is None:
            raise RegimeError("deep regime needs language labels on every utterance")
        z, lengths = self.feature_encode(batch.features, batch.lengths)
        valid = lengths_to_mask(lengths, z.shape[1])
        mask_info = span_mask(lengths, self.cfg.mask_prob, self.cfg.mask_span, rng, max_len=z.shape[1])
        mask = mask_info.mask & valid
        student = self.student_forward(z, lengths, mask_info)
        teacher = self.teacher_forward(z, lengths)

        y_t = build_regression_target(teacher, self.cfg.top_k)
        x_t = self.heads.pred_t(student[self.cfg.num_layers])
        sl1 = sl1_loss(y_t, x_t, mask, self.cfg.sl1_beta)

        zero = sl1 * 0.0
        lang, phone = self.quantize_levels(teacher, weights.gamma_km, generator)
        aux = {"lengths": lengths, "mask": mask}
        km_l = ctr_l = km_p = ctr_p = zero
        q_l_st = q_p_st = None
        if lang is not None:
            e_l, res_l = lang
            q_l_st = self._qst(self.lqt, e_l, res_l)
            x_l = predictor_l(student[self.cfg.x_l_layer], lengths, self.heads.pred_l)
            ctr = language_contrastive(x_l, q_l_st, rng, weights.kappa, weights.n_neg_language)
            ctr_l = ctr if ctr is not None else zero
            km_l = res_l.km_loss
            aux["lang_indices"] = res_l.indices
        if phone is not None:
            e_p, res_p = phone
            q_p_st = self._qst(self.pqt, e_p, res_p)
            x_p = predictor_p(student[self.cfg.x_p_layer], lengths, self.heads.pred_p)
            ctr = phoneme_contrastive(x_p, q_p_st, mask, weights.n_neg_phoneme, rng, weights.kappa)
            ctr_p = ctr if ctr is not None else zero
            km_p = res_p.km_loss
            aux["phone_indices"] = res_p.indices[valid]

        l_sc = shallow_total(sl1, quantization_objective(ctr_l, km_l),
                             quantization_objective(ctr_p, km_p), weights)
        ce = ctc = zero
        total = l_sc
        if regime == "deep":
            x_l_raw = student[self.cfg.x_l_layer]
            pooled = masked_mean_pool(x_l_raw, lengths)
            if q_l_st is not None:
                sel = mixing_mask(lengths, "utterance", rng)
                u_l = mix_representations(pooled, q_l_st, sel)
            else:
                u_l = pooled
            ce = ce_loss(u_l, self.heads.lang_head, batch.language_ids)
            x_p_raw = student[self.cfg.x_p_layer]
            if q_p_st is not None:
                sel = mixing_mask(lengths, "frame", rng, max_len=z.shape[1])
                u_p = mix_representations(x_p_raw, q_p_st, sel)
            else:
                u_p = x_p_raw
            ctc = ctc_loss(u_p, self.heads.ctc_head, batch.phoneme_seqs, lengths, batch.high_resource_mask)
            total = deep_total(l_sc, ce, ctc, weights.gamma3)
        report = LossReport(sl1=sl1, km_l=km_l, km_p=km_p, ctr_l=ctr_l, ctr_p=ctr_p, ce=ce, ctc=ctc,
                            total=total, regime=regime, weights=weights)
        return report, aux


class FinetuneModel(nn.Module):
    """Feature encoder + student encoder with a fresh CTC head on the last layer."""

    def __init__(self, feature_encoder, student, model_dim, vocab_size, seed=0):
        super().__init__()
        self.feature_encoder = feature_encoder
        self.student = student
        gen = torch.Generator().manual_seed(seed)
        self.head = nn.Linear(model_dim, vocab_size)
        with torch.no_grad():
            bound = 1.0 / model_dim ** 0.5
            self.head.weight.copy_(torch.rand(self.head.weight.shape, generator=gen) * 2 * bound - bound)
            self.head.bias.zero_()

    def backbone_parameters(self):
        return list(self.feature_encoder.parameters()) + list(self.student.parameters())

    def forward(self, features, lengths):
        z, out_lengths = self.feature_encoder(features, lengths)
        layers = self.student(z, out_lengths)
        return self.head(layers.layers[-1]), out_lengths
