"""Pretraining and fine-tuning loops, tri-stage learning rate, EMA stepping,
collapse monitoring and checkpoint persistence."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .analysis import greedy_ctc_decode, token_error_rate
from .backbone import ModelConfig, ema_decay, ema_update
from .errors import CheckpointError, CollapseError, ConfigError, DataError, LossExplosionError, RegimeError
from .model import DQData2vec, FinetuneModel, QuantizerConfig
from .objectives import LossWeights, ctc_nll
from .quantizer import save_codebook, usage_perplexity
from .synthdata import BalancedSampler, BatchStream, collate, pack_batches

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STATE_FILE = "state.pt"
CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    regime: str = "shallow"
    total_updates: int = 1200
    lr_peak: float = 3e-4
    lr_end: float = 0.0
    codebook_lr_scale: float = 30.0  # codewords move ~lr per Adam step; data scale is ~1
    tri_stage: tuple = (3.0, 90.0, 7.0)
    max_tokens: int = 1200
    sampling_alpha: float = 0.5
    seed: int = 0
    eval_every: int = 50
    collapse_ratio: float = 0.1  # perplexity threshold as a fraction of N
    collapse_patience: int = 2
    max_loss: float = 1e4
    tau_start: float = 0.999
    tau_end: float = 0.9999
    tau_anneal_frac: float = 0.3
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-6
    dtype: str = "float32"

    def validate(self):
        if self.regime not in ("shallow", "deep"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if len(self.tri_stage) != 3 or abs(sum(self.tri_stage) - 100.0) > 1e-9:
            raise ConfigError(f"tri_stage {self.tri_stage} must sum to 100")
        if self.total_updates < 0 or self.eval_every < 1:
            raise ConfigError("total_updates must be >= 0 and eval_every >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("tri_stage", "betas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["tri_stage"] = list(self.tri_stage)
        d["betas"] = list(self.betas)
        return d


@dataclass
class FinetuneConfig:
    freeze_updates: int = 150
    total_updates: int = 300
    lr: float = 1e-3
    unit: str = "phoneme"  # phoneme | character
    max_tokens: int = 1200
    labeled_utterances: int = 40  # per target language
    eval_utterances: int = 40  # per target language
    seed: int = 0
    dtype: str = "float32"

    def validate(self):
        if not 0 <= self.freeze_updates < self.total_updates:
            raise ConfigError("need 0 <= freeze_updates < total_updates")
        if self.unit not in ("phoneme", "character"):
            raise ConfigError(f"unknown unit {self.unit!r}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def lr_schedule(step, total_updates, lr_peak, lr_end=0.0, tri_stage=(3.0, 90.0, 7.0)) -> float:
    """Linear warm-up, constant hold, linear decay to ``lr_end``."""
    warm = total_updates * tri_stage[0] / 100.0
    hold = total_updates * tri_stage[1] / 100.0
    decay = total_updates - warm - hold
    if step < warm:
        return lr_peak * step / warm
    if step < warm + hold or decay <= 0:
        return lr_peak
    frac = min((step - warm - hold) / decay, 1.0)
    return lr_peak + (lr_end - lr_peak) * frac


class CollapseMonitor:
    """Flags collapse when codeword-usage perplexity of any group stays below
    ``ratio·N`` for ``patience`` consecutive evaluation windows."""

    def __init__(self, ratio=0.1, patience=2):
        self.ratio, self.patience = ratio, patience
        self.window = {"language": [], "phoneme": []}
        self.strikes = {"language": 0, "phoneme": 0}
        self.history = []

    def observe(self, level, indices):
        self.window[level].append(indices.detach().reshape(-1, indices.shape[-1]).clone())

    def evaluate(self, step, sizes):
        record = {"step": step}
        collapsed = []
        for level, n in sizes.items():
            if n is None or not self.window[level]:
                continue
            ppl = usage_perplexity(torch.cat(self.window[level]), n)
            record[level] = ppl
            if min(ppl) < self.ratio * n:
                self.strikes[level] += 1
            else:
                self.strikes[level] = 0
            if self.strikes[level] >= self.patience:
                collapsed.append(level)
            self.window[level] = []
        self.history.append(record)
        return collapsed

    def state_dict(self):
        return {"strikes": dict(self.strikes), "history": list(self.history),
                "window": {k: [t.clone() for t in v] for k, v in self.window.items()}}

    def load_state_dict(self, state):
        self.strikes = dict(state["strikes"])
        self.history = list(state["history"])
        self.window = {k: [t.clone() for t in v] for k, v in state["window"].items()}


def step_rng(seed, step):
    return np.random.default_rng([seed, step])


def step_generator(seed, step):
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step))


def check_regime_labels(corpus, regime):
    if regime != "deep":
        return
    for u in corpus:
        if u.language_id is None:
            raise RegimeError(f"{u.uid}: deep regime needs a language label")
        if u.is_high_resource and u.phoneme_seq is None:
            raise RegimeError(f"{u.uid}: deep regime needs phoneme labels on high-resource utterances")


class Pretrainer:
    """Owns the model, optimizer and data stream of one pretraining run."""

    def __init__(self, model: DQData2vec, corpus, cfg: TrainConfig, weights: LossWeights,
                 log_path=None, hooks: Optional[Callable] = None):
        cfg.validate()
        weights.validate()
        if cfg.regime != model.regime:
            raise ConfigError(f"train regime {cfg.regime!r} != model regime {model.regime!r}")
        check_regime_labels(corpus, cfg.regime)
        self.model, self.corpus, self.cfg, self.weights = model, corpus, cfg, weights
        self.model.to(cfg.torch_dtype)
        codebooks = {id(p) for p in model.codebook_parameters()}
        params = model.trainable_parameters(cfg.regime)
        groups = [
            {"params": [p for p in params if id(p) not in codebooks], "lr_scale": 1.0},
            # codebooks take no weight decay: decay would drag codewords to the origin
            {"params": [p for p in params if id(p) in codebooks], "lr_scale": cfg.codebook_lr_scale,
             "weight_decay": 0.0},
        ]
        self.optimizer = torch.optim.AdamW(groups, lr=0.0, betas=cfg.betas, eps=cfg.adam_eps,
                                           weight_decay=cfg.weight_decay)
        self.stream = BatchStream(BalancedSampler(corpus, cfg.sampling_alpha, seed=cfg.seed),
                                  cfg.max_tokens, dtype=cfg.torch_dtype)
        self.monitor = CollapseMonitor(cfg.collapse_ratio, cfg.collapse_patience)
        self.step = 0
        self.history = []
        self.log_path = Path(log_path) if log_path else None
        self.hooks = hooks

    def _emit(self, event, **info):
        if self.hooks is not None:
            self.hooks(event, self.step, **info)

    def lr(self, step):
        c = self.cfg
        return lr_schedule(step, c.total_updates, c.lr_peak, c.lr_end, c.tri_stage)

    def tau(self, step):
        c = self.cfg
        return ema_decay(step, c.tau_start, c.tau_end, int(c.tau_anneal_frac * c.total_updates))

    def train_step(self) -> dict:
        model, cfg = self.model, self.cfg
        model.train()
        batch = next(self.stream)
        if cfg.regime == "shallow":
            batch = batch.without_labels()
        rng = step_rng(cfg.seed, self.step)
        gen = step_generator(cfg.seed, self.step)
        report, aux = model.compute_losses(batch, self.weights, rng, gen, cfg.regime)
        total = report.total
        if not bool(torch.isfinite(total)) or float(total.detach()) > cfg.max_loss:
            raise LossExplosionError(f"loss {float(total.detach())} at step {self.step}", step=self.step)
        lr = self.lr(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr * group["lr_scale"]
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(
                [p for g in self.optimizer.param_groups for p in g["params"]], cfg.grad_clip)
        self.optimizer.step()
        self._emit("optimizer_step")
        tau = self.tau(self.step)
        ema_update(model.teacher, model.student, tau)
        self._emit("ema_update", tau=tau)
        if "lang_indices" in aux:
            self.monitor.observe("language", aux["lang_indices"])
        if "phone_indices" in aux:
            self.monitor.observe("phoneme", aux["phone_indices"])
        record = {"step": self.step, **report.as_floats(), "lr": lr, "tau": tau, "batch": batch.size}
        self.step += 1
        self.history.append(record)
        if self.log_path is not None:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        if self.step % cfg.eval_every == 0:
            sizes = {
                "language": model.lqt.codebook.num_codewords if model.lqt is not None else None,
                "phoneme": model.pqt.codebook.num_codewords if model.pqt is not None else None,
            }
            collapsed = self.monitor.evaluate(self.step, sizes)
            if collapsed:
                raise CollapseError(
                    f"codeword usage collapsed for {', '.join(collapsed)} quantizer at step {self.step}",
                    step=self.step,
                )
        return record

    def run(self, until=None, checkpoint_dir=None):
        until = self.cfg.total_updates if until is None else min(until, self.cfg.total_updates)
        while self.step < until:
            self.train_step()
            if checkpoint_dir is not None and self.step % self.cfg.eval_every == 0:
                save_checkpoint(self.state_dict(), checkpoint_dir)
        return self.history

    # persistence ------------------------------------------------------
    def state_dict(self) -> dict:
        m = self.model
        return {
            "version": CHECKPOINT_VERSION,
            "config": {
                "model": m.cfg.to_dict(),
                "quantizer": m.qcfg.to_dict(),
                "weights": self.weights.to_dict(),
                "train": self.cfg.to_dict(),
                "num_languages": m.num_languages,
                "num_phonemes": m.num_phonemes,
                "regime": m.regime,
            },
            "model": m.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "stream": self.stream.state_dict(),
            "monitor": self.monitor.state_dict(),
        }

    def load_state_dict(self, state):
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = state["step"]
        self.stream.load_state_dict(state["stream"])
        self.monitor.load_state_dict(state["monitor"])


def build_model(config: dict, seed=0) -> DQData2vec:
    return DQData2vec(
        ModelConfig.from_dict(config["model"]),
        QuantizerConfig.from_dict(config["quantizer"]),
        config["num_languages"], config["num_phonemes"], config["regime"], seed=seed,
    )


def pretrain(model, corpus, train_cfg: TrainConfig, weights: Optional[LossWeights] = None,
             out_dir=None, hooks=None):
    """Run pretraining; returns the final checkpoint state.

    Raises ``CollapseError`` / ``LossExplosionError`` when the monitor trips.
    """
    weights = weights or LossWeights()
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("")
    trainer = Pretrainer(model, corpus, train_cfg, weights, log_path, hooks)
    trainer.run(checkpoint_dir=out_dir / "checkpoint" if out_dir else None)
    state = trainer.state_dict()
    state["history"] = trainer.history
    if out_dir is not None:
        save_checkpoint(state, out_dir / "checkpoint")
        export_codebooks(model, out_dir / "codebooks")
    return state


def export_codebooks(model, directory):
    for name in ("lqt", "pqt"):
        q = getattr(model, name)
        if q is not None:
            save_codebook(q.codebook, Path(directory) / name)


def _canonical(obj):
    """Fresh containers with interned strings.

    Pickle memoises by object identity, so two equal states can serialise
    differently when one happens to share a string or tuple object.  After
    this pass equal content gives equal bytes.
    """
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    return obj


def _state_bytes(state) -> bytes:
    buf = io.BytesIO()
    torch.save(_canonical(state), buf)
    return buf.getvalue()


def save_checkpoint(state: dict, directory):
    """Directory layout: config.json (copy), state.pt (binary), manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {k: v for k, v in state.items() if k != "history"}
    data = _state_bytes(payload)
    (directory / STATE_FILE).write_bytes(data)
    (directory / CONFIG_FILE).write_text(json.dumps(state["config"], indent=2, sort_keys=True))
    manifest = {
        "version": state["version"],
        "step": state["step"],
        "sha256": hashlib.sha256(data).hexdigest(),
        "regime": state["config"]["regime"],
    }
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory) -> dict:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    data = (directory / STATE_FILE).read_bytes()
    if hashlib.sha256(data).hexdigest() != manifest["sha256"]:
        raise CheckpointError("checkpoint state does not match its manifest digest")
    state = torch.load(io.BytesIO(data), weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"state version {state.get('version')} != {CHECKPOINT_VERSION}")
    return state


def model_from_checkpoint(state) -> DQData2vec:
    model = build_model(state["config"])
    model.to(DTYPES[state["config"]["train"].get("dtype", "float32")])
    model.load_state_dict(state["model"])
    return model


def resume(state, corpus, log_path=None, hooks=None) -> Pretrainer:
    cfg = state["config"]
    model = model_from_checkpoint(state)
    trainer = Pretrainer(model, corpus, TrainConfig.from_dict(cfg["train"]),
                         LossWeights.from_dict(cfg["weights"]), log_path, hooks)
    trainer.load_state_dict(state)
    return trainer


# fine-tuning ------------------------------------------------------------

def character_map(num_phonemes):
    """Many-to-one phoneme -> 'character' spelling (an orthography analogue)."""
    alphabet = max(2, (num_phonemes + 1) // 2)
    return {p: (p % alphabet) for p in range(num_phonemes)}


def finetune_targets(utt, unit, num_phonemes):
    if utt.phoneme_seq is None:
        raise RegimeError(f"{utt.uid}: fine-tuning needs labels")
    if unit == "phoneme":
        return [p + 1 for p in utt.phoneme_seq]
    cmap = character_map(num_phonemes)
    return [cmap[p] + 1 for p in utt.phoneme_seq]


def finetune_split(corpus, cfg: FinetuneConfig):
    """Per target (low-resource) language: a small labelled train set and a held-out set."""
    rng = np.random.default_rng(cfg.seed + 7919)
    train, held = [], []
    for lang in sorted({u.language_id for u in corpus if not u.is_high_resource}):
        pool = [u for u in corpus if u.language_id == lang]
        order = rng.permutation(len(pool))
        held += [pool[i] for i in order[:cfg.eval_utterances]]
        train += [pool[i] for i in order[cfg.eval_utterances:cfg.eval_utterances + cfg.labeled_utterances]]
    return train, held


def evaluate_ter(model: FinetuneModel, utterances, unit, num_phonemes, dtype=torch.float32) -> float:
    model.eval()
    hyps, refs = [], []
    with torch.no_grad():
        for start in range(0, len(utterances), 32):
            chunk = utterances[start:start + 32]
            batch = collate(chunk, dtype=dtype)
            logits, lengths = model(batch.features, batch.lengths)
            hyps += greedy_ctc_decode(logits, lengths)
            refs += [finetune_targets(u, unit, num_phonemes) for u in chunk]
    model.train()
    return token_error_rate(hyps, refs)


def finetune(state: Optional[dict], corpus, ft_cfg: FinetuneConfig, model_config: Optional[dict] = None,
             hooks=None):
    """Fine-tune the student encoder with a fresh CTC head.

    ``state=None`` starts from random initialisation (``model_config`` then
    supplies the architecture).  The backbone is frozen for the first
    ``freeze_updates`` steps.  Returns (model, report dict).
    """
    ft_cfg.validate()
    train, held = finetune_split(corpus, ft_cfg)
    if not train or not held:
        raise DataError(
            f"fine-tuning split is empty ({len(train)} train / {len(held)} held-out utterances); "
            "the corpus needs more low-resource utterances than eval_utterances per language"
        )
    dtype = DTYPES[ft_cfg.dtype]
    if state is not None:
        base = model_from_checkpoint(state)
        config = state["config"]
    else:
        if model_config is None:
            raise ConfigError("random-init fine-tuning needs a model config")
        config = model_config
        base = build_model(config, seed=ft_cfg.seed)
    n_phon = config["num_phonemes"]
    vocab = n_phon + 1 if ft_cfg.unit == "phoneme" else max(character_map(n_phon).values()) + 2
    model = FinetuneModel(base.feature_encoder, base.student, base.cfg.model_dim, vocab, seed=ft_cfg.seed)
    model.to(dtype)
    by_uid = {u.uid: u for u in train}
    optimizer = torch.optim.AdamW(model.parameters(), lr=ft_cfg.lr, weight_decay=0.0)
    backbone = model.backbone_parameters()
    rng = np.random.default_rng(ft_cfg.seed)
    history = []
    step = 0
    while step < ft_cfg.total_updates:
        order = [train[i] for i in rng.permutation(len(train))]
        for batch in pack_batches(order, ft_cfg.max_tokens, dtype=dtype):
            if step >= ft_cfg.total_updates:
                break
            frozen = step < ft_cfg.freeze_updates
            for p in backbone:
                p.requires_grad_(not frozen)
            logits, lengths = model(batch.features, batch.lengths)
            targets = [finetune_targets(by_uid[uid], ft_cfg.unit, n_phon) for uid in batch.uids]
            nll = ctc_nll(F.log_softmax(logits, -1), lengths, targets)
            ok = torch.isfinite(nll)
            loss = nll[ok].mean()
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            optimizer.step()
            if hooks is not None:
                hooks("finetune_step", step, frozen=frozen)
            history.append({"step": step, "loss": float(loss.detach()), "frozen": frozen})
            step += 1
    for p in backbone:
        p.requires_grad_(True)
    ter = evaluate_ter(model, held, ft_cfg.unit, n_phon, dtype)
    return model, {"token_error_rate": ter, "history": history,
                   "train_utterances": len(train), "eval_utterances": len(held)}
