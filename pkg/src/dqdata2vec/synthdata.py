"""Synthetic multilingual corpus with known language and phoneme latents.

Every frame is ``language_offset[l] + phoneme_prototype[l, p] + noise``.  A
configurable fraction of phonemes share one prototype across all languages;
the rest get a language-specific prototype.  Because the generating latents
are kept, clustering quality of the quantizers can be measured exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
SPEC_NAME = "corpus_spec.json"


@dataclass
class CorpusSpec:
    num_languages: int = 4
    num_phonemes: int = 12
    hours_per_language: list = field(default_factory=lambda: [4.0, 1.0, 1.0, 1.0])
    utterances_per_hour: int = 100
    frames_per_utterance: tuple = (48, 96)
    feature_dim: int = 16
    phoneme_span: tuple = (4, 12)
    noise_std: float = 0.3
    language_scale: float = 1.0
    phoneme_scale: float = 1.0
    shared_fraction: float = 0.5
    high_resource: Optional[int] = None
    seed: int = 0

    def validate(self):
        # a single language is allowed for degenerate fixtures
        if self.num_languages < 1:
            raise ConfigError("num_languages must be >= 1")
        if self.num_phonemes < self.num_languages:
            raise ConfigError("num_phonemes must be >= num_languages")
        if len(self.hours_per_language) != self.num_languages:
            raise ConfigError(
                f"hours_per_language has {len(self.hours_per_language)} entries, "
                f"expected {self.num_languages}"
            )
        if any(h <= 0 for h in self.hours_per_language):
            raise ConfigError("hours_per_language entries must be positive")
        t_min, t_max = self.frames_per_utterance
        if t_min < 1 or t_max < t_min:
            raise ConfigError(f"bad frames_per_utterance range {self.frames_per_utterance}")
        s_min, s_max = self.phoneme_span
        if s_min < 1 or s_max < s_min:
            raise ConfigError(f"bad phoneme_span range {self.phoneme_span}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ConfigError("shared_fraction must lie in [0, 1]")
        if self.feature_dim < 1 or self.utterances_per_hour < 1:
            raise ConfigError("feature_dim and utterances_per_hour must be positive")
        if self.high_resource is not None and not 0 <= self.high_resource < self.num_languages:
            raise ConfigError("high_resource must index a language")

    @property
    def high_resource_language(self) -> int:
        if self.high_resource is not None:
            return self.high_resource
        return int(np.argmax(self.hours_per_language))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("frames_per_utterance", "phoneme_span"):
            if key in d:
                d[key] = tuple(d[key])
        if "hours_per_language" in d:
            d["hours_per_language"] = [float(h) for h in d["hours_per_language"]]
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["frames_per_utterance"] = list(self.frames_per_utterance)
        d["phoneme_span"] = list(self.phoneme_span)
        return d


@dataclass
class Utterance:
    features: np.ndarray  # [T, feature_dim]
    language_id: int
    phoneme_frames: Optional[np.ndarray]  # [T]
    phoneme_seq: Optional[list]
    is_high_resource: bool
    uid: str = ""

    @property
    def length(self) -> int:
        return int(self.features.shape[0])


@dataclass
class UtteranceBatch:
    features: torch.Tensor  # [B, T_max, feature_dim]
    lengths: torch.Tensor  # [B]
    language_ids: Optional[torch.Tensor]
    phoneme_seqs: Optional[list]
    high_resource_mask: torch.Tensor  # [B] bool
    uids: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    def to(self, dtype) -> "UtteranceBatch":
        return UtteranceBatch(
            self.features.to(dtype), self.lengths, self.language_ids,
            self.phoneme_seqs, self.high_resource_mask, list(self.uids),
        )

    def without_labels(self) -> "UtteranceBatch":
        return UtteranceBatch(
            self.features, self.lengths, None, None, self.high_resource_mask, list(self.uids)
        )


def collapse_runs(frames) -> list:
    """Deduplicate consecutive repeats: [3,3,1,1,3] -> [3,1,3]."""
    frames = np.asarray(frames)
    if frames.size == 0:
        return []
    keep = np.ones(len(frames), dtype=bool)
    keep[1:] = frames[1:] != frames[:-1]
    return [int(x) for x in frames[keep]]


def _prototypes(spec: CorpusSpec, rng: np.random.Generator):
    lang_offsets = rng.normal(0.0, spec.language_scale, (spec.num_languages, spec.feature_dim))
    shared = rng.normal(0.0, spec.phoneme_scale, (spec.num_phonemes, spec.feature_dim))
    specific = rng.normal(
        0.0, spec.phoneme_scale, (spec.num_languages, spec.num_phonemes, spec.feature_dim)
    )
    n_shared = int(round(spec.shared_fraction * spec.num_phonemes))
    is_shared = np.zeros(spec.num_phonemes, dtype=bool)
    is_shared[rng.permutation(spec.num_phonemes)[:n_shared]] = True
    protos = np.where(is_shared[None, :, None], shared[None], specific)
    # per-language phoneme unigram distribution
    unigrams = rng.dirichlet(np.full(spec.num_phonemes, 2.0), size=spec.num_languages)
    return lang_offsets, protos, is_shared, unigrams


def _phoneme_track(length, span, unigram, rng):
    frames = np.empty(length, dtype=np.int64)
    pos, prev = 0, -1
    n = len(unigram)
    while pos < length:
        if n > 1 and prev >= 0:
            p = unigram.copy()
            p[prev] = 0.0
            p /= p.sum()
        else:
            p = unigram
        tok = int(rng.choice(n, p=p))
        run = int(rng.integers(span[0], span[1] + 1))
        frames[pos:pos + run] = tok
        pos += run
        prev = tok
    return frames


def generate_corpus(spec: CorpusSpec) -> list:
    """Build the corpus described by ``spec``; deterministic in ``spec.seed``."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    proto_seq, utt_seq = root.spawn(2)
    lang_offsets, protos, _, unigrams = _prototypes(spec, np.random.default_rng(proto_seq))
    counts = [max(1, int(round(h * spec.utterances_per_hour))) for h in spec.hours_per_language]
    high = spec.high_resource_language

    utt_seeds = utt_seq.spawn(sum(counts))
    corpus = []
    k = 0
    for lang, count in enumerate(counts):
        for _ in range(count):
            rng = np.random.default_rng(utt_seeds[k])
            length = int(rng.integers(spec.frames_per_utterance[0], spec.frames_per_utterance[1] + 1))
            frames = _phoneme_track(length, spec.phoneme_span, unigrams[lang], rng)
            feats = lang_offsets[lang][None, :] + protos[lang, frames]
            if spec.noise_std > 0:
                feats = feats + rng.normal(0.0, spec.noise_std, feats.shape)
            corpus.append(Utterance(
                features=feats.astype(np.float32),
                language_id=lang,
                phoneme_frames=frames,
                phoneme_seq=collapse_runs(frames),
                is_high_resource=(lang == high),
                uid=f"utt{k:06d}",
            ))
            k += 1
    return corpus


def corpus_prototypes(spec: CorpusSpec):
    """Return (language_offsets, prototypes[L, P, F], is_shared) used by ``generate_corpus``."""
    root = np.random.SeedSequence(spec.seed)
    proto_seq, _ = root.spawn(2)
    lang_offsets, protos, is_shared, _ = _prototypes(spec, np.random.default_rng(proto_seq))
    return lang_offsets, protos, is_shared


def split_corpus(corpus, fraction, seed=0):
    """Deterministic random split into (first, second) with ``fraction`` in the second."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    n_second = int(round(fraction * len(corpus)))
    second = sorted(order[:n_second].tolist())
    first = sorted(order[n_second:].tolist())
    return [corpus[i] for i in first], [corpus[i] for i in second]


def strip_labels(corpus) -> list:
    """Copy of the corpus with phoneme labels removed (language ids stay as sampling metadata)."""
    return [
        Utterance(u.features, u.language_id, None, None, u.is_high_resource, u.uid)
        for u in corpus
    ]


def language_probabilities(corpus, alpha=0.5) -> np.ndarray:
    """Resampling distribution p_l ∝ (n_l / N)^alpha, with n_l in frames."""
    if not corpus:
        raise DataError("corpus is empty")
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    num_lang = max(u.language_id for u in corpus) + 1
    frames = np.zeros(num_lang)
    for u in corpus:
        frames[u.language_id] += u.length
    share = frames / frames.sum()
    p = np.where(share > 0, share ** alpha, 0.0)
    return p / p.sum()


class BalancedSampler:
    """Infinite utterance stream: draw a language from the smoothed multinomial,
    then an utterance uniformly within it.

    Owned by a single consumer.  ``state_dict``/``load_state_dict`` capture the
    generator so a resumed run continues the same stream.
    """

    def __init__(self, corpus, alpha=0.5, seed=0):
        self.corpus = corpus
        self.probs = language_probabilities(corpus, alpha)
        self.by_language = [[] for _ in self.probs]
        for i, u in enumerate(corpus):
            self.by_language[u.language_id].append(i)
        self.rng = np.random.default_rng(seed)

    def __iter__(self):
        return self

    def next_index(self) -> int:
        lang = int(self.rng.choice(len(self.probs), p=self.probs))
        pool = self.by_language[lang]
        return pool[int(self.rng.integers(len(pool)))]

    def __next__(self) -> Utterance:
        return self.corpus[self.next_index()]

    def state_dict(self):
        return {"rng": self.rng.bit_generator.state}

    def load_state_dict(self, state):
        self.rng.bit_generator.state = state["rng"]


def balanced_sampler(corpus, alpha=0.5, seed=0) -> BalancedSampler:
    return BalancedSampler(corpus, alpha=alpha, seed=seed)


def collate(utterances: Sequence[Utterance], dtype=torch.float32) -> UtteranceBatch:
    """Pad a list of utterances into a batch, keeping order."""
    if not utterances:
        raise DataError("cannot batch zero utterances")
    lengths = [u.length for u in utterances]
    feat_dim = utterances[0].features.shape[1]
    feats = np.zeros((len(utterances), max(lengths), feat_dim), dtype=np.float32)
    for i, u in enumerate(utterances):
        feats[i, :u.length] = u.features
    labelled = [u.phoneme_seq is not None for u in utterances]
    seqs = [list(u.phoneme_seq) for u in utterances] if all(labelled) else None
    return UtteranceBatch(
        features=torch.from_numpy(feats).to(dtype),
        lengths=torch.tensor(lengths, dtype=torch.long),
        language_ids=torch.tensor([u.language_id for u in utterances], dtype=torch.long),
        phoneme_seqs=seqs,
        high_resource_mask=torch.tensor([u.is_high_resource for u in utterances], dtype=torch.bool),
        uids=[u.uid for u in utterances],
    )


def make_batch(utterances, max_tokens, dtype=torch.float32) -> UtteranceBatch:
    """Batch the longest prefix of ``utterances`` whose unpadded frames fit ``max_tokens``."""
    if not utterances:
        raise DataError("cannot batch zero utterances")
    for u in utterances:
        if u.length > max_tokens:
            raise DataError(f"utterance {u.uid!r} has {u.length} frames > max_tokens={max_tokens}")
    chosen, total = [], 0
    for u in utterances:
        if total + u.length > max_tokens:
            break
        chosen.append(u)
        total += u.length
    return collate(chosen, dtype=dtype)


def pack_batches(utterances, max_tokens, dtype=torch.float32) -> list:
    """Greedy in-order packing of a whole list into batches."""
    batches, rest = [], list(utterances)
    while rest:
        b = make_batch(rest, max_tokens, dtype=dtype)
        batches.append(b)
        rest = rest[b.size:]
    return batches


class BatchStream:
    """Draws balanced batches of at most ``max_tokens`` frames.

    Repeats across batches are allowed, repeats within one batch are not.  An
    utterance that does not fit is carried over to open the next batch.
    """

    def __init__(self, sampler: BalancedSampler, max_tokens: int, dtype=torch.float32, max_draws=1000):
        longest = max(u.length for u in sampler.corpus)
        if longest > max_tokens:
            raise DataError(f"longest utterance ({longest}) exceeds max_tokens={max_tokens}")
        self.sampler = sampler
        self.max_tokens = max_tokens
        self.dtype = dtype
        self.max_draws = max_draws
        self.pending: Optional[int] = None

    def __iter__(self) -> Iterator[UtteranceBatch]:
        return self

    def __next__(self) -> UtteranceBatch:
        corpus = self.sampler.corpus
        chosen, seen, total = [], set(), 0
        if self.pending is not None:
            chosen.append(self.pending)
            seen.add(self.pending)
            total = corpus[self.pending].length
            self.pending = None
        for _ in range(self.max_draws):
            idx = self.sampler.next_index()
            if idx in seen:
                continue
            if total + corpus[idx].length > self.max_tokens:
                self.pending = idx
                break
            chosen.append(idx)
            seen.add(idx)
            total += corpus[idx].length
        return collate([corpus[i] for i in chosen], dtype=self.dtype)

    def state_dict(self):
        return {"sampler": self.sampler.state_dict(), "pending": self.pending}

    def load_state_dict(self, state):
        self.sampler.load_state_dict(state["sampler"])
        self.pending = state["pending"]


def save_corpus(corpus, directory, spec: Optional[CorpusSpec] = None):
    """Write one ``.npz`` per utterance plus a tab-separated manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["id\tlength\tlanguage_id\tphoneme_seq\thigh_resource"]
    for u in corpus:
        arrays = {"features": u.features}
        if u.phoneme_frames is not None:
            arrays["phoneme_frames"] = u.phoneme_frames
        np.savez(directory / f"{u.uid}.npz", **arrays)
        seq = " ".join(map(str, u.phoneme_seq)) if u.phoneme_seq is not None else "-"
        lines.append(f"{u.uid}\t{u.length}\t{u.language_id}\t{seq}\t{int(u.is_high_resource)}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    if spec is not None:
        (directory / SPEC_NAME).write_text(json.dumps(spec.to_dict(), indent=2))


def load_corpus(directory) -> list:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}")
    rows = manifest.read_text().splitlines()
    if not rows or rows[0].split("\t")[0] != "id":
        raise DataError(f"malformed manifest header in {manifest}")
    corpus = []
    for line_no, line in enumerate(rows[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{manifest}:{line_no}: expected 5 fields, got {len(parts)}")
        uid, length, lang, seq, high = parts
        with np.load(directory / f"{uid}.npz") as data:
            feats = data["features"]
            frames = data["phoneme_frames"] if "phoneme_frames" in data.files else None
        if feats.shape[0] != int(length):
            raise DataError(f"{uid}: manifest length {length} != stored {feats.shape[0]}")
        corpus.append(Utterance(
            features=feats,
            language_id=int(lang),
            phoneme_frames=frames,
            phoneme_seq=None if seq == "-" else [int(x) for x in seq.split()],
            is_high_resource=bool(int(high)),
            uid=uid,
        ))
    return corpus


def load_corpus_spec(directory) -> Optional[CorpusSpec]:
    path = Path(directory) / SPEC_NAME
    if not path.exists():
        return None
    return CorpusSpec.from_dict(json.loads(path.read_text()))
