"""Clustering-quality metrics for the quantizers: purity, label-normalised
mutual information, conditional-probability tables and active-code counts,
plus greedy CTC decoding and token error rate."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone import receptive_windows
from .synthdata import collate

LEVELS = ("language", "phoneme")


@dataclass
class CooccurrenceMatrix:
    counts: np.ndarray  # [num_joint_codes, num_labels]
    code_axis: str
    group_codes: Optional[np.ndarray] = None  # distinct observed per-group index tuples [K, G]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "CooccurrenceMatrix") -> "CooccurrenceMatrix":
        groups = None
        if self.group_codes is not None and other.group_codes is not None:
            groups = np.unique(np.concatenate([self.group_codes, other.group_codes]), axis=0)
        return CooccurrenceMatrix(self.counts + other.counts, self.code_axis, groups)


@dataclass
class MetricReport:
    purity: float
    nmi: float
    acn: int
    agn: tuple
    total: int
    per_label: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["agn"] = list(self.agn)
        return d


def purity(counts) -> float:
    """Fraction of samples carrying their code's majority label."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    return float(counts.max(axis=1).sum() / total)


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi(counts) -> float:
    """I(code; label) / H(label) from the empirical joint distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    joint = counts / total
    p_code = joint.sum(1)
    p_label = joint.sum(0)
    h_label = _entropy(p_label)
    if h_label == 0:
        return 0.0
    nz = joint > 0
    outer = p_code[:, None] * p_label[None, :]
    mi = float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())
    return float(min(max(mi / h_label, 0.0), 1.0))


def count_matrix(codes, labels, num_codes, num_labels, code_axis, group_indices=None):
    counts = np.zeros((num_codes, num_labels), dtype=np.int64)
    np.add.at(counts, (np.asarray(codes, dtype=np.int64), np.asarray(labels, dtype=np.int64)), 1)
    groups = None
    if group_indices is not None and len(group_indices):
        groups = np.unique(np.asarray(group_indices), axis=0)
    return CooccurrenceMatrix(counts, code_axis, groups)


def downsample_labels(frames, conv_layers, out_length=None):
    """Majority vote of input-frame labels inside each output frame's receptive window.

    Ties go to the smallest label id.
    """
    frames = np.asarray(frames)
    windows = receptive_windows(len(frames), conv_layers)
    if out_length is not None:
        windows = windows[:out_length]
    out = np.empty(len(windows), dtype=np.int64)
    for i, (s, e) in enumerate(windows):
        out[i] = np.bincount(frames[s:e]).argmax()
    return out


def _iter_batches(corpus, batch_size):
    for start in range(0, len(corpus), batch_size):
        yield corpus[start:start + batch_size]


def collect_counts(model, corpus, level, batch_size=32) -> CooccurrenceMatrix:
    """Count (joint codeword, label) pairs: one per utterance at language
    level, one per valid downsampled frame at phoneme level."""
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")
    quantizer = model.lqt if level == "language" else model.pqt
    if quantizer is None:
        raise ValueError(f"model has no {level} quantizer")
    n = quantizer.codebook.num_codewords
    g = quantizer.codebook.groups
    num_codes = n ** g
    num_labels = model.num_languages if level == "language" else model.num_phonemes
    dtype = next(model.parameters()).dtype
    codes, labels, groups = [], [], []
    was_training = model.training
    model.eval()
    for chunk in _iter_batches(corpus, batch_size):
        batch = collate(chunk, dtype=dtype)
        out = model.infer_codes(batch)
        if level == "language":
            codes.append(out["lang_joint"].numpy())
            groups.append(out["lang_groups"].numpy())
            labels.append(np.array([u.language_id for u in chunk]))
        else:
            lens = out["lengths"].tolist()
            pj, pg = out["phone_joint"].numpy(), out["phone_groups"].numpy()
            for i, u in enumerate(chunk):
                if u.phoneme_frames is None:
                    raise ValueError(f"utterance {u.uid} has no frame-level phoneme labels")
                codes.append(pj[i, :lens[i]])
                groups.append(pg[i, :lens[i]])
                labels.append(downsample_labels(u.phoneme_frames, model.cfg.conv_layers, lens[i]))
    model.train(was_training)
    return count_matrix(np.concatenate(codes), np.concatenate(labels), num_codes, num_labels,
                        level, np.concatenate(groups))


def active_counts(matrix: CooccurrenceMatrix):
    """(ACN, AGN): distinct joint codes observed, distinct indices per group."""
    acn = int((matrix.counts.sum(1) > 0).sum())
    if matrix.group_codes is None:
        return acn, ()
    agn = tuple(int(len(np.unique(matrix.group_codes[:, g]))) for g in range(matrix.group_codes.shape[1]))
    return acn, agn


def metric_report(matrix: CooccurrenceMatrix) -> MetricReport:
    acn, agn = active_counts(matrix)
    per_label = {}
    col = matrix.counts.sum(0)
    for lab in np.flatnonzero(col):
        per_label[int(lab)] = {
            "count": int(col[lab]),
            "top_code_share": float(matrix.counts[:, lab].max() / col[lab]),
        }
    return MetricReport(purity(matrix.counts), nmi(matrix.counts), acn, agn, matrix.total, per_label)


def conditional_table(matrix: CooccurrenceMatrix):
    """P(label | code) restricted to active codes.

    Rows: labels by descending frequency (ties by id).  Columns: active codes
    sorted by (rank of their most likely label, code index).
    Returns (table [labels, codes], row label ids, column code ids).
    """
    counts = matrix.counts
    active = np.flatnonzero(counts.sum(1) > 0)
    freq = counts.sum(0)
    row_order = np.array(sorted(range(counts.shape[1]), key=lambda l: (-freq[l], l)), dtype=np.int64)
    rank = np.empty_like(row_order)
    rank[row_order] = np.arange(len(row_order))
    sub = counts[active].astype(np.float64)
    cond = sub / sub.sum(1, keepdims=True)
    best = rank[cond.argmax(1)]
    col_order = np.lexsort((active, best))
    table = cond[col_order][:, row_order].T
    return table, row_order, active[col_order]


def conditional_report(matrix: CooccurrenceMatrix, path, label_names=None):
    """Write the conditional table as TSV with a '#'-commented metric header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, rows, cols = conditional_table(matrix)
    rep = metric_report(matrix)
    prefix = "L" if matrix.code_axis == "language" else "P"
    lines = [
        f"# level={matrix.code_axis}",
        f"# ACN={rep.acn}",
        f"# AGN={','.join(map(str, rep.agn))}",
        f"# {prefix}P={rep.purity:.6f}",
        f"# {prefix}NMI={rep.nmi:.6f}",
        "label\t" + "\t".join(f"c{c}" for c in cols),
    ]
    for r, lab in enumerate(rows):
        name = label_names[lab] if label_names else str(int(lab))
        lines.append(name + "\t" + "\t".join(f"{v:.6f}" for v in table[r]))
    path.write_text("\n".join(lines) + "\n")
    return rep


def read_conditional_report(path):
    header, rows, names = {}, [], []
    cols = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            header[key] = val
        elif line.startswith("label\t"):
            cols = [int(c[1:]) for c in line.split("\t")[1:]]
        else:
            parts = line.split("\t")
            names.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return header, np.array(rows), names, cols


def per_language_metrics(model, corpus) -> dict:
    """Phoneme-level purity/NMI on each language's subset separately."""
    out = {}
    for lang in sorted({u.language_id for u in corpus}):
        subset = [u for u in corpus if u.language_id == lang]
        out[lang] = metric_report(collect_counts(model, subset, "phoneme"))
    return out


def shuffled_matrix(matrix: CooccurrenceMatrix, seed=0) -> CooccurrenceMatrix:
    """Same code and label marginals, with the pairing randomly permuted."""
    codes = np.repeat(np.arange(matrix.counts.shape[0]), matrix.counts.sum(1))
    labels_per_code = []
    for c in range(matrix.counts.shape[0]):
        labels_per_code.append(np.repeat(np.arange(matrix.counts.shape[1]), matrix.counts[c]))
    labels = np.concatenate(labels_per_code) if labels_per_code else np.array([], dtype=np.int64)
    labels = np.random.default_rng(seed).permutation(labels)
    return count_matrix(codes, labels, *matrix.counts.shape, matrix.code_axis, matrix.group_codes)


def greedy_ctc_decode(logits, lengths, blank=0) -> list:
    """Frame argmax, collapse repeats, drop blanks."""
    best = torch.as_tensor(logits).argmax(-1)
    out = []
    for b, n in enumerate(torch.as_tensor(lengths).tolist()):
        seq, prev = [], None
        for tok in best[b, :n].tolist():
            if tok != prev and tok != blank:
                seq.append(tok)
            prev = tok
        out.append(seq)
    return out


def edit_distance(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def token_error_rate(hyps, refs) -> float:
    """Total edit distance over total reference length (a single pair is allowed)."""
    if hyps and not isinstance(hyps[0], (list, tuple)):
        hyps, refs = [hyps], [refs]
    errors = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    length = sum(len(r) for r in refs)
    if length == 0:
        return 0.0 if errors == 0 else float("inf")
    return errors / length


def write_metrics(path, record: dict):
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
