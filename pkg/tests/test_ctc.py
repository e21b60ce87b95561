"""CTC negative log-likelihood against exhaustive path enumeration."""

import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from dqdata2vec.errors import DataError
from dqdata2vec.objectives import ctc_feasible, ctc_nll


def collapse(path, blank=0):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def enumerate_nll(log_probs, target):
    """-log of the summed probability of every length-T path that collapses to target."""
    t_len, vocab = log_probs.shape
    terms = []
    for path in itertools.product(range(vocab), repeat=t_len):
        if collapse(path) == list(target):
            terms.append(sum(log_probs[t, s] for t, s in enumerate(path)))
    if not terms:
        return math.inf
    top = max(terms)
    return -(top + math.log(sum(math.exp(x - top) for x in terms)))


def test_worked_examples():
    lp = torch.log(torch.full((1, 1, 2), 0.5, dtype=torch.float64))
    assert ctc_nll(lp, torch.tensor([1]), [[1]]).item() == pytest.approx(-math.log(0.5), abs=1e-15)
    lp = torch.log(torch.full((1, 2, 2), 0.5, dtype=torch.float64))
    assert ctc_nll(lp, torch.tensor([2]), [[1]]).item() == pytest.approx(-math.log(0.75), abs=1e-15)


def all_cases():
    for vocab in (2, 3, 4):
        labels = range(1, vocab)
        for t_len in range(1, 7):
            for u_len in range(0, 4):
                for target in itertools.product(labels, repeat=u_len):
                    yield vocab, t_len, list(target)


def test_matches_enumeration_exhaustively():
    rng = np.random.default_rng(0)
    checked = 0
    by_shape = {}
    for vocab, t_len, target in all_cases():
        by_shape.setdefault((vocab, t_len), []).append(target)
    draws = 3
    for (vocab, t_len), targets in by_shape.items():
        for _ in range(draws):
            logits = torch.from_numpy(rng.normal(size=(len(targets), t_len, vocab)) * 2)
            lp = F.log_softmax(logits, -1)
            got = ctc_nll(lp, torch.full((len(targets),), t_len), targets)
            for b, target in enumerate(targets):
                want = enumerate_nll(lp[b].numpy(), target)
                if math.isinf(want):
                    assert math.isinf(got[b].item()) and not ctc_feasible(target, t_len)
                else:
                    assert abs(got[b].item() - want) < 1e-10, (vocab, t_len, target)
                checked += 1
    # every (vocab <= 4, T <= 6, |y| <= 3) combination: 6 * (1+1+1+1 + 1+2+4+8 + 1+3+9+27) targets
    assert checked == draws * 6 * (4 + 15 + 40)


def test_variable_lengths_in_one_batch():
    rng = np.random.default_rng(1)
    lp = F.log_softmax(torch.from_numpy(rng.normal(size=(3, 6, 3))), -1)
    targets, lengths = [[1, 2], [2, 2], [1]], [6, 4, 2]
    got = ctc_nll(lp, torch.tensor(lengths), targets)
    for b in range(3):
        want = enumerate_nll(lp[b, :lengths[b]].numpy(), targets[b])
        assert abs(got[b].item() - want) < 1e-10


def test_matches_torch_reference_on_larger_inputs():
    rng = np.random.default_rng(2)
    lp = F.log_softmax(torch.from_numpy(rng.normal(size=(4, 30, 6))), -1)
    targets = [[1, 2, 3, 3, 5], [4], [2, 2, 2], [1, 5, 1, 5, 1, 5, 1]]
    lengths = torch.tensor([30, 25, 12, 30])
    flat = torch.tensor([x for y in targets for x in y])
    ref = F.ctc_loss(lp.transpose(0, 1), flat, lengths, torch.tensor([len(y) for y in targets]),
                     reduction="none", zero_infinity=False)
    torch.testing.assert_close(ctc_nll(lp, lengths, targets), ref, rtol=1e-10, atol=1e-10)


def test_rejects_blank_in_target():
    lp = torch.log(torch.full((1, 2, 2), 0.5))
    with pytest.raises(DataError):
        ctc_nll(lp, torch.tensor([2]), [[0]])


def test_feasibility_rule():
    assert ctc_feasible([1, 1], 3) and not ctc_feasible([1, 1], 2)
    assert ctc_feasible([1, 2], 2)
