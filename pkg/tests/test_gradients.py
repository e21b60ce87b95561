"""Analytic gradients against central finite differences, and the
stop-gradient contracts that must hold exactly.

Finite differences run inside a StopGradientTape: every ``sg(x)`` (teacher
outputs, codeword selections, the detached sides of the K-means and
straight-through terms) is frozen at its value at the expansion point.  That
is the function autograd differentiates, so the two must agree.
"""

import numpy as np
import pytest
import torch

from dqdata2vec.backbone import StopGradientTape, sg
from dqdata2vec.model import DQData2vec, QuantizerConfig
from dqdata2vec.objectives import LossWeights
from dqdata2vec.quantizer import kmeans_loss_terms
from dqdata2vec.synthdata import collate

from conftest import tiny_model_config

STEP = 1e-5
REL_TOL = 1e-4
SEED = 11

COMPONENTS = {
    "sl1": ("deep", lambda r: r.sl1),
    "kmeans": ("deep", lambda r: r.km_l + r.km_p),
    "contrastive": ("deep", lambda r: r.ctr_l + r.ctr_p),
    "ce": ("deep", lambda r: r.ce),
    "ctc": ("deep", lambda r: r.ctc),
    "L_sc": ("shallow", lambda r: r.total),
    "L_dc": ("deep", lambda r: r.total),
}


@pytest.fixture(scope="module")
def setup():
    from dqdata2vec.synthdata import CorpusSpec, generate_corpus

    spec = CorpusSpec(num_languages=2, num_phonemes=3, hours_per_language=[0.06, 0.04], utterances_per_hour=100,
                      frames_per_utterance=(12, 20), feature_dim=3, phoneme_span=(2, 4), seed=3)
    corpus = generate_corpus(spec)
    model = DQData2vec(tiny_model_config(), QuantizerConfig(), 2, 3, "deep", seed=0).double()
    # nudge the teacher away from the student so the two paths differ
    with torch.no_grad():
        for p in model.teacher.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=torch.Generator().manual_seed(5), dtype=p.dtype))
    chosen = [corpus[i] for i in (0, 1, len(corpus) - 2, len(corpus) - 1)]
    batch = collate(chosen, dtype=torch.float64)
    weights = LossWeights(n_neg_phoneme=4)
    return model, batch, weights


def evaluate(model, batch, weights, regime, pick):
    rng = np.random.default_rng(SEED)
    gen = torch.Generator().manual_seed(SEED)
    report, _ = model.compute_losses(batch, weights, rng, gen, regime=regime)
    return pick(report)


def test_tiny_model_is_small(setup):
    model, _, _ = setup
    n = sum(p.numel() for p in model.trainable_parameters("deep"))
    assert n <= 5000


@pytest.mark.parametrize("name", list(COMPONENTS))
def test_matches_finite_differences(setup, name):
    model, batch, weights = setup
    regime, pick = COMPONENTS[name]
    params = model.trainable_parameters(regime)
    tape = StopGradientTape()
    with tape:
        model.zero_grad(set_to_none=True)
        loss = evaluate(model, batch, weights, regime, pick)
        assert loss.requires_grad
        loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    model.zero_grad(set_to_none=True)

    # every tensor's largest coordinate, the overall largest, and a random sample
    flat = torch.cat([a.reshape(-1) for a in analytic])
    assert float(flat.abs().max()) > 0
    owners = np.concatenate([np.full(p.numel(), i) for i, p in enumerate(params)])
    offsets = np.concatenate([np.arange(p.numel()) for p in params])
    top = torch.argsort(flat.abs(), descending=True)[:24].numpy()
    rest = np.random.default_rng(0).choice(len(flat), 24, replace=False)
    starts = np.cumsum([0] + [p.numel() for p in params[:-1]])
    per_tensor = [s + int(a.abs().argmax()) for s, a in zip(starts, analytic) if a.abs().max() > 0]
    picks = np.unique(np.concatenate([top, rest, per_tensor]))

    numeric = np.empty(len(picks))
    with tape.replay():
        with torch.no_grad():
            for k, idx in enumerate(picks):
                p = params[owners[idx]].view(-1)
                j = offsets[idx]
                orig = p[j].item()
                p[j] = orig + STEP
                tape.replay()
                plus = evaluate(model, batch, weights, regime, pick).item()
                p[j] = orig - STEP
                tape.replay()
                minus = evaluate(model, batch, weights, regime, pick).item()
                p[j] = orig
                numeric[k] = (plus - minus) / (2 * STEP)
    a = flat[picks].numpy()
    rel = np.linalg.norm(a - numeric) / max(np.linalg.norm(a), 1e-12)
    print(f"{name}: {len(picks)} coordinates, relative error {rel:.2e}")
    assert rel < REL_TOL, f"{name}: relative error {rel:.2e}"
    big = np.abs(a) > 1e-4
    per = np.abs(a[big] - numeric[big]) / np.abs(a[big])
    assert per.max(initial=0.0) < REL_TOL, f"{name}: worst coordinate {per.max():.2e}"


def test_tape_replays_in_order():
    tape = StopGradientTape()
    x = torch.tensor([1.0, 2.0], requires_grad=True)
    with tape:
        a, b = sg(x), sg(2 * x)
    tape.replay()
    with tape:
        y = torch.tensor([5.0, 5.0])
        assert torch.equal(sg(y), a)
        assert torch.equal(sg(y), b)
        with pytest.raises(RuntimeError):
            sg(y)
    # outside the tape sg is a plain detach
    assert torch.equal(sg(x * 3), torch.tensor([3.0, 6.0]))


# ---------------------------------------------------------------------------
# stop-gradient contracts: zero tolerance


def grads_of(loss, params):
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@pytest.mark.parametrize("name", list(COMPONENTS))
def test_teacher_receives_no_gradient(setup, name):
    model, batch, weights = setup
    regime, pick = COMPONENTS[name]
    teacher = list(model.teacher.parameters())
    for p in teacher:
        p.requires_grad_(True)
    try:
        loss = evaluate(model, batch, weights, regime, pick)
        for g in grads_of(loss, teacher):
            assert torch.count_nonzero(g) == 0
    finally:
        for p in teacher:
            p.requires_grad_(False)


@pytest.mark.parametrize("pick", [lambda r: r.ctr_l, lambda r: r.ctr_p, lambda r: r.ctr_l + r.ctr_p],
                         ids=["language", "phoneme", "both"])
def test_codebooks_untouched_by_contrastive(setup, pick):
    model, batch, weights = setup
    loss = evaluate(model, batch, weights, "deep", pick)
    assert loss.requires_grad
    for g in grads_of(loss, model.codebook_parameters()):
        assert torch.count_nonzero(g) == 0
    # while the adapters do learn from it through the straight-through path
    assert any(torch.count_nonzero(g) > 0 for g in grads_of(loss, model.adapter_parameters()))


def _level_terms(model, batch):
    z, lengths = model.feature_encode(batch.features, batch.lengths)
    teacher = model.teacher_forward(z, lengths)
    lang, phone = model.quantize_levels(teacher)
    out = []
    for (e, res), quantizer in ((lang, model.lqt), (phone, model.pqt)):
        t1, t2 = kmeans_loss_terms(e, res.q, 0.25)
        out.append((quantizer, t1, t2))
    return out


def test_codebook_untouched_by_commitment_term(setup):
    model, batch, _ = setup
    for quantizer, t1, t2 in _level_terms(model, batch):
        (g2,) = grads_of(t2, [quantizer.codebook.entries])
        assert torch.count_nonzero(g2) == 0
        (g1,) = grads_of(t1, [quantizer.codebook.entries])
        assert torch.count_nonzero(g1) > 0


def test_adapter_untouched_by_codebook_term(setup):
    model, batch, _ = setup
    for quantizer, t1, t2 in _level_terms(model, batch):
        params = list(quantizer.adapter.parameters())
        for g in grads_of(t1, params):
            assert torch.count_nonzero(g) == 0
        assert any(torch.count_nonzero(g) > 0 for g in grads_of(t2, params))


def test_backbone_untouched_by_kmeans(setup):
    """Quantizer inputs come from the teacher, so K-means never reaches the student."""
    model, batch, weights = setup
    loss = evaluate(model, batch, weights, "deep", lambda r: r.km_l + r.km_p)
    backbone = list(model.student.parameters()) + list(model.feature_encoder.parameters())
    for g in grads_of(loss, backbone):
        assert torch.count_nonzero(g) == 0
