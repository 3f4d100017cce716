import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from conftest import tensors
from taipan.encoders import GnnEncoderConfig
from taipan.graph import split_train_val_test
from taipan.metrics import confidence_metrics
from taipan.model import TaipanModel, TrainConfig, archive_diff, parameter_archive, predict_with_confidence, pretrain
from taipan.profiler import AttackHierarchy
from taipan.transfer import (
    AdaptationConfig,
    PrototypeBank,
    _Inputs,
    adapt,
    confidence_tuning_loss,
    filtered_entropy_loss,
    init_prototypes,
    ema_update,
    prompt_loss,
    prototype_probabilities,
    pseudo_labels_from_logits,
)


def _logits(n=40, s=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(n, 2, generator=g, dtype=torch.float64) * 2 for _ in range(s)]


def test_threshold_extremes():
    lg = _logits()
    assert pseudo_labels_from_logits(lg, 0.0).retained.all()
    assert not pseudo_labels_from_logits(lg + [torch.zeros(40, 2, dtype=torch.float64)], 1.0).retained.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_threshold_monotone(seed, a, b):
    lo, hi = sorted((a, b))
    lg = _logits(seed=seed)
    keep_lo = pseudo_labels_from_logits(lg, lo).retained
    keep_hi = pseudo_labels_from_logits(lg, hi).retained
    assert keep_lo.sum() >= keep_hi.sum()
    assert not (keep_hi & ~keep_lo).any()


def test_pseudo_labels_are_argmax():
    lg = _logits()
    ps = pseudo_labels_from_logits(lg, 0.7)
    for i, t in enumerate(lg):
        assert (ps.labels[:, i] == t.argmax(1).numpy()).all()
        np.testing.assert_allclose(ps.confidence[:, i], torch.softmax(t, 1).max(1).values.numpy())


def test_confidence_loss_cases():
    aux, tgt = _logits(seed=1), _logits(seed=2)
    s_aux = torch.randint(0, 2, (40, 3), generator=torch.Generator().manual_seed(0))
    none = pseudo_labels_from_logits(tgt, 1.0)
    none.retained[:] = False
    l_att, l_ps = confidence_tuning_loss(aux, s_aux, None, tgt, none, [1, 1, 1])
    assert l_ps.item() == 0.0
    ps = pseudo_labels_from_logits(tgt, 0.6)
    _, zero = confidence_tuning_loss(aux, s_aux, None, tgt, ps, [0, 0, 0])
    assert zero.item() == 0.0

    # retained pairs behave like labelled target nodes duplicated per task
    _, l_ps = confidence_tuning_loss(aux, s_aux, None, tgt, ps, [1.0, 2.0, 0.5])
    expected = 0.0
    for i, w in enumerate([1.0, 2.0, 0.5]):
        terms = []
        for v in np.flatnonzero(ps.retained[:, i]):
            p = oracles.softmax(tgt[i][v].tolist())
            terms.append(-math.log(p[ps.labels[v, i]]))
        if terms:
            expected += w * sum(terms) / len(terms)
    assert l_ps.item() == pytest.approx(expected, abs=1e-10)


def test_prototypes_single_and_mean():
    z = [torch.tensor([[1.0, 0.0], [3.0, 2.0], [5.0, 5.0]], dtype=torch.float64)]
    labels = np.array([[0], [0], [1]])
    bank = init_prototypes(z, labels, np.ones((3, 1), bool), [2])
    np.testing.assert_allclose(bank.prototypes[0].numpy(), [[2.0, 1.0], [5.0, 5.0]])
    assert not bank.empty[0].any()
    bank = init_prototypes(z, labels, np.array([[True], [False], [False]]), [2])
    np.testing.assert_allclose(bank.prototypes[0].numpy(), [[1.0, 0.0], [0.0, 0.0]])
    assert bank.empty[0].tolist() == [False, True]


def _bank(seed=0, empty=False):
    g = torch.Generator().manual_seed(seed)
    p = [torch.randn(2, 3, generator=g, dtype=torch.float64)]
    return PrototypeBank(p, [np.array([empty, False])], 0.9)


def test_ema_boundaries():
    prev, new = _bank(0), _bank(1)
    assert torch.equal(ema_update(prev, new, 1.0).prototypes[0], prev.prototypes[0])
    assert torch.equal(ema_update(prev, new, 0.0).prototypes[0], new.prototypes[0])
    ones = PrototypeBank([torch.ones(2, 3, dtype=torch.float64)], [np.zeros(2, bool)])
    zeros = PrototypeBank([torch.zeros(2, 3, dtype=torch.float64)], [np.zeros(2, bool)])
    np.testing.assert_allclose(ema_update(zeros, ones, 0.9).prototypes[0].numpy(), 0.1, atol=1e-15)


def test_ema_keeps_empty_classes():
    prev, new = _bank(0), _bank(1, empty=True)
    out = ema_update(prev, new, 0.5)
    assert torch.equal(out.prototypes[0][0], prev.prototypes[0][0])
    assert out.step == 1


def test_ema_shape_mismatch():
    bad = PrototypeBank([torch.zeros(2, 4, dtype=torch.float64)], [np.zeros(2, bool)])
    with pytest.raises(ValueError):
        ema_update(_bank(), bad)


def test_entropy_limits():
    z = [torch.randn(5, 3, dtype=torch.float64)]
    bank = PrototypeBank([torch.ones(4, 3, dtype=torch.float64)], [np.zeros(4, bool)])
    loss = filtered_entropy_loss(z, np.ones((5, 1), bool), bank, 0.1)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-9)
    bank = _bank()
    sharp = filtered_entropy_loss([bank.prototypes[0].clone()], np.ones((2, 1), bool), bank, 1e-4)
    assert sharp.item() < 1e-6
    assert filtered_entropy_loss(z, np.zeros((5, 1), bool), bank, 0.1).item() == 0.0


def test_entropy_against_oracle():
    rng = np.random.default_rng(4)
    z = [torch.tensor(rng.standard_normal((12, 4))) for _ in range(2)]
    protos = [torch.tensor(rng.standard_normal((3, 4))) for _ in range(2)]
    bank = PrototypeBank(protos, [np.zeros(3, bool)] * 2)
    filt = rng.random((12, 2)) < 0.6
    tau = 0.3
    terms = []
    for i in range(2):
        for v in np.flatnonzero(filt[:, i]):
            sims = [oracles.cosine(z[i][v].tolist(), c.tolist()) / tau for c in protos[i]]
            terms.append(oracles.entropy(oracles.softmax(sims)))
    got = filtered_entropy_loss(z, filt, bank, tau).item()
    assert got == pytest.approx(sum(terms) / len(terms), abs=1e-9)


def test_prototype_probabilities_zero_vector():
    p = prototype_probabilities(torch.zeros(1, 3, dtype=torch.float64), torch.eye(3, dtype=torch.float64), 0.5)
    np.testing.assert_allclose(p.numpy(), 1 / 3)


def test_config_validation():
    for kw in ({"threshold": 1.5}, {"momentum": -0.1}, {"temperature": 0.0}, {"steps": -1}):
        with pytest.raises(ValueError):
            AdaptationConfig(**kw)


@pytest.fixture(scope="module")
def pretrained():
    from taipan.synthetic import SyntheticSpec, generate_synthetic

    g = split_train_val_test(generate_synthetic(SyntheticSpec(node_count=300, seed=3)), seed=0)
    torch.manual_seed(0)
    m = TaipanModel(g.features.shape[1], g.sensitive_cardinalities, AttackHierarchy([[0, 1], [2]], np.eye(3)),
                    GnnEncoderConfig(hidden_dim=8, dropout=0.0))
    pretrain(m, tensors(g), g.features, g.sensitive, [1.0, 1.0, 1.0], g.train_mask, g.val_mask, TrainConfig(epochs=60))
    return m.eval(), g


def _adapt(model, g, **kw):
    gt = tensors(g)
    return adapt(model, gt, g.features, g.sensitive, g.train_mask, gt, g.features, [1.0] * 3, AdaptationConfig(**kw))


def test_zero_steps_identical(pretrained):
    m, g = pretrained
    res = _adapt(m, g, steps=0)
    assert archive_diff(parameter_archive(m), parameter_archive(res.model)) == []
    assert res.trajectory == []


def test_only_tokens_move(pretrained):
    m, g = pretrained
    before = parameter_archive(m)
    res = _adapt(m, g, steps=5, learning_rate=0.05)
    changed = archive_diff(before, parameter_archive(res.model))
    assert changed and all(k.startswith("token_") for k in changed)
    assert archive_diff(before, parameter_archive(m)) == []
    assert len(res.trajectory) == 5


def test_self_transfer_stays_close(pretrained):
    m, g = pretrained
    res = _adapt(m, g, steps=20)
    test = g.test_mask

    def aa(model):
        probs = [p.probs[test] for p in predict_with_confidence(model, tensors(g), g.features)]
        return confidence_metrics(probs, g.sensitive[test])["AA"]

    assert abs(aa(res.model) - aa(m)) <= 3


def test_frozen_prototypes_with_full_momentum(pretrained):
    m, g = pretrained
    res = _adapt(m, g, steps=4, momentum=1.0)
    assert all(r["prototype_drift"] == 0.0 for r in res.trajectory)


def test_nonfinite_loss_aborts(pretrained):
    m, g = pretrained
    gt = tensors(g)
    x = g.features.copy()
    x[0, 0] = np.nan
    res = adapt(m, gt, x, g.sensitive, g.train_mask, gt, g.features, [1.0] * 3, AdaptationConfig(steps=3))
    assert res.aborted and res.trajectory == []
    assert archive_diff(parameter_archive(m), parameter_archive(res.model)) == []


def test_prompt_loss_components(pretrained):
    m, g = pretrained
    gt = tensors(g)
    inp = _Inputs(gt, g.features, g.sensitive, g.train_mask, gt, g.features)
    ps = pseudo_labels_from_logits(m(gt, inp.xt).logits, 0.7)
    with torch.no_grad():
        out = m(gt, inp.xt)
    bank = init_prototypes([torch.cat([a, a]) for a in out.z_tasks], np.vstack([g.sensitive, ps.labels]),
                           np.vstack([np.ones_like(ps.retained), ps.retained]), m.cardinalities)
    parts = prompt_loss(m, inp, ps, bank, [1.0] * 3, 0.1)
    assert parts["prm"].item() == pytest.approx((parts["att"] + parts["pseudo"] + parts["fil"]).item())
