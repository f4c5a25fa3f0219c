import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from sasa import losses as L
from sasa.losses import LossConfig, LossParts, PairedFeatures, Stage
from sasa.nets import ArchConfig, Discriminator


def pairs(a, b, positive, kind=L.SOURCE_TARGET):
    a = torch.tensor(a, dtype=torch.float64)
    b = torch.tensor(b, dtype=torch.float64)
    n = a.shape[0]
    return PairedFeatures(a, b, (kind,) * n, torch.full((n,), positive))


def central_diff(fn, x, h=1e-3):
    """Gradient of scalar ``fn`` at ``x`` by central differences, coordinate-wise."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def autograd(fn, x):
    t = torch.tensor(x, requires_grad=True)
    fn(t).backward()
    return t.grad.numpy()


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


# -- semantic alignment ---------------------------------------------------------

def test_sem_identical_features_is_zero():
    assert float(L.semantic_alignment_loss(pairs([[1.0, 2.0]], [[1.0, 2.0]], True))) == 0.0


def test_sem_single_pair():
    assert float(L.semantic_alignment_loss(pairs([[1.0, 0.0]], [[0.0, 1.0]], True))) == pytest.approx(1.0, abs=1e-6)


def test_sem_two_pairs():
    # squared distances 2 and 8
    p = pairs([[1.0, 1.0], [2.0, 2.0]], [[0.0, 0.0], [0.0, 0.0]], True)
    assert float(L.semantic_alignment_loss(p)) == pytest.approx(5.0, abs=1e-6)


def test_sem_rejects_negative_pair():
    with pytest.raises(ValueError):
        L.semantic_alignment_loss(pairs([[0.0]], [[1.0]], False))


# -- separation -------------------------------------------------------------------

def test_sep_saturates_beyond_margin():
    p = pairs([[0.0, 0.0]], [[1.0, 1.0]], False)  # d^2 = 2
    assert float(L.separation_loss(p, 1.0)) == 0.0


def test_sep_hinge_value():
    p = pairs([[0.0]], [[math.sqrt(0.5)]], False)
    assert float(L.separation_loss(p, 1.0)) == pytest.approx(0.25, abs=1e-6)


def test_sep_identical_features_give_half_per_pair():
    p = pairs([[0.3, 0.1]] * 3, [[0.3, 0.1]] * 3, False)
    assert float(L.separation_loss(p, 1.0)) == pytest.approx(1.5, abs=1e-6)


def test_sep_rejects_positive_pair():
    with pytest.raises(ValueError):
        L.separation_loss(pairs([[0.0]], [[1.0]], True), 1.0)


# -- contrastive ---------------------------------------------------------------------

def test_contrastive_empty_is_zero():
    e = PairedFeatures.empty(4, torch.float64)
    assert float(L.contrastive_loss(e, e, 1.0)) == 0.0


def test_contrastive_sum_of_parts():
    pos = pairs([[1.0, 0.0]], [[0.0, 1.0]], True)
    neg = pairs([[0.0, 0.0]], [[math.sqrt(0.5), 0.0]], False)
    assert float(L.contrastive_loss(pos, neg, 1.0)) == pytest.approx(1.25, abs=1e-6)


def test_contrastive_doubling_pairs_doubles_value():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 3)) * 0.3, rng.normal(size=(5, 3)) * 0.3
    pos, neg = pairs(a, b, True), pairs(b, a[::-1].copy(), False)
    pos2 = pairs(np.concatenate([a, a]), np.concatenate([b, b]), True)
    neg2 = pairs(np.concatenate([b, b]), np.concatenate([a[::-1], a[::-1]]), False)
    assert float(L.contrastive_loss(pos2, neg2, 1.0)) == pytest.approx(2 * float(L.contrastive_loss(pos, neg, 1.0)),
                                                                         abs=1e-9)


def test_pair_structure_rejects_same_domain_and_source_aux():
    z = torch.zeros(1, 2)
    for kind in ("source-source", "target-target", "aux-aux", "source-aux"):
        with pytest.raises(ValueError):
            PairedFeatures(z, z, (kind,), torch.tensor([True]))


def test_build_pairs_exhaustive_cross_domain():
    labels = torch.tensor([1, 0, 1, 1, 0, 1, 0, 0])
    slots = torch.tensor([0, 0, 0, 1, 1, 2, 2, 2])  # 3 source, 2 target, 3 aux
    f = torch.arange(16, dtype=torch.float64).reshape(8, 2)
    pos, neg = L.build_pairs(f, labels, slots)
    assert len(pos) + len(neg) == 3 * 2 + 2 * 3
    assert bool(pos.positive.all()) and not bool(neg.positive.any())
    assert set(pos.kinds) | set(neg.kinds) <= set(L.PAIR_KINDS)
    # brute-force count of label-equal cross pairs
    expect_pos = sum(labels[i] == labels[j] for i in range(3) for j in (3, 4)) + \
        sum(labels[i] == labels[j] for i in (3, 4) for j in (5, 6, 7))
    assert len(pos) == int(expect_pos)


# -- adversarial ------------------------------------------------------------------------

class UniformD(torch.nn.Module):
    def forward(self, f):
        return torch.zeros(f.shape[0], 2, dtype=f.dtype) + 0.0 * f.sum(dim=1, keepdim=True)


class SeparatingD(torch.nn.Module):
    """Logit gap of 20 in favour of the sign of the first coordinate."""

    def forward(self, f):
        s = torch.sign(f[:, :1])
        return torch.cat([-10 * s, 10 * s], dim=1)


def test_adv_uniform_discriminator_gives_ln2():
    f = torch.randn(6, 4)
    loss_d, loss_g = L.domain_adversarial_loss(f, torch.tensor([0, 0, 0, 1, 1, 1]), UniformD())
    assert float(loss_d) == pytest.approx(math.log(2), abs=1e-6)
    assert float(loss_g) == pytest.approx(math.log(2), abs=1e-6)


def test_adv_perfect_discriminator_near_zero():
    f = torch.tensor([[-1.0, 0.0], [-2.0, 1.0], [1.0, 0.0], [3.0, 2.0]])
    loss_d, _ = L.domain_adversarial_loss(f, torch.tensor([0, 0, 1, 1]), SeparatingD())
    assert float(loss_d) < 1e-3


def test_adv_single_domain_rejected():
    with pytest.raises(ValueError):
        L.domain_adversarial_loss(torch.randn(3, 4), torch.tensor([1, 1, 1]), UniformD())


@pytest.mark.parametrize("probe", range(10))
def test_gradient_reversal_identity(probe):
    torch.manual_seed(probe)
    D = Discriminator(ArchConfig(feat_dim=4, disc_hidden=8)).double()
    y = torch.tensor([0, 1, 0, 1, 1, 0])
    f1 = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    f2 = f1.detach().clone().requires_grad_(True)
    import torch.nn.functional as F
    F.cross_entropy(D(f1), y).backward()
    _, loss_g = L.domain_adversarial_loss(f2, y, D)
    loss_g.backward()
    assert torch.allclose(f2.grad, -f1.grad, rtol=0, atol=1e-8)


def test_progressive_ta_leaves_cs_untouched():
    torch.manual_seed(0)
    D_ta = Discriminator(ArchConfig(feat_dim=4, disc_hidden=8)).double()
    D_cs = Discriminator(ArchConfig(feat_dim=4, disc_hidden=8)).double()
    ft, fa, fs = (torch.randn(n, 4, dtype=torch.float64) for n in (2, 4, 32))
    terms = L.progressive_adv_loss(Stage.TA, ft, fa, fs, D_ta, D_cs)
    assert float(terms.cs[0]) == 0.0 and float(terms.cs[1]) == 0.0
    (terms.loss_D + terms.loss_G).backward()
    assert all(p.grad is None or float(p.grad.norm()) == 0.0 for p in D_cs.parameters())
    assert any(p.grad is not None and float(p.grad.norm()) > 0 for p in D_ta.parameters())


def test_progressive_cs_combines_target_and_aux():
    seen = {}

    class Spy(UniformD):
        def forward(self, f):
            seen["n"] = f.shape[0]
            return super().forward(f)

    ft, fa, fs = torch.randn(2, 4), torch.randn(4, 4), torch.randn(10, 4)
    terms = L.progressive_adv_loss(Stage.CS, ft, fa, fs, UniformD(), Spy(), feats_c=torch.cat([ft, fa]))
    assert seen["n"] == 6 + 10
    assert float(terms.ta[0]) == 0.0
    assert float(terms.loss_G) == pytest.approx(math.log(2), abs=1e-6)


def test_progressive_rejects_bad_stage():
    with pytest.raises(ValueError):
        L.progressive_adv_loss("XX", torch.randn(1, 2), torch.randn(1, 2), torch.randn(1, 2), UniformD(), UniformD())


# -- less forgetting, classification, total ---------------------------------------------

def test_lfc_values():
    z = torch.zeros(1, 2)
    assert float(L.less_forgetting_loss(z, z)) == 0.0
    assert float(L.less_forgetting_loss(torch.ones(1, 2), z)) == pytest.approx(2.0, abs=1e-6)
    g = torch.tensor([[1.0, 1.0], [0.5, 0.0]])
    assert float(L.less_forgetting_loss(g, torch.zeros(2, 2))) == pytest.approx(2.25, abs=1e-6)


def test_lfc_shape_mismatch():
    with pytest.raises(ValueError):
        L.less_forgetting_loss(torch.zeros(2, 3), torch.zeros(3, 3))


def test_cls_values():
    assert float(L.classification_loss(torch.zeros(4, 2), torch.tensor([0, 1, 1, 0]))) == \
        pytest.approx(math.log(2), abs=1e-6)
    assert float(L.classification_loss(torch.tensor([[0.0, 20.0]]), torch.tensor([1]))) < 1e-6
    logits, y = torch.randn(5, 2), torch.tensor([0, 1, 1, 0, 1])
    per = [float(L.classification_loss(logits[i:i + 1], y[i:i + 1])) for i in range(5)]
    assert float(L.classification_loss(logits, y)) == pytest.approx(np.mean(per), abs=1e-6)


def test_total_loss_with_default_weights():
    cfg = LossConfig(1e-3, 1.0, 10.0)
    assert L.total_loss(LossParts(1.0, 1.0, 1.0, 1.0), cfg) == pytest.approx(12.001, abs=1e-6)


def test_total_loss_zero_weights_is_cls():
    assert L.total_loss(LossParts(0.7, 3.0, 5.0, 9.0), LossConfig(0.0, 0.0, 0.0)) == 0.7


@given(st.tuples(*[st.floats(0, 100)] * 4), st.tuples(*[st.floats(0, 100)] * 3), st.floats(0, 100))
def test_total_loss_linear_in_lambdas(parts, lams, bump):
    p = LossParts(*parts)
    base = L.total_loss(p, LossConfig(*lams))
    for i, part in enumerate(parts[1:]):
        l2 = list(lams)
        l2[i] += bump
        assert L.total_loss(p, LossConfig(*l2)) == pytest.approx(base + bump * part, rel=1e-9, abs=1e-9)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(margin=0.0).validate()
    with pytest.raises(ValueError):
        LossConfig(lambda1=float("nan")).validate()


# -- finite-difference gradients --------------------------------------------------------

PROBES = range(10)


@pytest.mark.parametrize("probe", PROBES)
def test_fd_semantic(probe):
    rng = np.random.default_rng(probe)
    x = rng.normal(size=(2, 4, 4))
    fn = lambda t: L.semantic_alignment_loss(PairedFeatures(torch.as_tensor(t[0]), torch.as_tensor(t[1]),
                                                            (L.TARGET_AUX,) * 4, torch.ones(4, dtype=torch.bool)))
    assert rel_err(autograd(fn, x), central_diff(lambda v: fn(v).item(), x)) < 1e-4


@pytest.mark.parametrize("probe", PROBES)
def test_fd_separation_away_from_kink(probe):
    rng = np.random.default_rng(100 + probe)
    m = 4.0
    while True:
        x = rng.normal(size=(2, 4, 4)) * 0.6
        d2 = ((x[0] - x[1]) ** 2).sum(axis=1)
        if np.all(np.abs(m - d2) > 0.1):
            break
    fn = lambda t: L.separation_loss(PairedFeatures(torch.as_tensor(t[0]), torch.as_tensor(t[1]),
                                                    (L.SOURCE_TARGET,) * 4, torch.zeros(4, dtype=torch.bool)), m)
    assert rel_err(autograd(fn, x), central_diff(lambda v: fn(v).item(), x)) < 1e-4


@pytest.mark.parametrize("probe", PROBES)
def test_fd_less_forgetting(probe):
    rng = np.random.default_rng(200 + probe)
    x, t0 = rng.normal(size=(4, 4)), torch.as_tensor(rng.normal(size=(4, 4)))
    fn = lambda t: L.less_forgetting_loss(torch.as_tensor(t), t0)
    assert rel_err(autograd(fn, x), central_diff(lambda v: fn(v).item(), x)) < 1e-4


@pytest.mark.parametrize("probe", PROBES)
def test_fd_classification(probe):
    rng = np.random.default_rng(300 + probe)
    x, y = rng.normal(size=(4, 2)), torch.as_tensor(rng.integers(0, 2, size=4))
    fn = lambda t: L.classification_loss(torch.as_tensor(t), y)
    assert rel_err(autograd(fn, x), central_diff(lambda v: fn(v).item(), x)) < 1e-4


@pytest.mark.parametrize("probe", PROBES)
def test_fd_discriminator_ce(probe):
    torch.manual_seed(probe)
    D = Discriminator(ArchConfig(feat_dim=4, disc_hidden=8, disc_activation="tanh")).double()
    rng = np.random.default_rng(400 + probe)
    x, y = rng.normal(size=(4, 4)), torch.tensor([0, 1, 1, 0])
    fn = lambda t: L.domain_adversarial_loss(torch.as_tensor(t), y, D)[0]
    fd = central_diff(lambda v: fn(v).item(), x)
    g_auto = autograd(lambda t: torch.nn.functional.cross_entropy(D(t), y), x)
    assert rel_err(g_auto, fd) < 1e-4
    # the generator side sees exactly the negated discriminator gradient
    g_rev = autograd(lambda t: L.domain_adversarial_loss(t, y, D)[1], x)
    assert rel_err(g_rev, -fd) < 1e-4
