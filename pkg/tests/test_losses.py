import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpscl import losses as L
from mpscl import numerics as nx
from mpscl.models import Discriminator
from mpscl.numerics import Tensor
from mpscl.prototypes import PrototypeSet, ZeroNormError
from mpscl.pseudo_labels import LabelError, LabelMap


def onehot_probs(idx, num_classes):
    return np.eye(num_classes)[idx]


def random_labels(rng, shape, num_classes, unassigned=0.0):
    idx = rng.integers(0, num_classes, size=shape)
    if unassigned:
        idx[rng.random(shape) < unassigned] = -1
    return LabelMap.from_indices(idx, num_classes, pseudo=unassigned > 0)


# ----------------------------------------------------------- segmentation loss

def test_ce_perfect_prediction_is_zero():
    idx = np.random.default_rng(0).integers(0, 5, (6, 6))
    y = LabelMap.from_indices(idx, 5)
    assert L.weighted_cross_entropy(Tensor(onehot_probs(idx, 5)), y).item() <= 1e-6


def test_ce_uniform_prediction_is_log_l():
    idx = np.random.default_rng(1).integers(0, 5, (6, 6))
    y = LabelMap.from_indices(idx, 5)
    loss = L.weighted_cross_entropy(Tensor(np.full((6, 6, 5), 0.2)), y, weights=np.ones(5))
    assert loss.item() == pytest.approx(math.log(5), abs=1e-12)


def test_ce_weight_scale_invariance():
    rng = np.random.default_rng(2)
    p = nx.softmax(Tensor(rng.normal(size=(5, 5, 5))))
    y = random_labels(rng, (5, 5), 5)
    w = rng.uniform(0.5, 2, 5)
    a = L.weighted_cross_entropy(p, y, w).item()
    b = L.weighted_cross_entropy(p, y, 2 * w).item()
    assert a == pytest.approx(b, rel=1e-13)


def test_ce_rejects_unlabelled_pixels():
    idx = np.zeros((3, 3), dtype=int)
    idx[1, 1] = -1
    y = LabelMap.from_indices(idx, 5, pseudo=True)
    with pytest.raises(LabelError):
        L.weighted_cross_entropy(Tensor(np.full((3, 3, 5), 0.2)), y)


def test_class_weights_are_normalized_inverse_frequency():
    idx = np.array([[0, 0, 0, 1]])
    w = L.class_weights(LabelMap.from_indices(idx, 3))
    assert w.mean() == pytest.approx(1.0)
    # counts (3, 1, 0 -> floored at 1)
    raw = np.array([1 / 3, 1.0, 1.0])
    np.testing.assert_allclose(w, raw / raw.mean())


def test_dice_perfect_overlap():
    idx = np.random.default_rng(3).integers(0, 5, (8, 8))
    loss = L.soft_dice_loss(Tensor(onehot_probs(idx, 5)), LabelMap.from_indices(idx, 5))
    assert loss.item() <= 1e-5


def test_dice_disjoint_category_term():
    n = 16
    p = np.zeros((4, 4, 5))
    p[..., 0] = 1.0
    y = LabelMap.from_indices(np.ones((4, 4), dtype=int), 5)
    loss = L.soft_dice_loss(Tensor(p), y).item()
    eps = L.DICE_EPS
    # categories 2-4 are empty in both: term 0; category 0 and 1 have disjoint support
    expected = ((1 - eps / (n + eps)) + (1 - eps / (n + eps))) / 5
    assert loss == pytest.approx(expected, abs=1e-12)


def test_dice_empty_category_term_is_zero():
    idx = np.zeros((4, 4), dtype=int)
    loss = L.soft_dice_loss(Tensor(onehot_probs(idx, 3)), LabelMap.from_indices(idx, 3))
    assert loss.item() == 0.0


def test_segmentation_loss_is_sum_of_parts():
    rng = np.random.default_rng(4)
    p = nx.softmax(Tensor(rng.normal(size=(2, 4, 4, 5))))
    y = random_labels(rng, (2, 4, 4), 5)
    total = L.segmentation_loss(p, y).item()
    assert total == pytest.approx(L.weighted_cross_entropy(p, y).item() + L.soft_dice_loss(p, y).item(),
                                  rel=1e-14)


def test_batch_sums_per_image_losses():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 4, 4, 5))
    idx = rng.integers(0, 5, (3, 4, 4))
    w = L.class_weights(LabelMap.from_indices(idx, 5))  # weights are shared across the batch
    whole = L.segmentation_loss(nx.softmax(Tensor(logits)), LabelMap.from_indices(idx, 5), w).item()
    parts = sum(L.segmentation_loss(nx.softmax(Tensor(logits[i])), LabelMap.from_indices(idx[i], 5), w).item()
                for i in range(3))
    assert whole == pytest.approx(parts, rel=1e-13)


# ----------------------------------------------------------- self-information

def test_self_information_one_hot_is_zero():
    p = onehot_probs(np.random.default_rng(6).integers(0, 5, (4, 4)), 5)
    assert L.self_information_map(Tensor(p)).data.max() <= 1e-6


def test_self_information_uniform():
    out = L.self_information_map(Tensor(np.full((3, 3, 5), 0.2))).data
    np.testing.assert_allclose(out, 0.2 * math.log(5), rtol=1e-14)


def test_self_information_peak_at_inverse_e():
    grid = np.linspace(1e-4, 1, 20001)
    vals = L.self_information_map(Tensor(grid)).data
    assert grid[vals.argmax()] == pytest.approx(1 / math.e, abs=1e-4)
    assert vals.max() == pytest.approx(1 / math.e, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_self_information_bounds(ps):
    vals = L.self_information_map(Tensor(np.array(ps))).data
    assert np.all(vals >= 0) and np.all(vals <= 1 / math.e + 1e-12)


# --------------------------------------------------------- contrastive loss

def test_contrastive_uniform_similarity_is_log_l():
    d = 5
    protos = np.eye(d)
    feats = np.ones((3, 3, d))  # equal cosine with every prototype
    y = random_labels(np.random.default_rng(7), (3, 3), 5)
    loss = L.margin_contrastive_loss(feats, y, protos, m=0.0, tau=1.0, reduction="mean").item()
    assert loss == pytest.approx(math.log(5), abs=1e-9)


def test_contrastive_margined_positive_value():
    protos = np.eye(3)
    feats = np.array([[[1.0, 0.0, 0.0]]])
    y = LabelMap.from_indices(np.array([[0]]), 3)
    loss = L.margin_contrastive_loss(feats, y, protos, m=0.4, tau=1.0).item()
    assert math.cos(0.4) == pytest.approx(0.92106, abs=1e-5)
    theta = math.acos(1 - 1e-7)  # the arccos input clamp keeps theta just above 0
    pos = math.cos(theta + 0.4)
    expected = math.log(math.exp(pos) + 2 * math.exp(0.0)) - pos
    assert loss == pytest.approx(expected, abs=1e-12)


def test_contrastive_no_assigned_pixels():
    feats = Tensor(np.random.default_rng(8).normal(size=(2, 2, 4)), requires_grad=True)
    y = LabelMap.from_indices(-np.ones((2, 2), dtype=int), 3, pseudo=True)
    loss = L.margin_contrastive_loss(feats, y, np.eye(3, 4))
    assert loss.item() == 0.0
    loss.backward()
    assert feats.grad is None or not feats.grad.any()


def test_contrastive_zero_norm_feature_names_pixel():
    feats = np.ones((2, 2, 3))
    feats[1, 0] = 0.0
    y = LabelMap.from_indices(np.zeros((2, 2), dtype=int), 3)
    with pytest.raises(ZeroNormError, match="pixel 2"):
        L.margin_contrastive_loss(feats, y, np.eye(3))


def test_contrastive_rejects_nonpositive_tau():
    y = LabelMap.from_indices(np.zeros((1, 1), dtype=int), 3)
    with pytest.raises(ValueError):
        L.margin_contrastive_loss(np.ones((1, 1, 3)), y, np.eye(3), tau=0.0)


def softmax_ce_oracle(feats, idx, protos, tau):
    """Independent plain-numpy softmax cross-entropy over prototype cosines."""
    f = feats.reshape(-1, feats.shape[-1])
    keep = idx.reshape(-1) >= 0
    f, lab = f[keep], idx.reshape(-1)[keep]
    fn = f / np.linalg.norm(f, axis=1, keepdims=True)
    cn = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    z = fn @ cn.T / tau
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(lab)), lab].sum()


def test_zero_margin_equals_softmax_ce():
    rng = np.random.default_rng(9)
    for _ in range(50):
        feats = rng.normal(size=(4, 4, 8))
        protos = rng.normal(size=(5, 8))
        idx = rng.integers(-1, 5, (4, 4))
        tau = rng.uniform(0.2, 2.0)
        y = LabelMap.from_indices(idx, 5, pseudo=True)
        ours = L.margin_contrastive_loss(feats, y, protos, m=0.0, tau=tau).item()
        assert ours == pytest.approx(softmax_ce_oracle(feats, idx, protos, tau), rel=1e-6)


def test_contrastive_monotone_in_margin():
    rng = np.random.default_rng(10)
    for _ in range(30):
        feats = rng.normal(size=(3, 3, 6))
        protos = rng.normal(size=(4, 6))
        y = random_labels(rng, (3, 3), 4)
        prev = -np.inf
        for m in np.linspace(0, 0.8, 9):
            val = L.margin_contrastive_loss(feats, y, protos, m=m).item()
            assert val >= prev - 1e-12
            prev = val


def test_image_mean_reduction():
    rng = np.random.default_rng(11)
    feats = rng.normal(size=(2, 3, 3, 4))
    protos = rng.normal(size=(3, 4))
    idx = rng.integers(-1, 3, (2, 3, 3))
    y = LabelMap.from_indices(idx, 3, pseudo=True)
    got = L.margin_contrastive_loss(feats, y, protos, reduction="image_mean").item()
    want = sum(L.margin_contrastive_loss(feats[i], LabelMap.from_indices(idx[i], 3, True), protos,
                                         reduction="mean").item() for i in range(2))
    assert got == pytest.approx(want, rel=1e-13)


# ----------------------------------------------------------------- adversarial

def test_bce_half_is_ln2():
    p = Tensor(np.full((2, 4, 4, 1), 0.5))
    assert L.bce_domain_loss(p, True).item() == pytest.approx(math.log(2))
    assert L.bce_domain_loss(p, False).item() == pytest.approx(math.log(2))


def test_bce_perfect_and_saturated():
    assert L.bce_domain_loss(Tensor(np.ones(4)), True).item() <= 1e-6
    assert L.bce_domain_loss(Tensor(np.zeros(4)), False).item() <= 1e-6
    assert L.bce_domain_loss(Tensor(np.zeros(4)), True).item() == pytest.approx(-math.log(1e-7))


def test_zero_discriminator_gives_ln2_losses():
    disc = Discriminator(5, zero_init=True)
    info = Tensor(np.random.default_rng(12).uniform(0, 0.3, (2, 8, 8, 5)))
    assert L.generator_adversarial_loss(info, disc).item() == pytest.approx(math.log(2))
    assert L.discriminator_loss(info, info, disc).item() == pytest.approx(2 * math.log(2))


def test_generator_adversarial_loss_leaves_discriminator_untouched():
    disc = Discriminator(5, seed=1)
    info = Tensor(np.random.default_rng(13).uniform(0, 0.3, (1, 8, 8, 5)), requires_grad=True)
    L.generator_adversarial_loss(info, disc).backward()
    assert info.grad is not None and np.abs(info.grad).sum() > 0
    assert all(p.grad is None for p in disc.parameters())
    assert all(p.requires_grad for p in disc.parameters())


def test_total_loss_weights():
    one = Tensor(np.array(1.0))
    assert L.total_generator_loss(one, one, one, one).item() == pytest.approx(2.103)
    seg = Tensor(np.array(0.7))
    assert L.total_generator_loss(seg, one, one, one, 0, 0, 0).item() == 0.7
    a = L.total_generator_loss(seg, adv=one, gamma=0, beta=0, lam=0.5).item()
    b = L.total_generator_loss(seg, adv=one, gamma=0, beta=0, lam=1.0).item()
    assert (b - 0.7) == pytest.approx(2 * (a - 0.7))
