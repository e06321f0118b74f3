import math

import numpy as np
import pytest
import torch

from advnorm.exceptions import DivergenceError, ValidationError
from advnorm.losses import (
    Batch,
    LossConfig,
    combine_d,
    combine_gs,
    dice_loss,
    dis_loss_fake,
    dis_loss_fake_complement,
    dis_loss_fake_logits,
    dis_loss_real,
    dis_loss_real_logits,
    inverse_frequency_weights,
    objective_d,
    objective_gs,
)
from gradcheck import sampled_gradient_errors

T = lambda *v: torch.tensor(v, dtype=torch.float64)


# ---------------------------------------------------------------- Dice

def test_dice_perfect_overlap_is_zero():
    rng = np.random.default_rng(0)
    labels = torch.as_tensor(rng.integers(0, 3, size=(2, 4, 4, 4)))
    s = torch.movedim(torch.nn.functional.one_hot(labels, 3), -1, 1).double()
    for eps in (1e-8, 1.0, 5.0):
        assert dice_loss(s, labels, epsilon=eps).tolist() == [0.0, 0.0]


def test_dice_disjoint_single_voxel():
    s = T(1.0, 0.0).reshape(1, 2, 1)
    y = T(0.0, 1.0).reshape(1, 2, 1)
    assert dice_loss(s, y, T(1, 1), epsilon=1e-12).item() == pytest.approx(1.0, abs=1e-9)


def test_dice_direct_arithmetic():
    s = T(0.7, 0.3).reshape(1, 2, 1)
    y = T(1.0, 0.0).reshape(1, 2, 1)
    # numerator 2 * 0.7 = 1.4, denominator (0.7 + 1) + (0.3 + 0) = 2.0
    assert abs(dice_loss(s, y, T(1, 1), epsilon=0.0).item() - 0.3) < 1e-9


def test_dice_against_numpy_oracle():
    rng = np.random.default_rng(1)
    s = rng.dirichlet(np.ones(4), size=(3, 5, 5, 5))
    s = np.moveaxis(s, -1, 1)
    y = rng.integers(0, 4, size=(3, 5, 5, 5))
    w = rng.random(4)
    eps = 1e-3
    onehot = np.moveaxis(np.eye(4)[y], -1, 1)
    expected = []
    for n in range(3):
        num = eps + 2 * sum(w[c] * (s[n, c] * onehot[n, c]).sum() for c in range(4))
        den = eps + sum(w[c] * (s[n, c] + onehot[n, c]).sum() for c in range(4))
        expected.append(1 - num / den)
    got = dice_loss(torch.as_tensor(s), torch.as_tensor(y), w, epsilon=eps).numpy()
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
    # one-hot targets and integer labels agree
    np.testing.assert_allclose(dice_loss(torch.as_tensor(s), torch.as_tensor(onehot), w, eps).numpy(), got)


def test_dice_bounds():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s = torch.as_tensor(np.moveaxis(rng.dirichlet(np.ones(3), size=(2, 3, 3, 3)), -1, 1))
        y = torch.as_tensor(rng.integers(0, 3, size=(2, 3, 3, 3)))
        d = dice_loss(s, y, rng.random(3) + 0.01)
        assert ((d >= 0) & (d <= 1)).all()


def test_dice_shape_errors():
    with pytest.raises(ValidationError):
        dice_loss(torch.zeros(1, 2, 3), torch.zeros(1, 4, dtype=torch.long))
    with pytest.raises(ValidationError):
        dice_loss(torch.zeros(1, 2, 3), torch.zeros(1, 3, dtype=torch.long), weights=[1, 1, 1])


# ---------------------------------------------------------------- discriminator losses

def test_dis_loss_real_examples():
    assert dis_loss_real(T(0.0, 1.0, 0.0), [2]).item() == 0.0
    assert abs(dis_loss_real(T(0.5, 0.25, 0.25), [1]).item() - math.log(2)) < 1e-9
    assert abs(dis_loss_real(T(1 / 3, 1 / 3, 1 / 3), [2]).item() - math.log(3)) < 1e-9
    assert abs(dis_loss_real(T(1 / 3, 1 / 3, 1 / 3), [2]).item() - 1.0986122886681098) < 1e-9


def test_dis_loss_fake_examples():
    assert dis_loss_fake(T(0.0, 0.0, 1.0)).item() == 0.0
    assert abs(dis_loss_fake(T(0.25, 0.25, 0.5)).item() - 0.6931471805599453) < 1e-9


def test_fake_loss_forms_agree():
    rng = np.random.default_rng(3)
    for k in (1, 2, 5):
        p = torch.as_tensor(rng.dirichlet(np.ones(k + 1), size=1000))
        diff = (dis_loss_fake(p) - dis_loss_fake_complement(p)).abs().max().item()
        assert diff < 1e-9


def test_real_loss_label_range():
    with pytest.raises(ValidationError):
        dis_loss_real(T(0.5, 0.25, 0.25), [3])
    with pytest.raises(ValidationError):
        dis_loss_real(T(0.5, 0.25, 0.25), [0])
    with pytest.raises(ValidationError):
        dis_loss_real_logits(torch.zeros(1, 3), [3])


def test_probability_floor_keeps_losses_finite():
    assert math.isfinite(dis_loss_real(T(0.0, 1.0, 0.0), [1]).item())
    assert dis_loss_fake(T(1.0, 0.0, 0.0)).item() == pytest.approx(-math.log(1e-12))


def test_logit_forms_match_probability_forms():
    logits = torch.randn(20, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    p = torch.softmax(logits, 1)
    z = torch.arange(20) % 3 + 1
    torch.testing.assert_close(dis_loss_real_logits(logits, z), dis_loss_real(p, z), rtol=0, atol=1e-12)
    torch.testing.assert_close(dis_loss_fake_logits(logits), dis_loss_fake(p), rtol=0, atol=1e-12)


# ---------------------------------------------------------------- objectives

def test_combine_examples():
    assert combine_gs(T(0.3, 0.5), T(0.6931, 0.6931), 1.0).item() == pytest.approx(-0.5862, abs=1e-12)
    assert combine_gs(T(0.0, 0.0), T(0.0, 0.0), 1.0).item() == 0.0
    assert combine_gs(T(0.3, 0.5), T(0.6931, 0.6931), 0.0).item() == pytest.approx(0.8, abs=1e-12)
    # uniform D over K=2 real classes + 1 generated: per-sample 2 * ln 3
    u = torch.full((1, 3), 1 / 3, dtype=torch.float64)
    assert combine_d(dis_loss_real(u, [1]), dis_loss_fake(u)).item() == pytest.approx(2 * math.log(3), abs=1e-9)
    assert 2 * math.log(3) == pytest.approx(2.1972, abs=1e-4)
    half = T(0.5, 0.25, 0.25)
    fake = T(0.25, 0.25, 0.5)
    assert combine_d(dis_loss_real(half, [1]), dis_loss_fake(fake)).item() == pytest.approx(1.3863, abs=1e-4)
    onehot_real = T(1.0, 0.0, 0.0)
    onehot_fake = T(0.0, 0.0, 1.0)
    assert combine_d(dis_loss_real(onehot_real, [1]), dis_loss_fake(onehot_fake)).item() == 0.0


class _ConstD(torch.nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.row = torch.as_tensor(logits, dtype=torch.float64)

    def logits(self, x):
        return self.row.expand(x.shape[0], -1)


class _Seg(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = torch.nn.Conv3d(1, 3, 1).double()

    def forward(self, x):
        return torch.softmax(self.conv(x), 1)


def _batch(n=2, p=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return Batch(torch.randn(n, 1, p, p, p, dtype=torch.float64, generator=g),
                 torch.randint(0, 3, (n, p, p, p), generator=g), torch.arange(n) % 2 + 1)


def test_objective_gs_zero_weight_is_dice():
    torch.manual_seed(0)
    seg, batch = _Seg(), _batch()
    w = torch.ones(3, dtype=torch.float64)
    gs = objective_gs(batch, torch.nn.Identity(), seg, _ConstD([0.0, 0.0, 0.0]), w, adv_weight=0.0)
    assert gs.item() == dice_loss(seg(batch.x), batch.y, w).sum().item()


def test_objective_gs_subtracts_weighted_fake_loss():
    torch.manual_seed(0)
    seg, batch = _Seg(), _batch()
    w = torch.ones(3, dtype=torch.float64)
    dice = dice_loss(seg(batch.x), batch.y, w).sum().item()
    gs = objective_gs(batch, None, seg, _ConstD([0.0, 0.0, 0.0]), w, adv_weight=0.5)
    assert gs.item() == pytest.approx(dice - 0.5 * 2 * math.log(3), abs=1e-12)


def test_objective_d_uniform_discriminator():
    batch = _batch(n=3)
    value = objective_d(batch, torch.nn.Identity(), _ConstD([0.0, 0.0, 0.0]))
    assert value.item() == pytest.approx(3 * 2 * math.log(3), abs=1e-12)


def test_objective_d_does_not_reach_generator():
    gen = torch.nn.Conv3d(1, 1, 1).double()
    d = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(64, 3)).double()
    d.logits = d.forward
    objective_d(_batch(), gen, d).backward()
    assert gen.weight.grad is None


def test_non_finite_objective_raises():
    batch = _batch()
    with pytest.raises(DivergenceError):
        objective_d(batch, torch.nn.Identity(), _ConstD([float("nan"), 0.0, 0.0]))


# ---------------------------------------------------------------- class weights

def test_inverse_frequency_weights():
    masks = np.array([0] * 6 + [1] * 3 + [2] * 1)
    w = inverse_frequency_weights(masks, 4)
    raw = np.array([10 / 6, 10 / 3, 10 / 1, 0.0])
    np.testing.assert_allclose(w, raw / raw.sum())
    w = inverse_frequency_weights(masks, 4, include_background=False)
    assert w[0] == 0 and w.sum() == pytest.approx(1)
    assert LossConfig(class_weights="uniform").resolve_weights(masks, 4).tolist() == [0.25] * 4
    with pytest.raises(ValidationError):
        LossConfig(class_weights=[1, 2]).resolve_weights(masks, 4)
    with pytest.raises(ValidationError):
        LossConfig(adv_weight=-1)


# ---------------------------------------------------------------- gradients

def test_dice_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    s = torch.tensor(rng.uniform(0.05, 0.95, size=(2, 3, 4, 4, 4)), requires_grad=True)
    y = torch.as_tensor(rng.integers(0, 3, size=(2, 4, 4, 4)))
    w = torch.as_tensor(rng.random(3) + 0.1)
    err = sampled_gradient_errors(lambda: dice_loss(s, y, w, 1e-3).sum(), [s], n_samples=30, step=1e-5)
    assert err.max() < 1e-5


def test_discriminator_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    p = torch.tensor(rng.dirichlet(np.ones(3), size=10), requires_grad=True)
    z = torch.as_tensor(rng.integers(1, 3, size=10))
    for fn in (lambda: dis_loss_real(p, z).sum(), lambda: dis_loss_fake(p).sum()):
        err = sampled_gradient_errors(fn, [p], n_samples=30, step=1e-5)
        assert err.max() < 1e-5
