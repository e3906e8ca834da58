import itertools

import numpy as np
import pytest
import torch

from deepcasa import objectives as ob
from deepcasa.errors import ParameterError
from deepcasa.dsp import StftConfig, istft, stft
from deepcasa.seq import (TCN, TcnConfig, build_input_stack, dc_loss, drop_dilation_masks,
                          joint_loss, kmeans, kmeans_labels, ld_weights, organize_outputs,
                          receptive_field, weighted_dc_loss)
from deepcasa.simul import DenseUNet, DenseUNetConfig, estimate

f64 = torch.float64
MICRO = TcnConfig.preset("micro")


def crandn(gen, *shape):
    return torch.complex(torch.randn(*shape, generator=gen, dtype=f64),
                         torch.randn(*shape, generator=gen, dtype=f64))


def test_input_stack_planes(gen):
    Y = crandn(gen, 6, 5)
    est = crandn(gen, 2, 6, 5)
    s = build_input_stack(Y, est)
    assert s.shape == (6, 5, 9)
    assert torch.equal(s[..., 2], Y.abs()) and torch.equal(s[..., 8], est[1].abs())
    assert torch.equal(build_input_stack(Y, est.flip(0))[..., 3:], torch.cat([s[..., 6:], s[..., 3:6]], -1))
    assert torch.count_nonzero(build_input_stack(Y, torch.zeros_like(est))[..., 3:]) == 0
    with pytest.raises(Exception, match="align"):
        build_input_stack(Y, est[:, :4])


def test_tcn_unit_rows_and_shape(gen):
    tcn = TCN(MICRO).double().eval()
    v = tcn(build_input_stack(crandn(gen, 3, 12, 5), crandn(gen, 3, 2, 12, 5)))
    assert v.shape == (3, 12, MICRO.d)
    assert torch.allclose(v.norm(dim=-1), torch.ones(3, 12, dtype=f64))


def test_tcn_zero_input_identical_rows():
    tcn = TCN(MICRO).double().eval()
    with torch.no_grad():
        for name, p in tcn.named_parameters():
            if name.endswith("bias") and not name.startswith("embed"):
                p.zero_()
        tcn.embed.bias.normal_()
    v = tcn(torch.zeros(10, 5, 9, dtype=f64))
    assert torch.allclose(v, v[:1].expand_as(v), atol=1e-12)


def test_receptive_field_formula_and_impulse():
    assert receptive_field(TcnConfig()) == 763
    cfg = TcnConfig.preset("micro", m=3, repeats=2)
    assert receptive_field(cfg) == 29
    torch.manual_seed(0)
    tcn = TCN(cfg).double().eval()
    # measure the reach of the dilated stacks alone with an impulse
    x = torch.zeros(80, cfg.b, dtype=f64, requires_grad=True)
    z = x
    for blk in tcn.blocks:
        z = blk(z)
    z[40].sum().backward()
    reach = torch.nonzero(x.grad.abs().sum(1)).flatten()
    assert reach.max() - reach.min() + 1 == receptive_field(cfg)


def test_drop_masks_properties(gen):
    cfg = TcnConfig.preset("micro")
    ones = drop_dilation_masks(cfg, gen, p=1.0)
    assert torch.equal(ones, torch.ones_like(ones))
    draws = torch.stack([drop_dilation_masks(cfg, gen, p=0.7) for _ in range(5000)])
    assert torch.all(draws[..., 1] == 1)
    kept = (draws[..., [0, 2]] > 0).double().mean().item()
    assert abs(kept - 0.7) < 0.02
    assert torch.allclose(draws[..., [0, 2]][draws[..., [0, 2]] > 0], torch.tensor(1 / 0.7, dtype=f64))
    with pytest.raises(ParameterError):
        drop_dilation_masks(cfg, gen, p=0.0)


def test_p1_masks_match_no_drop(gen):
    tcn = TCN(MICRO).double().train()
    x = build_input_stack(crandn(gen, 8, 5), crandn(gen, 2, 8, 5))
    a = tcn(x, drop_dilation_masks(MICRO, gen, p=1.0))
    b = tcn(x)
    assert torch.equal(a, b)


def test_ld_weights_examples(gen):
    w = ld_weights(torch.tensor([[1.0, 3.0], [2.0, 2.0]]))
    assert torch.equal(w, torch.tensor([1.0, 0.0]))
    assert torch.equal(ld_weights(torch.full((4, 2), 3.0)), torch.full((4,), 0.25))
    w = ld_weights(torch.rand(3, 17, 2, generator=gen))
    assert torch.allclose(w.sum(-1), torch.ones(3))


def _direct_dc(V, A, w=None):
    w = torch.ones(V.shape[0], dtype=V.dtype) if w is None else w
    s = w.sqrt()
    M = s[:, None] * (V @ V.T - A @ A.T) * s[None, :]
    return (M ** 2).sum()


def _labels(gen, t):
    return torch.eye(2, dtype=f64)[torch.randint(0, 2, (t,), generator=gen)]


def test_dc_loss_examples(gen):
    V = torch.tensor([[0.6, 0.8], [-0.8, 0.6]], dtype=f64)
    assert dc_loss(V, torch.eye(2, dtype=f64)).abs() < 1e-12
    V, A = torch.randn(20, 5, generator=gen, dtype=f64), _labels(gen, 20)
    assert torch.isclose(dc_loss(V, A), dc_loss(V, A.flip(1)))
    assert abs(dc_loss(V, A) - _direct_dc(V, A)) < 1e-8


def test_weighted_dc_examples(gen):
    V, A = torch.randn(20, 5, generator=gen, dtype=f64), _labels(gen, 20)
    assert abs(weighted_dc_loss(V, A, torch.ones(20, dtype=f64)) - dc_loss(V, A)) < 1e-10
    w = torch.rand(20, generator=gen, dtype=f64)
    assert abs(weighted_dc_loss(V, A, w) - _direct_dc(V, A, w)) < 1e-8
    w[3] = 0.0
    V2 = V.clone()
    V2[3] = torch.randn(5, generator=gen, dtype=f64)
    assert abs(weighted_dc_loss(V, A, w) - weighted_dc_loss(V2, A, w)) < 1e-12
    with pytest.raises(ParameterError):
        weighted_dc_loss(V, A, -w)


def test_kmeans_antipodal_groups(rng):
    d = rng.standard_normal(6)
    d /= np.linalg.norm(d)
    pts = np.concatenate([d + 0.05 * rng.standard_normal((15, 6)),
                          -d + 0.05 * rng.standard_normal((20, 6))])
    labels = kmeans(pts, 2, seed=0).labels
    assert len(set(labels[:15])) == 1 and len(set(labels[15:])) == 1
    assert labels[0] != labels[-1]
    assert np.array_equal(labels, kmeans(pts, 2, seed=0).labels)


def test_kmeans_degenerate_warns():
    with pytest.warns(UserWarning, match="distinct"):
        res = kmeans(np.ones((8, 3)), 2)
    assert np.all(res.labels == 0)


def test_kmeans_matches_exhaustive_partitions(rng):
    pts = rng.standard_normal((50, 3))
    for trial in range(5):
        sub = pts[rng.choice(50, 12, replace=False)]
        best = np.inf
        for mask in itertools.product([0, 1], repeat=11):
            lab = np.array((0,) + mask)
            if lab.sum() == 0:
                continue
            cost = sum(((sub[lab == j] - sub[lab == j].mean(0)) ** 2).sum() for j in (0, 1))
            best = min(best, cost)
        assert kmeans(sub, 2, seed=trial).inertia <= best + 1e-9


def test_organize_outputs_cases(gen):
    est = crandn(gen, 2, 7, 4)
    assert torch.equal(organize_outputs(est, torch.zeros(7)), est)
    assert torch.equal(organize_outputs(est, torch.ones(7)), est.flip(0))


def test_optimal_labels_reproduce_tpit_assignment(gen):
    est = crandn(gen, 2, 30, 129)
    X = crandn(gen, 2, 30, 129)
    org, choice, _ = ob.organize_frames(est, X)
    A = ob.assignment_labels(choice)
    streams = organize_outputs(est, A[:, 1])
    assert torch.equal(streams, org)
    x = istft(X, out_len=1500)
    assert torch.equal(ob.snr_objective(streams, x), ob.snr_objective(org, x))


def test_kmeans_labels_shape(gen):
    tcn = TCN(MICRO).double()
    labels = kmeans_labels(tcn, crandn(gen, 2, 9, 5), crandn(gen, 2, 2, 9, 5))
    assert labels.shape == (2, 9) and tcn.training


def test_joint_stage1_loss_ignores_stage2_after_labels(gen):
    torch.manual_seed(0)
    stage1 = DenseUNet(DenseUNetConfig.preset("micro", n_bins=129, k=2)).double().eval()
    tcn = TCN(TcnConfig.preset("micro", n_bins=129)).double().eval()
    x = torch.randn(1, 2, 800, generator=gen, dtype=f64)
    Y, X = stft(x.sum(1)), stft(x)
    labels = kmeans_labels(tcn, Y, estimate(stage1, Y))
    l1, _ = joint_loss(stage1, tcn, Y, X, x, StftConfig(), labels=labels)
    with torch.no_grad():
        for p in tcn.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=f64))
    l1b, _ = joint_loss(stage1, tcn, Y, X, x, StftConfig(), labels=labels)
    assert torch.equal(l1, l1b)
