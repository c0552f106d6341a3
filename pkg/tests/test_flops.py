import pytest

from conftest import gradual_spec, toy_cfg, toy_net
from sparselab.algorithms import AlgorithmSpec, train, train_gmp, train_granet
from sparselab.flops import FlopsModel, density_trajectory, layer_forward_flops, train_flops
from sparselab.masks import SparsityPlan
from sparselab.nn import Network, affine, avgpool2d, conv2d, flatten, relu


def test_affine_flops():
    assert layer_forward_flops(affine(784, 100)) == 156800
    assert layer_forward_flops(affine(784, 100), 0.1) == pytest.approx(15680, abs=1e-9)
    assert layer_forward_flops(affine(784, 100), 0.0) == 0


def test_conv_and_elementwise_flops():
    assert layer_forward_flops(conv2d(3, 8, 3, padding=1), 1.0, (3, 8, 8)) == 2 * 9 * 3 * 8 * 64
    assert layer_forward_flops(relu(), 1.0, (8, 4, 4)) == 128
    assert layer_forward_flops(avgpool2d(2), 1.0, (8, 4, 4)) == 32
    assert layer_forward_flops(flatten(), 1.0, (8, 4, 4)) == 0
    with pytest.raises(ValueError):
        layer_forward_flops(affine(2, 2), 1.5)


def test_forward_linear_in_density():
    m = FlopsModel((3, 8, 8), [conv2d(3, 4, 3), relu(), flatten(), affine(144, 10)])
    base = m.forward({"0:conv2d": 0.0, "3:affine": 0.0})
    full = m.forward()
    half = m.forward({"0:conv2d": 0.5, "3:affine": 0.5})
    assert half - base == pytest.approx((full - base) / 2, rel=1e-12)


def test_dense_normalizes_to_one(moons):
    rec = train(toy_net(), moons, AlgorithmSpec("dense"), 0, toy_cfg(2))
    r = train_flops(rec)
    assert (r.normalized_forward, r.normalized_train) == (1.0, 1.0)
    assert {row["global_density"] for row in density_trajectory(rec)} == {1.0}


def test_static_pure_affine_scales_with_density(moons):
    net = Network.build((2,), [affine(2, 10), affine(10, 2)], seed=0)
    rec = train(net, moons, AlgorithmSpec("static", SparsityPlan("uniform", 0.5)), 0, toy_cfg(2))
    r = train_flops(rec)
    assert abs(r.normalized_train - 0.5) <= 1e-9
    assert abs(r.normalized_forward - 0.5) <= 1e-9


def step_oracle(rec, batch):
    """Independent integration: walk every step and look up the live density."""
    m = FlopsModel.from_arch(rec.arch)
    total = 0.0
    for t in range(len(rec.losses)):
        dens = dict(rec.initial_densities)
        for ev in rec.events:
            if ev.step < t:
                dens.update(ev.densities)
        total += 3 * m.forward(dens) * batch
    return total


def test_gmp_matches_stepwise_oracle(moons):
    rec = train_gmp(toy_net(), moons, gradual_spec("gmp", n=4, delta_t=7), 0, toy_cfg(2))
    r = train_flops(rec)
    assert abs(r.train_flops_total - step_oracle(rec, 32)) <= 1e-9 * r.train_flops_total
    traj = [row["global_density"] for row in density_trajectory(rec)]
    assert all(b <= a for a, b in zip(traj, traj[1:]))


def test_granet_dense_gradient_charge(moons):
    rec = train_granet(toy_net(), moons, gradual_spec("granet", n=4, delta_t=7), 0, toy_cfg(2))
    charged = train_flops(rec).train_flops_total
    free = train_flops(rec, charge_regen_dense=False).train_flops_total
    assert abs(free - step_oracle(rec, 32)) <= 1e-9 * free
    m = FlopsModel.from_arch(rec.arch)
    extra, dens = 0.0, dict(rec.initial_densities)
    for ev in rec.events:
        if ev.dense_grad:
            extra += 2 * (m.forward() - m.forward(dens)) * 32
        dens.update(ev.densities)
    assert charged - free == pytest.approx(extra, rel=1e-12)
    assert sum(row["event"] for row in density_trajectory(rec)) == 5  # n + 1 grid points


def test_sparse_start_is_cheaper(moons):
    cfg = toy_cfg(4)
    g = train_granet(toy_net(), moons, gradual_spec("granet", s_i=0.5, init="erk", n=4, delta_t=10), 0, cfg)
    m = train_gmp(toy_net(), moons, gradual_spec("gmp", n=4, delta_t=10), 0, cfg)
    assert train_flops(g).train_flops_total < train_flops(m).train_flops_total
