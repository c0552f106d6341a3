import sys
from pathlib import Path

import numpy as np
import pytest

from sparselab import data as D
from sparselab.algorithms import AlgorithmSpec, TrainConfig
from sparselab.nn import Network, mlp
from sparselab.schedules import PruneSchedule, RegenSchedule

MNIST_DIR = Path(__file__).parent / "data" / "mnist5k"


@pytest.fixture(scope="session")
def moons():
    ds = D.make_synthetic("two_moons", 1000, 0.1, seed=0)
    train, test = D.split_shuffle(ds, [0.8, 0.2], seed=0)
    mean, std = D.channel_stats(train)
    return D.normalize(train, mean, std), D.normalize(test, mean, std)


@pytest.fixture(scope="session")
def small_moons():
    ds = D.make_synthetic("two_moons", 200, 0.1, seed=1)
    return tuple(D.split_shuffle(ds, [0.8, 0.2], seed=1))


def toy_net(seed=0, sizes=(2, 20, 20, 2)):
    return Network.build((sizes[0],), mlp(list(sizes)), seed=seed)


def toy_cfg(epochs=6, batch=32, drops=(4,)):
    return TrainConfig(epochs=epochs, batch_size=batch, lr=0.1, momentum=0.9, weight_decay=5e-4,
                       lr_drop_epochs=drops)


def gradual_spec(kind, s_f=0.9, n=4, delta_t=10, s_i=0.0, r0=0.5, init="dense", **kw):
    prune = PruneSchedule(s_i, s_f, 0, delta_t, n)
    regen = RegenSchedule(r0, prune.tf)
    from sparselab.masks import SparsityPlan
    return AlgorithmSpec(kind, SparsityPlan(init, s_i), prune, regen, **kw)


def random_net(rng, conv=False):
    """Small random network, optionally with conv/pool layers."""
    from sparselab.nn import affine, avgpool2d, conv2d, flatten, relu
    if conv:
        c1 = int(rng.integers(1, 3))
        c2 = int(rng.integers(2, 4))
        layers = [conv2d(c1, c2, 3, stride=int(rng.integers(1, 3)), padding=int(rng.integers(0, 2))),
                  relu()]
        h = 6
        c = layers[0].out_channels
        hh = ww = (h + 2 * layers[0].padding - 3) // layers[0].stride + 1
        if hh % 2 == 0 and ww % 2 == 0:
            layers.append(avgpool2d(2))
            hh, ww = hh // 2, ww // 2
        layers += [flatten(), affine(c * hh * ww, 5), relu(), affine(5, 3)]
        return Network.build((c1, h, h), layers, seed=int(rng.integers(1 << 30)))
    sizes = [int(rng.integers(2, 8)) for _ in range(3)] + [3]
    return Network.build((sizes[0],), mlp(sizes), seed=int(rng.integers(1 << 30)))


def assert_zero_consistent(net):
    for p in net.masked_params:
        assert np.max(np.abs(p.weight[~p.mask]), initial=0.0) == 0.0, p.layer_id


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
