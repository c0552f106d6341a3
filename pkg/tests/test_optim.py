import numpy as np
import pytest

from sparselab.nn import Network, affine
from sparselab.optim import SgdState, StepLR, sgd_step, step_lr


def one_weight_net(w=1.0, g=2.0, mask=True):
    net = Network.build((1,), [affine(1, 1)])
    p = net.params[0]
    p.mask[...] = mask
    p.weight[...] = w if mask else 0.0
    p.grad = np.array([[g]])
    net.bias_grads[0] = np.zeros(1)
    return net


def test_vanilla_sgd():
    net = one_weight_net(1.0, 2.0)
    sgd_step(net, SgdState(lr=0.1, momentum=0.0, weight_decay=0.0))
    assert net.params[0].weight[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_masked_position_stays_zero():
    net = one_weight_net(0.0, 5.0, mask=False)
    st = SgdState(lr=0.1, momentum=0.9, weight_decay=0.1)
    for _ in range(3):
        sgd_step(net, st)
    assert net.params[0].weight[0, 0] == 0.0
    assert st.velocity[net.params[0].layer_id][0, 0] == 0.0


def test_momentum_hand_iteration():
    net = one_weight_net(0.0, 1.0)
    st = SgdState(lr=0.1, momentum=0.9, weight_decay=0.0)
    sgd_step(net, st)
    assert net.params[0].weight[0, 0] == pytest.approx(-0.1, abs=1e-15)
    sgd_step(net, st)
    assert st.velocity[net.params[0].layer_id][0, 0] == pytest.approx(1.9, abs=1e-15)
    assert net.params[0].weight[0, 0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_requires_grads():
    net = Network.build((1,), [affine(1, 1)])
    with pytest.raises(RuntimeError):
        sgd_step(net, SgdState())


def test_state_validation():
    with pytest.raises(ValueError):
        SgdState(momentum=1.0)
    with pytest.raises(ValueError):
        SgdState(weight_decay=-1)


@pytest.mark.parametrize("epoch,lr", [(0, 0.1), (79, 0.1), (80, 0.01), (119, 0.01), (120, 0.001), (159, 0.001)])
def test_step_lr_table_schedule(epoch, lr):
    assert step_lr(StepLR(0.1, 10.0, (80, 120)), epoch) == pytest.approx(lr, rel=1e-12)


def test_step_lr_without_drops():
    sched = StepLR(0.05, 10.0, ())
    assert {step_lr(sched, e) for e in range(200)} == {0.05}


def test_step_lr_rejects_unsorted():
    with pytest.raises(ValueError):
        StepLR(0.1, 10.0, (120, 80))
