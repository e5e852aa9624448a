import math

import numpy as np
import pytest

from cola.helpers.errors import ConfigError
from cola.optim import SGD, AdamW, CosineSchedule, LinearWarmupSchedule, OptimizerSpec, build_optimizer


def test_sgd_step_does_not_modify_inputs():
    params = {'w': np.array([1.0, 2.0])}
    grads = {'w': np.array([0.5, -1.0])}
    updated = SGD(0.1).step(params, grads)
    np.testing.assert_allclose(updated['w'], [0.95, 2.1])
    np.testing.assert_array_equal(params['w'], [1.0, 2.0])


def test_sgd_momentum_accumulates_velocity():
    optimizer = SGD(1.0, momentum=0.5)
    params = {'w': np.zeros(1)}
    grads = {'w': np.ones(1)}
    params = optimizer.step(params, grads)
    params = optimizer.step(params, grads)
    np.testing.assert_allclose(params['w'], [-(1.0 + 1.5)])


def test_sgd_weight_decay():
    updated = SGD(0.1, weight_decay=0.5).step({'w': np.array([2.0])}, {'w': np.zeros(1)})
    np.testing.assert_allclose(updated['w'], [1.9])


def test_adamw_first_step_moves_by_learning_rate():
    optimizer = AdamW(lr=0.01, weight_decay=0.0)
    updated = optimizer.step({'w': np.array([1.0, 1.0])}, {'w': np.array([3.0, -0.2])})
    np.testing.assert_allclose(updated['w'], [0.99, 1.01], rtol=1e-6)
    assert optimizer.step_count == 1


def test_cosine_schedule_endpoints():
    schedule = CosineSchedule(10)
    assert schedule(0) == pytest.approx(1.0)
    assert schedule(5) == pytest.approx(0.5)
    assert schedule(10) == pytest.approx(0.0)
    assert schedule(20) == pytest.approx(0.0)


def test_linear_schedule_warms_up_then_decays():
    schedule = LinearWarmupSchedule(100, warmup=0.05)
    assert schedule.warmup_steps == 5
    assert schedule(0) == pytest.approx(0.2)
    assert schedule(4) == pytest.approx(1.0)
    assert schedule(5) == pytest.approx(1.0)
    assert schedule(100) == pytest.approx(0.0)


def test_optimizer_lr_follows_its_own_step_count():
    optimizer = build_optimizer(OptimizerSpec(name='sgd', lr=1.0, schedule='cosine', total_steps=4))
    params = {'w': np.zeros(1)}
    rates = []
    for _ in range(3):
        rates.append(optimizer.current_lr())
        params = optimizer.step(params, {'w': np.zeros(1)})
    assert rates == pytest.approx([1.0, 0.5 * (1 + math.cos(math.pi / 4)), 0.5])


@pytest.mark.parametrize(
    'spec',
    [OptimizerSpec(name='rmsprop'), OptimizerSpec(schedule='step')],
)
def test_unknown_names_raise_config_error(spec):
    with pytest.raises(ConfigError):
        build_optimizer(spec)
