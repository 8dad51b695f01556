"""AdamW contract tests, including the hand-evaluated single-step recurrence."""

import numpy as np

from memssl.autodiff import Tensor
from memssl.optim import OptimizerState, adamw_step


def make_params(values):
    return {name: Tensor(np.asarray(v, dtype=np.float32), requires_grad=True) for name, v in values.items()}


def test_null_update():
    params = make_params({"w": [1.0, -2.0, 3.0]})
    state = OptimizerState.for_params(params)
    adamw_step(params, {"w": np.zeros(3, dtype=np.float32)}, state, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0, 3.0])
    assert state.t == 1


def test_decay_only_step():
    params = make_params({"w": [4.0, -8.0]})
    state = OptimizerState.for_params(params)
    adamw_step(params, {"w": np.zeros(2, dtype=np.float32)}, state, lr=1.0, weight_decay=0.1)
    np.testing.assert_allclose(params["w"].data, [3.6, -7.2], rtol=1e-6)


def test_single_step_hand_recurrence():
    # theta=1, g=1, lr=0.1, betas=(0.9, 0.999), eps=1e-8, wd=0:
    # m_hat = v_hat = 1 -> theta' = 1 - 0.1 / (1 + 1e-8) = 0.900000001
    params = make_params({"w": [1.0]})
    state = OptimizerState.for_params(params)
    adamw_step(params, {"w": np.ones(1, dtype=np.float32)}, state, lr=0.1, weight_decay=0.0)
    assert abs(float(params["w"].data[0]) - 0.900000001) < 1e-7


def test_bitwise_deterministic():
    rng = np.random.default_rng(7)
    vals = rng.normal(size=(5, 3)).astype(np.float32)
    grads = rng.normal(size=(5, 3)).astype(np.float32)

    results = []
    for _ in range(2):
        params = make_params({"w": vals.copy()})
        state = OptimizerState.for_params(params)
        for _ in range(10):
            adamw_step(params, {"w": grads}, state, lr=0.01, weight_decay=0.04)
        results.append(params["w"].data.tobytes())
    assert results[0] == results[1]


def test_missing_grad_treated_as_zero():
    params = make_params({"a": [1.0], "b": [2.0]})
    state = OptimizerState.for_params(params)
    adamw_step(params, {"a": np.ones(1, dtype=np.float32)}, state, lr=0.0, weight_decay=0.0)
    np.testing.assert_array_equal(params["b"].data, [2.0])
