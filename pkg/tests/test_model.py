import numpy as np
import pytest

from oracles import fd_check_array, relative_error
from sspslab.model import (
    Mlp,
    MlpSpec,
    ModelParams,
    average_checkpoints,
    backward,
    ema_update,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
)


def _random_model(rng, standardize=False, normalize=False):
    enc = MlpSpec(layer_dims=(6, 10, 8))
    proj = MlpSpec(layer_dims=(8, 7, 5), standardize_hidden=standardize,
                   normalize_output=normalize)
    return init_model(enc, proj, rng)


def test_zero_params_give_zero_outputs(rng):
    params = _random_model(rng)
    for _, mlp in params.modules():
        for w in mlp.weights:
            w[:] = 0.0
        for b in mlp.biases:
            b[:] = 0.0
    y, z, _ = forward(params, rng.standard_normal((4, 6)))
    assert np.all(y == 0.0)
    assert np.all(z == 0.0)


def test_identity_single_layer():
    spec = MlpSpec(layer_dims=(5, 5))
    mlp = Mlp(spec=spec, weights=[np.eye(5)], biases=[np.zeros(5)])
    x = np.arange(5.0)
    out, _ = mlp.forward(x)
    assert np.array_equal(out, x)


def test_forward_matches_two_loop_oracle(rng):
    spec = MlpSpec(layer_dims=(6, 9, 4))
    mlp = Mlp.init(spec, rng)
    x = rng.standard_normal(6)
    out, _ = mlp.forward(x)

    def naive_affine(vec, w, b):
        res = np.zeros(w.shape[1])
        for j in range(w.shape[1]):
            acc = b[j]
            for i in range(w.shape[0]):
                acc += vec[i] * w[i, j]
            res[j] = acc
        return res

    h = naive_affine(x, mlp.weights[0], mlp.biases[0])
    h = np.maximum(h, 0.0)
    expected = naive_affine(h, mlp.weights[1], mlp.biases[1])
    assert np.allclose(out, expected, atol=1e-12)


def test_forward_is_pure(rng):
    params = _random_model(rng, standardize=True, normalize=True)
    x = rng.standard_normal((5, 6))
    y1, z1, _ = forward(params, x)
    y2, z2, _ = forward(params, x)
    assert np.array_equal(y1, y2)
    assert np.array_equal(z1, z2)


def test_zero_cotangents_give_zero_grads(rng):
    params = _random_model(rng)
    x = rng.standard_normal((3, 6))
    y, z, caches = forward(params, x)
    grads, _ = backward(params, caches, np.zeros_like(z), np.zeros_like(y))
    for key in ("encoder", "projector"):
        for dw, db in grads[key]:
            assert np.all(dw == 0.0)
            assert np.all(db == 0.0)


def test_single_linear_layer_analytic_gradient(rng):
    spec = MlpSpec(layer_dims=(4, 3))
    mlp = Mlp.init(spec, rng)
    x = rng.standard_normal(4)
    c = rng.standard_normal(3)
    out, cache = mlp.forward(x)
    grads, _ = mlp.backward(cache, c)  # L = z . c
    dw, db = grads[0]
    assert np.allclose(dw, np.outer(x, c), atol=1e-12)
    assert np.allclose(db, c, atol=1e-12)


@pytest.mark.parametrize("standardize,normalize", [(False, False), (True, False), (True, True)])
def test_gradients_match_finite_differences(rng, standardize, normalize):
    params = _random_model(rng, standardize=standardize, normalize=normalize)
    x = rng.standard_normal((8, 6))
    target = rng.standard_normal(5)

    def loss():
        _, z, _ = forward(params, x)
        return float((z @ target).sum() + 0.5 * (z**2).sum())

    _, z, caches = forward(params, x)
    grad_z = np.tile(target, (8, 1)) + z
    grads, _ = backward(params, caches, grad_z)
    worst = 0.0
    for mod_name, mlp in params.modules():
        for l, (dw, db) in enumerate(grads[mod_name]):
            worst = max(worst, fd_check_array(loss, mlp.weights[l], dw, rng, 8))
            worst = max(worst, fd_check_array(loss, mlp.biases[l], db, rng, 4))
    assert worst < 1e-4


def test_grad_y_cotangent_enters_encoder(rng):
    params = _random_model(rng)
    x = rng.standard_normal((4, 6))
    y, z, caches = forward(params, x)
    grad_y = rng.standard_normal(y.shape)

    def loss():
        y2, _, _ = forward(params, x)
        return float((y2 * grad_y).sum())

    grads, _ = backward(params, caches, np.zeros_like(z), grad_y)
    worst = 0.0
    for l, (dw, _) in enumerate(grads["encoder"]):
        worst = max(worst, fd_check_array(loss, params.encoder.weights[l], dw, rng, 6))
    assert worst < 1e-4


def test_ema_endpoints_and_midpoint(rng):
    student = _random_model(rng)
    teacher = student.copy()
    for _, mlp in teacher.modules():
        for w in mlp.weights:
            w[:] = 2.0
    for _, mlp in student.modules():
        for w in mlp.weights:
            w[:] = 0.0

    frozen = teacher.copy()
    ema_update(teacher, student, 1.0)
    for (_, a), (_, b) in zip(teacher.arrays(), frozen.arrays()):
        assert np.array_equal(a, b)

    ema_update(teacher, student, 0.5)
    assert all(np.allclose(w, 1.0) for _, mlp in teacher.modules() for w in mlp.weights)

    ema_update(teacher, student, 0.0)
    for (_, a), (_, b) in zip(teacher.arrays(), student.arrays()):
        assert np.array_equal(a, b)

    with pytest.raises(ValueError):
        ema_update(teacher, student, 1.5)


def test_ema_is_a_contraction(rng):
    student = _random_model(rng)
    teacher = _random_model(np.random.default_rng(999))
    gaps = [np.abs(t - s) for (_, t), (_, s) in zip(teacher.arrays(), student.arrays())]
    m = 0.7
    ema_update(teacher, student, m)
    for (_, t), (_, s), gap in zip(teacher.arrays(), student.arrays(), gaps):
        assert np.allclose(np.abs(t - s), m * gap, atol=1e-12)


def test_average_checkpoints(rng):
    a = _random_model(rng)
    b = a.copy()
    for _, mlp in a.modules():
        for w in mlp.weights:
            w[:] = 0.0
    for _, mlp in b.modules():
        for w in mlp.weights:
            w[:] = 2.0
    avg = average_checkpoints([a, b])
    assert all(np.allclose(w, 1.0) for _, mlp in avg.modules() for w in mlp.weights)

    single = average_checkpoints([b])
    for (_, x), (_, y) in zip(single.arrays(), b.arrays()):
        assert np.array_equal(x, y)

    with pytest.raises(ValueError):
        average_checkpoints([])


def test_average_ten_checkpoints_matches_direct_sum(rng):
    checkpoints = [_random_model(np.random.default_rng(i)) for i in range(10)]
    avg = average_checkpoints(checkpoints)
    names = [name for name, _ in avg.arrays()]
    for idx, name in enumerate(names):
        direct = sum(list(c.arrays())[idx][1] for c in checkpoints) / 10.0
        got = list(avg.arrays())[idx][1]
        assert np.allclose(got, direct, atol=1e-12)


def test_checkpoint_roundtrip_bit_exact(rng, tmp_path):
    params = _random_model(rng, standardize=True, normalize=True)
    path = tmp_path / "model.bin"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.projector.spec == params.projector.spec
    for (na, a), (nb, b) in zip(params.arrays(), loaded.arrays()):
        assert na == nb
        assert np.array_equal(a, b)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)
