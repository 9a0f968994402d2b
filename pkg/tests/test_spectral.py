import numpy as np
import pytest

from spectral_tta import spectral, tensor as T
from spectral_tta.spectral import (
    SpectralCode,
    SpectralCodeFormatError,
    SpectralLayer,
    codes_identical,
    decompose,
    jacobi_svd,
)
from spectral_tta.tensor import Tensor

from helpers import assert_gradients_match, numeric_gradient


class FakeModel:
    """Just enough of the model surface for code extract/load."""

    def __init__(self, layers):
        self._layers = layers

    def spectral_layers(self):
        return self._layers


def _random_layer(rng, d_out, d_in, layer_id="layer"):
    return decompose(rng.standard_normal((d_out, d_in)), rng.standard_normal(d_out), layer_id)


# -- decomposition -------------------------------------------------------------


def test_decompose_identity():
    layer = decompose(np.eye(3), np.zeros(3))
    assert np.allclose(layer.sigma.data, 1.0)
    assert np.allclose(layer.u.data @ layer.v.data.T, np.eye(3), atol=1e-12)


def test_decompose_diagonal():
    layer = decompose(np.diag([3.0, 2.0, 1.0]), np.zeros(3))
    assert np.array_equal(layer.sigma.data, [3.0, 2.0, 1.0])


def test_decompose_rejects_non_finite():
    w = np.eye(2)
    w[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        decompose(w, np.zeros(2))


def test_singular_values_match_eigen_oracle():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((8, 5))
    _, s, _ = jacobi_svd(w)
    oracle = np.sqrt(np.maximum(np.linalg.eigh(w.T @ w)[0], 0.0))[::-1]
    assert np.max(np.abs(s - oracle) / oracle) <= 1e-9


def test_decomposition_invariants_random():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m, n = rng.integers(2, 33, size=2)
        w = rng.standard_normal((int(m), int(n)))
        layer = decompose(w, np.zeros(int(m)))
        r = layer.rank
        assert np.linalg.norm(layer.u.data.T @ layer.u.data - np.eye(r)) <= 1e-10
        assert np.linalg.norm(layer.v.data.T @ layer.v.data - np.eye(r)) <= 1e-10
        rec = layer.u.data @ np.diag(layer.sigma.data) @ layer.v.data.T
        assert np.linalg.norm(rec - w) / np.linalg.norm(w) <= 1e-10
        assert (np.diff(layer.sigma.data) <= 1e-12).all()
        assert (layer.sigma.data >= 0).all()


def test_decompose_is_deterministic():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((7, 7))
    a = jacobi_svd(w)
    b = jacobi_svd(w)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_degenerate_spectrum_compares_values_not_vectors():
    # repeated singular values: any orthonormal basis of the subspace is fine
    layer = decompose(2.0 * np.eye(4), np.zeros(4))
    assert np.allclose(layer.sigma.data, 2.0)
    rec = layer.u.data @ np.diag(layer.sigma.data) @ layer.v.data.T
    assert np.allclose(rec, 2.0 * np.eye(4), atol=1e-12)


# -- reconstruct / apply ---------------------------------------------------------


def test_reconstruct_round_trip():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((6, 9))
    layer = decompose(w, np.zeros(6))
    rec = layer.reconstruct().data
    assert np.linalg.norm(rec - w) / np.linalg.norm(w) <= 1e-10


def test_reconstruct_linear_in_sigma():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((5, 5))
    layer = decompose(w, np.zeros(5))
    base = layer.reconstruct().data
    layer.sigma.data *= 2.0
    assert np.allclose(layer.reconstruct().data, 2.0 * base, rtol=0, atol=1e-12)


def test_reconstruct_gradient_is_u_g_v():
    rng = np.random.default_rng(8)
    layer = _random_layer(rng, 6, 4)
    coeff = rng.standard_normal((6, 4))

    def loss_tensor():
        return T.mul(layer.reconstruct(), Tensor(coeff)).sum()

    T.backward(loss_tensor())
    analytic = np.einsum("ij,ik,jk->k", coeff, layer.u.data, layer.v.data)
    assert np.allclose(layer.sigma.grad, analytic, atol=1e-12)
    fd = numeric_gradient(lambda: loss_tensor().item(), layer.sigma.data)
    assert_gradients_match(layer.sigma.grad, fd)
    layer.sigma.grad = None


def test_apply_identity_layer_adds_bias():
    bias = np.array([0.5, -0.5, 1.0])
    layer = decompose(np.eye(3), bias)
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    assert np.allclose(layer.apply(x).data, x.data + bias, atol=1e-12)


def test_expert_outputs_are_orthogonal():
    rng = np.random.default_rng(9)
    layer = _random_layer(rng, 6, 6)
    x = rng.standard_normal(6)
    outs = [
        np.outer(layer.u.data[:, i], layer.v.data[:, i]) @ x for i in range(layer.rank)
    ]
    for i in range(layer.rank):
        for j in range(i + 1, layer.rank):
            assert abs(outs[i] @ outs[j]) <= 1e-10


def test_apply_matches_dense_oracle():
    rng = np.random.default_rng(10)
    w = rng.standard_normal((5, 8))
    bias = rng.standard_normal(5)
    layer = decompose(w, bias)
    x = rng.standard_normal((3, 8))
    expected = x @ w.T + bias
    assert np.allclose(layer.apply(Tensor(x)).data, expected, atol=1e-10)
    assert np.allclose(
        layer.apply(Tensor(x)).data,
        (layer.reconstruct().data @ x.T).T + bias,
        atol=1e-12,
    )


def test_apply_rejects_wrong_width():
    layer = decompose(np.eye(3), np.zeros(3))
    with pytest.raises(ValueError, match="d_in"):
        layer.apply(Tensor(np.zeros((2, 4))))


def test_subspace_preserved_under_sigma_updates():
    rng = np.random.default_rng(11)
    layer = _random_layer(rng, 8, 6)
    layer.sigma.data += rng.standard_normal(layer.rank)
    w_adapted = layer.reconstruct().data
    u = layer.u.data
    residual = (np.eye(8) - u @ u.T) @ w_adapted
    assert np.linalg.norm(residual) <= 1e-10


# -- masks -----------------------------------------------------------------------


def test_set_mask_counting():
    layer = SpectralLayer("m", np.eye(10), np.arange(10, 0, -1, dtype=float), np.eye(10), np.zeros(10))
    layer.set_mask("top", 20)
    assert list(np.flatnonzero(layer.mask)) == [0, 1]
    layer.set_mask("bottom", 20)
    assert list(np.flatnonzero(layer.mask)) == [8, 9]
    layer.set_mask("all", 0)
    assert layer.mask.all()


def test_set_mask_ceil_rule_768():
    sig = np.linspace(1.0, 0.1, 768)
    layer = SpectralLayer("big", np.eye(768), sig, np.eye(768), np.zeros(768))
    layer.set_mask("top", 80)
    assert int(layer.mask.sum()) == 615  # ceil(0.8 * 768)


def test_set_mask_rejects_out_of_range():
    layer = decompose(np.eye(4), np.zeros(4))
    with pytest.raises(ValueError):
        layer.set_mask("top", 0)
    with pytest.raises(ValueError):
        layer.set_mask("top", 101)
    with pytest.raises(ValueError):
        layer.set_mask("sideways", 50)


# -- spectral codes ---------------------------------------------------------------


def _two_layer_model(rng):
    return FakeModel(
        [_random_layer(rng, 4, 6, "block0.a"), _random_layer(rng, 5, 3, "block0.b")]
    )


def test_code_round_trip_bit_exact():
    rng = np.random.default_rng(12)
    model = _two_layer_model(rng)
    code = spectral.extract_code(model)
    model._layers[0].sigma.data += 1.0
    spectral.load_code(model, code)
    again = spectral.extract_code(model)
    assert codes_identical(code, again)


def test_extract_returns_copies():
    rng = np.random.default_rng(13)
    model = _two_layer_model(rng)
    code = spectral.extract_code(model)
    before = code.per_layer[0][1].copy()
    model._layers[0].sigma.data[...] = 0.0
    assert np.array_equal(code.per_layer[0][1], before)


def test_load_zero_code_gives_bias_only_output():
    rng = np.random.default_rng(14)
    model = _two_layer_model(rng)
    zero = SpectralCode(
        per_layer=tuple((lid, np.zeros_like(sig)) for lid, sig in spectral.extract_code(model).per_layer)
    )
    spectral.load_code(model, zero)
    x = Tensor(rng.standard_normal((2, 6)))
    out = model._layers[0].apply(x)
    assert np.allclose(out.data, model._layers[0].bias.data, atol=1e-15)


def test_load_code_mismatch_names_layer():
    rng = np.random.default_rng(15)
    model = _two_layer_model(rng)
    code = spectral.extract_code(model)
    wrong = SpectralCode(per_layer=(("block0.a", code.per_layer[0][1]), ("elsewhere", code.per_layer[1][1])))
    with pytest.raises(ValueError, match="elsewhere"):
        spectral.load_code(model, wrong)
    short = SpectralCode(per_layer=(code.per_layer[0],))
    with pytest.raises(ValueError, match="layers"):
        spectral.load_code(model, short)


def test_code_scalar_count():
    rng = np.random.default_rng(16)
    model = _two_layer_model(rng)
    code = spectral.extract_code(model)
    assert code.scalar_count() == min(4, 6) + min(5, 3)


def test_code_serialization_round_trip():
    rng = np.random.default_rng(17)
    code = spectral.extract_code(_two_layer_model(rng))
    raw = code.to_bytes()
    back = SpectralCode.from_bytes(raw)
    assert codes_identical(code, back)
    assert back.to_bytes() == raw


def test_code_serialization_rejects_garbage_with_offset():
    rng = np.random.default_rng(18)
    raw = spectral.extract_code(_two_layer_model(rng)).to_bytes()
    with pytest.raises(SpectralCodeFormatError, match="byte 0"):
        SpectralCode.from_bytes(b"NOTACODE" + raw)
    with pytest.raises(SpectralCodeFormatError, match="truncated"):
        SpectralCode.from_bytes(raw[:-4])
