import json

import numpy as np
import pytest

from hralert import autodiff as ad
from hralert.nn import Linear, MLP2, Module, MultiHeadAttention
from hralert.optim import Adam, clip_global_norm
from hralert.serialize import load_params, save_params


def with_grad(values, grad):
    p = ad.parameter(values)
    p.grad = np.asarray(grad, dtype=float)
    return p


def test_clip_scales_to_max_norm():
    p = with_grad([0.0, 0.0], [3.0, 4.0])
    assert clip_global_norm([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(p.grad, [0.6, 0.8])


def test_clip_leaves_small_grads_alone():
    p = with_grad([0.0, 0.0], [0.3, 0.4])
    clip_global_norm([p], 1.0)
    assert p.grad.tolist() == [0.3, 0.4]


def test_clip_uses_global_norm():
    a, b = with_grad([0.0, 0.0], [1.0, 0.0]), with_grad([0.0, 0.0], [0.0, 1.0])
    clip_global_norm([a, b], 1.0)
    np.testing.assert_allclose(a.grad, [2 ** -0.5, 0.0])
    np.testing.assert_allclose(b.grad, [0.0, 2 ** -0.5])


def test_adam_first_step_matches_reference():
    p = with_grad([0.0], [1.0])
    Adam([p], lr=1e-3).step()
    m = 0.1 * 1.0
    v = 0.001 * 1.0
    expected = -1e-3 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(p.values, [expected], rtol=1e-12)
    assert p.values[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_zero_grads_keep_params():
    p = with_grad([1.0, -2.0], [0.0, 0.0])
    opt = Adam([p])
    for _ in range(5):
        opt.step()
    assert p.values.tolist() == [1.0, -2.0]


def test_adam_identical_params_move_identically():
    a, b = with_grad([0.5], [0.3]), with_grad([0.5], [0.3])
    Adam([a, b], lr=1e-2).step()
    assert a.values.tolist() == b.values.tolist()


def test_adam_rejects_shape_drift():
    p = with_grad([0.0, 0.0], [1.0, 1.0])
    opt = Adam([p])
    opt.step()
    p.values = np.zeros(3)
    p.grad = np.ones(3)
    with pytest.raises(ad.ShapeError):
        opt.step()


def test_attention_rejects_indivisible_heads(rng):
    with pytest.raises(ValueError):
        MultiHeadAttention(6, 4, rng)


def test_single_token_attention_is_value_then_output_projection(rng):
    mha = MultiHeadAttention(4, 2, rng)
    q = ad.DiffArray(rng.standard_normal((1, 4)))
    u = ad.DiffArray(rng.standard_normal((1, 4)))
    expected = mha.out_proj(mha.v_proj(u)).values
    np.testing.assert_allclose(mha(q, u).values, expected, atol=1e-14)


def test_attention_matches_scalar_oracle(rng):
    d, m = 4, 2
    mha = MultiHeadAttention(d, m, rng)
    q, kv = rng.standard_normal((1, d)), rng.standard_normal((2, d))

    def lin(layer, x):
        return x @ layer.weight.values + layer.bias.values

    qp, kp, vp = lin(mha.q_proj, q), lin(mha.k_proj, kv), lin(mha.v_proj, kv)
    dh = d // m
    mixed = np.zeros((1, d))
    for h in range(m):
        sl = slice(h * dh, (h + 1) * dh)
        logits = [sum(qp[0, sl][i] * kp[j, sl][i] for i in range(dh)) / np.sqrt(dh) for j in range(2)]
        top = max(logits)
        w = [np.exp(x - top) for x in logits]
        w = [x / sum(w) for x in w]
        for j in range(2):
            mixed[0, sl] += w[j] * vp[j, sl]
    expected = lin(mha.out_proj, mixed)
    np.testing.assert_allclose(mha(ad.DiffArray(q), ad.DiffArray(kv)).values, expected, atol=1e-10)


class Toy(Module):
    def __init__(self, rng):
        super().__init__()
        self.scale = self.add_param("scale", rng.standard_normal(3))
        self.mlp = self.add_child("mlp", MLP2(3, 4, 2, rng))


def test_state_dict_round_trip(rng, tmp_path):
    a, b = Toy(rng), Toy(np.random.default_rng(99))
    save_params(tmp_path, a.state_dict("toy."), {"kind": "toy"})
    arrays, meta = load_params(tmp_path)
    b.load_state_dict(arrays, "toy.")
    assert meta == {"kind": "toy"}
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(pa.values, pb.values), name
    assert [n for n, _ in a.named_parameters()] == ["scale", "mlp.lin1.weight", "mlp.lin1.bias",
                                                    "mlp.norm.scale", "mlp.norm.shift",
                                                    "mlp.lin2.weight", "mlp.lin2.bias"]


def test_manifest_and_meta_layout(rng, tmp_path):
    save_params(tmp_path, {"w": np.arange(6.0).reshape(2, 3)}, {"b": 1, "a": 2})
    assert (tmp_path / "manifest.txt").read_text() == "w\t2,3\t0\n"
    assert list(json.loads((tmp_path / "meta.json").read_text())) == ["a", "b"]
    assert (tmp_path / "params.bin").read_bytes() == np.arange(6.0).astype("<f8").tobytes()


def test_load_rejects_shape_mismatch(rng):
    layer = Linear(3, 2, rng)
    with pytest.raises(ad.ShapeError):
        layer.load_state_dict({"weight": np.zeros((2, 3)), "bias": np.zeros(2)})
