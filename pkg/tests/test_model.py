import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe_inr import autodiff as ad
from moe_inr.autodiff import Tensor
from moe_inr.model import (BASE_WIDTHS, WIDER_WIDTHS, Block, FixedRouter, MoeConfig, MoeModel, PlainINR,
                           component_counts, count_parameters, make_baseline, neural_experts_config)


def block_count(d_in, width, hidden, d_out):
    """Affine maps in -> width, hidden x width -> width, width -> out."""
    return (d_in * width + width) + hidden * (width * width + width) + (width * d_out + d_out)


def moe_count(d_in, d_out, n, enc, exp, menc, head, concat=True):
    head_in = menc[0] + (enc[0] if concat else 0)
    return (block_count(d_in, enc[0], enc[1], enc[0]) + n * block_count(enc[0], exp[0], exp[1], d_out)
            + block_count(d_in, menc[0], menc[1], menc[0]) + block_count(head_in, head[0], head[1], n))


def plain_count(d_in, d_out, widths):
    dims = [d_in, *widths, d_out]
    return sum(a * b + b for a, b in zip(dims, dims[1:]))


@pytest.fixture(scope="module")
def tiny():
    cfg = MoeConfig(n_experts=3, in_dim=2, out_dim=2, encoder=Block(16, 1), expert=Block(8, 1),
                    manager_encoder=Block(16, 1), manager_head=Block(12, 1))
    return MoeModel(cfg, seed=3)


# -- parameter counts --------------------------------------------------------

@pytest.mark.parametrize("size,d_in,d_out,shape", [
    ("default", 2, 3, (4, (128, 2), (128, 2), (128, 2), (128, 2))),
    ("small", 2, 3, (4, (60, 2), (64, 2), (60, 2), (88, 2))),
    ("sdf_small", 3, 1, (8, (256, 2), (32, 2), (64, 2), (64, 2))),
    ("sdf_large", 3, 1, (8, (512, 2), (64, 2), (128, 2), (128, 2))),
])
def test_preset_parameter_counts(size, d_in, d_out, shape):
    cfg = neural_experts_config(d_in, d_out, size)
    expected = moe_count(d_in, d_out, *shape)
    assert count_parameters(cfg) == expected
    assert MoeModel(cfg).n_params == expected
    assert sum(component_counts(cfg).values()) == expected


def test_default_image_config_count():
    assert count_parameters(neural_experts_config(2, 3)) == 365_968


def test_base_and_wider_counts():
    assert make_baseline("base", 2, 3).n_params == plain_count(2, 3, BASE_WIDTHS) == 99_843
    assert make_baseline("wider", 2, 3).n_params == plain_count(2, 3, WIDER_WIDTHS)


def test_small_matches_base_budget():
    small = count_parameters(neural_experts_config(2, 3, "small"))
    base = make_baseline("base", 2, 3).n_params
    assert abs(small - base) / base < 0.02


@pytest.mark.parametrize("cond", ["none", "max", "mean"])
def test_conditioning_changes_head_input_only(cond):
    cfg = neural_experts_config(2, 3, conditioning=cond)
    assert count_parameters(cfg) == moe_count(2, 3, 4, (128, 2), (128, 2), (128, 2), (128, 2), concat=False)


def test_softplus_ff_does_not_count_frequencies():
    cfg = neural_experts_config(2, 3, activation="softplus_ff", ff_freqs=16)
    # both first layers read 2 * 16 features instead of 2 coordinates
    assert MoeModel(cfg).n_params == moe_count(32, 3, 4, (128, 2), (128, 2), (128, 2), (128, 2))
    assert count_parameters(cfg) == MoeModel(cfg).n_params


# -- config validation -------------------------------------------------------

def test_pool_conditioning_needs_equal_widths():
    with pytest.raises(ValueError):
        MoeConfig(encoder=Block(64, 2), manager_encoder=Block(32, 2), conditioning="max")


@pytest.mark.parametrize("kw", [dict(n_experts=0), dict(conditioning="sum"), dict(activation="relu"),
                                dict(in_dim=0)])
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        MoeConfig(**kw)


def test_block_parse_forms():
    assert Block.parse("64x3") == Block(64, 3)
    assert Block.parse((32, 1)) == Block(32, 1)
    assert Block.parse({"width": 8, "layers": 0}) == Block(8, 0)


def test_config_dict_round_trip():
    cfg = neural_experts_config(3, 1, "sdf_small", conditioning="mean", encoder="64x2", manager_encoder="64x2")
    assert MoeConfig.from_dict(cfg.to_dict()) == cfg


# -- forward -----------------------------------------------------------------

@pytest.mark.parametrize("cond", ["none", "max", "mean", "concatenate"])
def test_forward_shapes(cond):
    cfg = MoeConfig(n_experts=3, in_dim=2, out_dim=2, encoder=Block(16, 1), expert=Block(8, 1),
                    manager_encoder=Block(16, 1), manager_head=Block(12, 1), conditioning=cond)
    model = MoeModel(cfg)
    q, outs = model.forward(np.zeros((5, 2)))
    assert q.shape == (5, 3)
    assert outs.shape == (5, 3, 2)


def test_max_conditioning_is_elementwise_max():
    cfg = MoeConfig(n_experts=2, in_dim=2, out_dim=1, encoder=Block(8, 1), expert=Block(4, 0),
                    manager_encoder=Block(8, 1), manager_head=Block(4, 0), conditioning="max")
    model = MoeModel(cfg, seed=1)
    x = np.random.default_rng(0).uniform(-1, 1, size=(10, 2))
    latent = model.expert_latent(x)
    h = model.manager_input(x, latent).value
    expected = np.maximum(model.manager_encoder(x).value, latent.value)
    np.testing.assert_allclose(h, expected, atol=1e-15)


def test_probability_rows_sum_to_one(tiny):
    x = np.random.default_rng(0).uniform(-1, 1, size=(100, 2))
    q, _ = tiny.forward(x)
    np.testing.assert_allclose(q.value.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(tiny.probs_array(x).sum(axis=1), 1.0, atol=1e-12)


def test_detached_expert_path_blocks_encoder_gradient_from_experts(tiny):
    x = np.random.default_rng(0).uniform(-1, 1, size=(6, 2))
    _, outs = tiny.forward(x, detach_expert_path=True)
    enc = tiny.expert_encoder_params()
    grads = ad.backward(outs.sum(), enc)
    assert all(np.all(grads[p] == 0) for p in enc)
    assert any(np.any(grads[p] != 0) for p in tiny.expert_params())


def test_frozen_shared_path_records_no_graph(tiny):
    q, outs = tiny.forward(np.zeros((4, 2)), train_shared=False)
    assert not q.requires_grad
    assert outs.requires_grad


def test_route_matches_evaluate_all_oracle(tiny):
    x = np.random.default_rng(5).uniform(-1, 1, size=(300, 2))
    out, idx = tiny.route_and_reconstruct(x, batch=64)
    oracle_idx = np.argmax(tiny.probs_array(x), axis=1)
    oracle = tiny.all_experts_array(x)[np.arange(len(x)), oracle_idx]
    assert np.array_equal(idx, oracle_idx)
    assert out.tobytes() == oracle.tobytes()


def test_route_checks_input_shape(tiny):
    with pytest.raises(ad.ShapeError):
        tiny.route_and_reconstruct(np.zeros((4, 3)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), shift=st.floats(-50, 50))
def test_logit_shift_invariance(seed, shift):
    cfg = MoeConfig(n_experts=4, in_dim=2, out_dim=1, encoder=Block(8, 1), expert=Block(4, 0),
                    manager_encoder=Block(8, 1), manager_head=Block(8, 0))
    model = MoeModel(cfg, seed=seed % 1000)
    x = np.random.default_rng(seed).uniform(-1, 1, size=(40, 2))
    q0 = model.probs_array(x)
    out0, idx0 = model.route_and_reconstruct(x)
    model.manager_head.layers[-1].bias.value += shift
    q1 = model.probs_array(x)
    out1, idx1 = model.route_and_reconstruct(x)
    np.testing.assert_allclose(q1, q0, atol=1e-12)
    assert np.array_equal(idx0, idx1)
    assert np.array_equal(out0, out1)


def test_fixed_router_routes_by_lookup():
    cfg = MoeConfig(n_experts=2, in_dim=1, out_dim=1, encoder=Block(4, 0), expert=Block(4, 0),
                    manager_encoder=Block(4, 0), manager_head=Block(4, 0))
    model = MoeModel(cfg)
    model.router = FixedRouter(lambda x: (x[:, 0] > 0).astype(int), 2)
    x = np.array([[-0.5], [0.5]])
    _, idx = model.route_and_reconstruct(x)
    assert idx.tolist() == [0, 1]
    np.testing.assert_array_equal(model.forward(x)[0].value, [[1, 0], [0, 1]])


def test_plain_inr_surface():
    model = PlainINR(2, 3, [16, 16], seed=0)
    x = np.random.default_rng(0).uniform(-1, 1, size=(7, 2))
    q, outs = model.forward(x)
    np.testing.assert_array_equal(q.value, np.ones((7, 1)))
    out, idx = model.route_and_reconstruct(x)
    np.testing.assert_allclose(out, outs.value[:, 0], atol=1e-12)
    assert not idx.any()
    assert model.manager_params() == []


@pytest.mark.parametrize("kind", ["base", "vanilla-moe", "neural-experts"])
def test_save_load_round_trip(tmp_path, kind):
    kw = {} if kind == "base" else {"size": "small"}
    model = make_baseline(kind, 2, 3, seed=4, **kw)
    for p in model.parameters():
        p.value += 0.01
    path = tmp_path / "m.bin"
    model.save(path)
    loaded = type(model).load(path)
    x = np.random.default_rng(0).uniform(-1, 1, size=(20, 2))
    a, ia = model.route_and_reconstruct(x)
    b, ib = loaded.route_and_reconstruct(x)
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(ia, ib)


def test_vanilla_moe_has_no_conditioning():
    assert make_baseline("vanilla-moe", 2, 3).config.conditioning == "none"


def test_unknown_architecture():
    with pytest.raises(ValueError):
        make_baseline("transformer", 2, 3)
    with pytest.raises(ValueError):
        neural_experts_config(2, 3, "huge")


def test_seed_determines_weights():
    a = MoeModel(neural_experts_config(2, 3, "small"), seed=11)
    b = MoeModel(neural_experts_config(2, 3, "small"), seed=11)
    c = MoeModel(neural_experts_config(2, 3, "small"), seed=12)
    assert all(np.array_equal(p.value, r.value) for p, r in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.parameters()[0].value, c.parameters()[0].value)


def test_full_moe_loss_gradient_small_model():
    from moe_inr.training import moe_recon_loss

    cfg = MoeConfig(n_experts=2, in_dim=2, out_dim=2, encoder=Block(6, 1), expert=Block(5, 0),
                    manager_encoder=Block(6, 1), manager_head=Block(4, 0))
    model = MoeModel(cfg, seed=2)
    rng = np.random.default_rng(2)
    x, y = rng.uniform(-1, 1, size=(8, 2)), rng.normal(size=(8, 2))
    params = model.parameters()

    def f():
        return moe_recon_loss(*model.forward(Tensor(x)), y)

    assert ad.finite_diff_check(f, params) < 1e-4
