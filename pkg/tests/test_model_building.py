import numpy as np
import pytest

from src import autodiff as ad
from src.autodiff import Tape, Tensor, numerical_gradient, precision
from src.errors import BadHyper, BadMagic, Corrupt, NonFiniteDetected, SchemaMismatch, ShapeMismatch
from src.model_building import (
    FlowSemModel,
    Hyper,
    encoder_digest,
    load_checkpoint,
    parameter_audit,
    parameter_shapes,
    save_checkpoint,
)

SCHEMA_HASH = bytes(range(32))


@pytest.mark.parametrize("hyper", [Hyper(d=10, h=4), Hyper(d=0), Hyper(L=0), Hyper(C=0)])
def test_invalid_hyper(hyper):
    with pytest.raises(BadHyper):
        hyper.validate()


@pytest.mark.parametrize("shared", [False, True])
def test_parameter_count_matches_audit(shared):
    hyper = Hyper(d=16, L=2, h=4, T=10, N=41, C=3, shared_embed=shared)
    model = FlowSemModel.init(0, hyper)
    audit = parameter_audit(hyper)
    assert model.parameter_count() == audit["total"]
    assert set(model.params) == set(parameter_shapes(hyper))


def test_default_architecture_size():
    audit = parameter_audit(Hyper())
    assert audit["blocks"] == 4 * (2 * (4 * 64 * 64 + 4 * 64) + 2 * (8 * 64 * 64 + 5 * 64) + 8 * 64)
    assert audit["embedder"] == 2 * 41 * 64 + 41 * 64 + 10 * 64 + 64


def test_init_is_seeded(tiny_hyper):
    a = FlowSemModel.init(3, tiny_hyper)
    b = FlowSemModel.init(3, tiny_hyper)
    c = FlowSemModel.init(4, tiny_hyper)
    assert encoder_digest(a) == encoder_digest(b)
    assert encoder_digest(a) != encoder_digest(c)
    w = a.params["blocks.0.ffn1.w1"].data
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert np.all(a.params["blocks.0.ln1.g"].data == 1.0)


def test_forward_shapes(tiny_model, tiny_batch, tiny_hyper):
    x, valid = tiny_batch
    E = tiny_model.embed(x, valid, np.zeros(x.shape, dtype=bool))
    assert E.shape == (2, tiny_hyper.T, tiny_hyper.N, tiny_hyper.d)
    H = tiny_model.encode(E, valid)
    assert H.shape == E.shape
    assert tiny_model.reconstruct(H).shape == x.shape
    assert tiny_model.classify(H, valid).shape == (2, tiny_hyper.C)
    assert tiny_model.represent(x, valid).shape == (2, tiny_hyper.d)


def test_padding_rows_do_not_influence_representation(tiny_model, tiny_batch):
    x, valid = tiny_batch
    noisy = x.copy()
    noisy[~valid] = np.random.default_rng(1).random((int((~valid).sum()), x.shape[2]))
    a = tiny_model.represent(x, valid).data
    b = tiny_model.represent(noisy, valid).data
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)


def test_masked_cells_hide_their_values(tiny_model, tiny_batch):
    x, valid = tiny_batch
    mask = np.zeros(x.shape, dtype=bool)
    mask[:, 1, :] = True
    mask[:, :, 2] = True
    changed = x.copy()
    changed[mask] += 0.5
    a = tiny_model.embed(x, valid, mask).data
    b = tiny_model.embed(changed, valid, mask).data
    np.testing.assert_array_equal(a, b)
    token = tiny_model.params["embed.mask_token"].data
    fsu_pos = tiny_model.params["embed.fsu_pos"].data
    time_pos = tiny_model.params["embed.time_pos"].data
    np.testing.assert_allclose(a[0, 1, 0], token + fsu_pos[0] + time_pos[1], rtol=1e-6, atol=1e-7)


def test_shared_embedding_ties_columns():
    model = FlowSemModel.init(0, Hyper(d=8, L=1, h=2, T=4, N=3, C=2, shared_embed=True))
    E = model.value_embeddings(np.full((5, 3), 0.7)).data
    np.testing.assert_array_equal(E[:, 0], E[:, 1])
    np.testing.assert_array_equal(E[:, 1], E[:, 2])


def test_fsu_specific_embedding_separates_columns(tiny_model):
    E = tiny_model.value_embeddings(np.full((5, 3), 0.7)).data
    assert not np.allclose(E[:, 0], E[:, 1])


def test_shape_errors(tiny_model, tiny_batch):
    x, valid = tiny_batch
    with pytest.raises(ShapeMismatch):
        tiny_model.value_embeddings(np.zeros((2, 4, 5)))
    with pytest.raises(ShapeMismatch):
        tiny_model.embed(x[:, :3], valid[:, :3], np.zeros(x[:, :3].shape, dtype=bool))
    with pytest.raises(ShapeMismatch):
        tiny_model.embed(x, valid, np.zeros((2, 4, 2), dtype=bool))


def test_non_finite_input_is_detected(tiny_model, tiny_batch):
    x, valid = tiny_batch
    x = x.copy()
    x[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteDetected):
        tiny_model.encode(tiny_model.embed(x, valid, np.zeros(x.shape, dtype=bool)), valid)


@pytest.mark.parametrize("seed", [11, 12, 13, 14, 15])
def test_block_gradients_match_finite_differences(tiny_hyper, seed):
    with precision(np.float64):
        model = FlowSemModel.init(seed, tiny_hyper)
        rng = np.random.default_rng(seed)
        H = Tensor(rng.normal(size=(2, tiny_hyper.T, tiny_hyper.N, tiny_hyper.d)), requires_grad=True)
        valid = np.array([[True, True, True, False], [True, True, False, False]])
        weights = Tensor(rng.normal(size=H.shape))

        def loss():
            return ad.sum(ad.mul(model.block(H, valid, 0), weights))

        with Tape() as tape:
            tape.backward(loss())
        checked = [H] + [model.params[n] for n in (
            "blocks.0.time_attn.Wq", "blocks.0.fsu_attn.Wv", "blocks.0.ffn2.w1", "blocks.0.ln3.g",
        )]
        for tensor in checked:
            expected = numerical_gradient(lambda: loss().data, tensor, 1e-6)
            np.testing.assert_allclose(tensor.grad, expected, atol=1e-6, rtol=1e-5)


def test_reset_head_keeps_encoder(tiny_model):
    before = encoder_digest(tiny_model)
    tiny_model.reset_head(5, seed=1)
    assert tiny_model.hyper.C == 5
    assert tiny_model.params["head.w2"].shape == (tiny_model.hyper.d, 5)
    assert encoder_digest(tiny_model) == before


def test_freeze_encoder(tiny_model):
    tiny_model.freeze_encoder(True)
    assert not any(t.requires_grad for t in tiny_model.encoder_params().values())
    assert all(t.requires_grad for t in tiny_model.head_params().values())
    tiny_model.freeze_encoder(False)
    assert all(t.requires_grad for t in tiny_model.trainable_params().values())


def _column_values(rng, R=6, T=4):
    values = np.stack([rng.normal(5.0, 2.0, (R, T)), rng.normal(-3.0, 0.5, (R, T)), np.full((R, T), 0.7)], axis=-1)
    valid = np.ones((R, T), dtype=bool)
    valid[:, 3] = False
    values[~valid] = 1e6
    return values, valid


def test_input_scaling_standardizes_columns(tiny_model):
    values, valid = _column_values(np.random.default_rng(1))
    tiny_model.fit_input_scaling(values, valid)
    cells = values[valid]
    np.testing.assert_allclose(tiny_model.params["embed.value_mean"].data, cells.mean(axis=0), rtol=1e-5)
    scale = tiny_model.params["embed.value_scale"].data
    np.testing.assert_allclose(scale[:2], 1.0 / cells[:, :2].std(axis=0), rtol=1e-5)
    assert scale[2] == 1.0
    # a value at its column mean embeds to the bias alone
    at_mean = tiny_model.value_embeddings(cells.mean(axis=0).reshape(1, 1, 3)).data[0, 0]
    np.testing.assert_allclose(at_mean, tiny_model.params["embed.value_b"].data, atol=1e-5)


def test_input_scaling_errors_and_shared_embedding():
    hyper = Hyper(d=8, L=1, h=2, T=4, N=3, C=2, shared_embed=True)
    shared = FlowSemModel.init(0, hyper)
    values, valid = _column_values(np.random.default_rng(2))
    before = encoder_digest(shared)
    shared.fit_input_scaling(values, valid)
    assert "embed.value_mean" not in shared.params
    assert encoder_digest(shared) == before

    model = FlowSemModel.init(0, Hyper(d=8, L=1, h=2, T=4, N=3, C=2))
    with pytest.raises(ShapeMismatch):
        model.fit_input_scaling(values[..., :2], valid)
    with pytest.raises(ShapeMismatch):
        model.fit_input_scaling(values, np.zeros_like(valid))


def test_head_scaling_standardizes_representations(tiny_model):
    rng = np.random.default_rng(3)
    Z = rng.normal(3.0, 0.002, size=(64, tiny_model.hyper.d))
    Z[:, 0] = 1.5
    tiny_model.fit_head_scaling(Z)
    standardized = (Z - tiny_model.params["head.z_mean"].data) * tiny_model.params["head.z_scale"].data
    np.testing.assert_allclose(standardized[:, 1:].std(axis=0), 1.0, rtol=1e-3)
    assert tiny_model.params["head.z_scale"].data[0] == 1.0
    assert "head.z_mean" not in tiny_model.head_params()
    assert not tiny_model.params["head.z_scale"].requires_grad
    with pytest.raises(ShapeMismatch):
        tiny_model.fit_head_scaling(Z[:, :3])


def test_fixed_statistics_are_not_parameters(tiny_model, tiny_hyper):
    statistics = {"embed.value_mean", "embed.value_scale", "head.z_mean", "head.z_scale"}
    assert statistics <= set(tiny_model.params)
    assert not statistics & set(tiny_model.trainable_params())
    assert tiny_model.parameter_count() == parameter_audit(tiny_hyper)["total"]
    tiny_model.freeze_encoder(False)
    assert not any(tiny_model.params[n].requires_grad for n in statistics)


def test_checkpoint_keeps_fixed_statistics(tmp_path, tiny_model, tiny_batch):
    values, valid = _column_values(np.random.default_rng(4))
    tiny_model.fit_input_scaling(values, valid)
    tiny_model.fit_head_scaling(np.random.default_rng(5).normal(size=(10, tiny_model.hyper.d)))
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path, SCHEMA_HASH, 7, ["a", "b", "c"])
    model, _ = load_checkpoint(path, SCHEMA_HASH)
    for name in ("embed.value_mean", "embed.value_scale", "head.z_mean", "head.z_scale"):
        np.testing.assert_array_equal(model.params[name].data, tiny_model.params[name].data)
        assert not model.params[name].requires_grad
    assert encoder_digest(model) == encoder_digest(tiny_model)
    x, valid = tiny_batch
    logits = model.head(model.represent(x, valid)).data
    np.testing.assert_array_equal(logits, tiny_model.head(tiny_model.represent(x, valid)).data)


def test_checkpoint_roundtrip(tmp_path, tiny_model, tiny_batch):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path, SCHEMA_HASH, 7, ["a", "b", "c"], {"shared_embed": False})
    model, header = load_checkpoint(path, SCHEMA_HASH)
    assert header["seed"] == 7
    assert header["columns"] == ["a", "b", "c"]
    assert header["flags"] == {"shared_embed": False}
    assert model.hyper == tiny_model.hyper
    assert encoder_digest(model) == encoder_digest(tiny_model)
    x, valid = tiny_batch
    np.testing.assert_array_equal(model.represent(x, valid).data, tiny_model.represent(x, valid).data)


def test_checkpoint_schema_mismatch(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path, SCHEMA_HASH, 7, ["a", "b", "c"])
    with pytest.raises(SchemaMismatch):
        load_checkpoint(path, bytes(32))
    model, _ = load_checkpoint(path, bytes(32), force=True)
    assert model.parameter_count() == tiny_model.parameter_count()


def test_checkpoint_corruption(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path, SCHEMA_HASH, 7, ["a", "b", "c"])
    blob = path.read_bytes()

    flipped = bytearray(blob)
    flipped[-10] ^= 0x01
    (tmp_path / "flipped.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(Corrupt):
        load_checkpoint(tmp_path / "flipped.ckpt")

    (tmp_path / "short.ckpt").write_bytes(blob[:-100])
    with pytest.raises(Corrupt):
        load_checkpoint(tmp_path / "short.ckpt")

    (tmp_path / "long.ckpt").write_bytes(blob + b"\x00")
    with pytest.raises(Corrupt):
        load_checkpoint(tmp_path / "long.ckpt")

    (tmp_path / "magic.ckpt").write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "magic.ckpt")
