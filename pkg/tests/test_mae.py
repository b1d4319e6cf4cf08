import numpy as np
import pytest
import torch
import torch.nn.functional as F

from maskel.errors import ConfigError, ShapeError
from maskel.layers import count_parameters
from maskel.mae import (
    MAE,
    LightDecoder,
    MAEConfig,
    ViTEncoder,
    encode_visible,
    load_encoder,
    load_mae,
    mae_loss,
    mae_reconstruct,
    num_masked,
    patchify,
    random_mask,
    reconstruct,
    reconstruction_loss,
    save_encoder,
    save_mae,
    train_stage1,
    unpatchify,
)
from maskel.oracles import finite_difference_check


def test_patch_counts():
    seq = patchify(np.zeros((256, 256)), 16)
    assert seq.tokens.shape == (1, 256, 256)
    assert patchify(np.zeros((64, 64)), 16).num_patches == 16
    assert patchify(np.zeros((64, 64)), 8).num_patches == 64


def test_patch_row_major_order():
    img = np.arange(16.0).reshape(4, 4)
    seq = patchify(img, 2)
    assert seq.tokens[0, 0].tolist() == [0, 1, 4, 5]
    assert seq.tokens[0, 1].tolist() == [2, 3, 6, 7]
    assert seq.tokens[0, 2].tolist() == [8, 9, 12, 13]


def test_unpatchify_inverts():
    x = torch.rand(3, 1, 64, 64, dtype=torch.float64)
    seq = patchify(x, 8)
    assert torch.equal(unpatchify(seq.tokens, 8, (64, 64)), x)


def test_indivisible_patch_rejected():
    with pytest.raises(ShapeError):
        patchify(np.zeros((30, 30)), 8)


def test_masking_counts():
    seq = patchify(np.zeros((256, 256)), 16)
    assert random_mask(seq, 0.0, seed=0).masked.shape[1] == 0
    m = random_mask(seq, 0.75, seed=0)
    assert m.masked.shape[1] == 192 and m.visible.shape[1] == 64
    assert random_mask(seq, 0.999, seed=0).visible.shape[1] == 1
    assert num_masked(0.5, 3) == 2  # halves round up


def test_partition_is_exact():
    seq = patchify(np.zeros((4, 64, 64)), 8)
    m = random_mask(seq, 0.6, seed=3)
    for v, k in zip(m.visible, m.masked):
        assert sorted(v.tolist() + k.tolist()) == list(range(64))


@pytest.mark.parametrize("ratio", [-0.1, 1.0])
def test_ratio_out_of_range(ratio):
    with pytest.raises(ConfigError):
        random_mask(patchify(np.zeros((16, 16)), 4), ratio)


def test_mask_deterministic_in_seed():
    seq = patchify(np.zeros((64, 64)), 8)
    assert torch.equal(random_mask(seq, 0.75, seed=4).masked, random_mask(seq, 0.75, seed=4).masked)
    assert not torch.equal(random_mask(seq, 0.75, seed=4).masked, random_mask(seq, 0.75, seed=5).masked)


def test_mask_uniformity():
    seq = patchify(np.zeros((64, 64)), 16)
    n, trials, ratio = 16, 10_000, 0.75
    counts = np.zeros(n)
    for s in range(trials):
        counts[random_mask(seq, ratio, seed=s).masked[0].numpy()] += 1
    freq = counts / trials
    sigma = np.sqrt(ratio * (1 - ratio) / trials)
    assert np.all(np.abs(freq - ratio) <= 3 * sigma)


@pytest.fixture(scope="module")
def micro_encoder():
    torch.manual_seed(0)
    return ViTEncoder(img_size=16, patch=4, dim=16, depth=2, heads=2).double().eval()


def test_encode_lengths(micro_encoder):
    x = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    seq = patchify(x, 4)
    assert encode_visible(micro_encoder, random_mask(seq, 0.0, seed=0)).shape == (2, 16, 16)
    assert encode_visible(micro_encoder, random_mask(seq, 0.999, seed=0)).shape == (2, 1, 16)
    with pytest.raises(ConfigError):
        encode_visible(micro_encoder, seq)


def test_permutation_equivariance(micro_encoder):
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    seq = random_mask(patchify(x, 4), 0.5, seed=1)
    vis = seq.visible
    tokens = seq.tokens[0, vis[0]][None]
    out = micro_encoder.forward_tokens(tokens, vis)
    perm = torch.randperm(vis.shape[1], generator=torch.Generator().manual_seed(0))
    out_p = micro_encoder.forward_tokens(tokens[:, perm], vis[:, perm])
    torch.testing.assert_close(out_p, out[:, perm], rtol=1e-12, atol=1e-12)


def test_positions_matter(micro_encoder):
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    seq = patchify(x, 4)
    pos = seq.positions[None]
    a = micro_encoder.forward_tokens(seq.tokens, pos)
    b = micro_encoder.forward_tokens(seq.tokens, pos.flip(1))
    assert not torch.allclose(a, b)


def test_reconstruct_shape_and_errors():
    torch.manual_seed(0)
    dec = LightDecoder(enc_dim=16, dim=16, depth=1, heads=2, patch=4, grid=4).double()
    lat = torch.zeros(2, 16, 16, dtype=torch.float64)
    vis = torch.arange(16).expand(2, -1)
    out = reconstruct(dec, lat, vis)
    assert out.shape == (2, 1, 16, 16) and torch.isfinite(out).all()
    with pytest.raises(ShapeError):
        reconstruct(dec, lat[:, :5], vis)
    with pytest.raises(ShapeError):
        reconstruct(dec, lat, vis + 1)


def test_mask_token_is_shared():
    torch.manual_seed(0)
    dec = LightDecoder(enc_dim=8, dim=8, depth=0, heads=2, patch=2, grid=2).double()
    # with no blocks the decoder is position-wise: masked slots differ only by position
    lat = torch.zeros(1, 1, 8, dtype=torch.float64)
    out = dec(lat, torch.tensor([[0]]))
    h = dec.mask_token + dec.pos_embed.double()
    torch.testing.assert_close(out[0, 1:], F.leaky_relu(dec.head(dec.norm(h)), dec.LEAK)[1:])


def test_reconstruction_loss_examples():
    a = torch.tensor([[[[0.5, 0.5]]]], dtype=torch.float64)
    b = torch.tensor([[[[0.0, 1.0]]]], dtype=torch.float64)
    assert reconstruction_loss(a, b, "sum").item() == 0.5
    assert reconstruction_loss(a, b, "mean").item() == 0.25
    assert reconstruction_loss(a, a, "sum").item() == 0.0
    with pytest.raises(ShapeError):
        reconstruction_loss(a, b[..., :1])


def test_reconstruction_loss_nonnegative_zero_iff_equal():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = torch.from_numpy(rng.random((1, 1, 4, 4)))
        b = a.clone()
        b[0, 0, rng.integers(4), rng.integers(4)] += 1e-3
        assert reconstruction_loss(a, b).item() > 0
        assert reconstruction_loss(a, a).item() == 0


def test_masked_only_weighting():
    torch.manual_seed(0)
    model = MAE(img_size=16, patch=4, dim=16, depth=1, heads=2, decoder_dim=16, decoder_depth=1,
                decoder_heads=2).double()
    x = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    seq = random_mask(patchify(x, 4), 0.5, seed=0)
    recon = reconstruct(model.decoder, encode_visible(model.encoder, seq), seq.visible)
    sq = ((recon - x) ** 2).detach()
    tok = patchify(sq, 4).tokens
    expect = torch.stack([tok[i, seq.masked[i]].sum() for i in range(2)]).sum() / (2 * 8 * 16)
    got = mae_loss(model, x, seq, masked_only=True).item()
    assert got == pytest.approx(expect.item(), rel=1e-12)


def test_micro_mae_gradient():
    torch.manual_seed(0)
    model = MAE(img_size=16, patch=4, dim=16, depth=2, heads=2, decoder_dim=16, decoder_depth=1,
                decoder_heads=2).double()
    x = torch.rand(2, 1, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    seq = random_mask(patchify(x, 4), 0.5, seed=2)
    res = finite_difference_check(lambda: mae_loss(model, x, seq), model.parameters(), n=100)
    assert len(res) == 100
    assert max(r[2] for r in res) <= 1e-4


def test_feature_taps():
    enc = ViTEncoder()
    assert enc.feature_blocks == [2, 4, 6, 8]
    assert count_parameters(enc) < 2_000_000


def _cfg(**kw):
    base = dict(img_size=16, patch=4, dim=16, depth=2, heads=2, decoder_dim=16, decoder_depth=1,
                decoder_heads=2, steps=30, batch_size=4, warmup=5, log_every=0)
    base.update(kw)
    return MAEConfig(**base)


def test_training_writes_encoder(tmp_path):
    data = np.random.default_rng(0).random((8, 16, 16))
    res = train_stage1(data, _cfg(out_dir=str(tmp_path)))
    assert len(res.losses) == 30
    assert np.mean(res.losses[-5:]) < np.mean(res.losses[:5])
    enc = load_encoder(tmp_path / "mae_encoder.ckpt")
    x = torch.rand(2, 1, 16, 16)
    torch.testing.assert_close(enc.eval()(x), res.encoder.eval()(x))
    model = load_mae(tmp_path / "mae.ckpt")
    np.testing.assert_array_equal(mae_reconstruct(model, data[:2]), mae_reconstruct(res.model, data[:2]))


def test_training_deterministic():
    data = np.random.default_rng(0).random((8, 16, 16))
    a = train_stage1(data, _cfg(dtype="float64", steps=10))
    b = train_stage1(data, _cfg(dtype="float64", steps=10))
    np.testing.assert_allclose(a.losses, b.losses, rtol=1e-6)


def test_training_wrong_size():
    with pytest.raises(ShapeError):
        train_stage1(np.zeros((2, 32, 32)), _cfg())


def test_encoder_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    enc = ViTEncoder(img_size=16, patch=4, dim=16, depth=2, heads=2)
    save_encoder(tmp_path / "e.ckpt", enc)
    loaded = load_encoder(tmp_path / "e.ckpt")
    assert loaded.arch() == enc.arch()
    for (k, v), (k2, v2) in zip(enc.state_dict().items(), loaded.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)


def test_reconstruct_output_in_unit_range():
    torch.manual_seed(0)
    model = MAE(img_size=16, patch=4, dim=16, depth=1, heads=2, decoder_dim=16, decoder_depth=1, decoder_heads=2)
    out = mae_reconstruct(model, np.random.default_rng(0).random((3, 16, 16)), ratio=0.5)
    assert out.shape == (3, 16, 16) and out.min() >= 0 and out.max() <= 1


def test_save_mae_records_config(tmp_path):
    cfg = _cfg()
    torch.manual_seed(0)
    model = MAE(16, 4, 16, 2, 2, 16, 1, 2)
    save_mae(tmp_path / "m.ckpt", model, cfg)
    from maskel.checkpoint import read_header
    assert read_header(tmp_path / "m.ckpt")["meta"]["config"]["ratio"] == 0.75
