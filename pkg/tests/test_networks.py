import numpy as np
import pytest
import torch
from torch.nn import functional as F

from plasmaseg.core import EmptyDatasetError, ShapeError
from plasmaseg.cytoplasm_net import (
    AttentionDeeplab,
    AttentionDeeplabConfig,
    ChannelAttention,
    CrossScaleFusion,
    build_patches,
    cytoplasm_forward,
    load_cytoplasm,
    train_cytoplasm_scale,
)
from plasmaseg.data_io import DatasetRecord, SyntheticSceneSpec, generate_synthetic_scene
from plasmaseg.nucleus_net import (
    UNet,
    UNetConfig,
    load_nucleus,
    nucleus_forward,
    predict_nucleus,
    train_nucleus,
)
from plasmaseg.training import CheckpointError, TrainSpec, parameter_digest

MINI_UNET = UNetConfig(depth=2, base_channels=2)
MINI_DEEPLAB = AttentionDeeplabConfig(
    encoder_channels=(2, 2, 2), aspp_rates=(1, 2), aspp_channels=2,
    attention_reduction=2, low_level_channels=2, decoder_channels=2,
)


def _zero_grad_groups(model, x, y):
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    opt.zero_grad()
    F.cross_entropy(model(x), y).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or p.grad.abs().sum() == 0]
    opt.step()
    return dead


def finite_difference_errors(model, x, y, n_params=20, eps=1e-6, seed=0):
    """Relative error of autograd vs central differences on random entries."""
    model = model.double().train()
    x = x.double()
    loss = F.cross_entropy(model(x), y)
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params)
    gen = np.random.default_rng(seed)
    errors = []
    for _ in range(n_params):
        k = int(gen.integers(len(params)))
        p, g = params[k], grads[k]
        idx = tuple(int(gen.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = F.cross_entropy(model(x), y).item()
            p[idx] = orig - eps
            down = F.cross_entropy(model(x), y).item()
            p[idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = g[idx].item()
        errors.append(abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-7))
    return errors


# -- U-Net --------------------------------------------------------------------------


def test_unet_shape_and_softmax():
    torch.manual_seed(0)
    model = UNet(UNetConfig(depth=4, base_channels=4)).eval()
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3)).astype(np.uint8)
    logits = nucleus_forward(model, img)
    assert logits.shape == (2, 64, 64)
    sums = torch.softmax(logits, 0).sum(0)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


def test_unet_rejects_indivisible():
    model = UNet(UNetConfig(depth=4, base_channels=4))
    with pytest.raises(ShapeError, match="60"):
        nucleus_forward(model, np.zeros((60, 60, 3), np.uint8))


def test_predict_nucleus_pads_and_crops():
    torch.manual_seed(0)
    model = UNet(UNetConfig(depth=4, base_channels=4))
    prob = predict_nucleus(model, np.random.default_rng(1).integers(0, 256, (70, 70, 3)).astype(np.uint8))
    assert prob.shape == (70, 70)
    assert prob.min() >= 0 and prob.max() <= 1


def test_unet_gradient_flow():
    torch.manual_seed(0)
    model = UNet(UNetConfig(depth=3, base_channels=4))
    x = torch.rand(2, 3, 32, 32)
    y = (torch.rand(2, 32, 32) > 0.5).long()
    assert _zero_grad_groups(model, x, y) == []


def test_unet_finite_differences():
    torch.manual_seed(0)
    model = UNet(MINI_UNET)
    x = torch.rand(2, 3, 8, 8)
    y = (torch.rand(2, 8, 8) > 0.5).long()
    errors = finite_difference_errors(model, x, y)
    assert max(errors) < 1e-3, errors


def test_train_nucleus_validation():
    with pytest.raises(ValueError):
        TrainSpec(epochs=0)
    with pytest.raises(ValueError):
        TrainSpec(learning_rate=0)
    empty = DatasetRecord(np.zeros((64, 64, 3), np.uint8), [], "bg")
    with pytest.raises(EmptyDatasetError):
        train_nucleus([empty, empty], TrainSpec(epochs=1))
    with pytest.raises(EmptyDatasetError):
        train_nucleus([], TrainSpec(epochs=1))


@pytest.fixture(scope="module")
def trained_nucleus(small_records, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("ckpt") / "nucleus.pt"
    spec = TrainSpec(epochs=30, learning_rate=1e-3, batch_size=4, rng_seed=0, checkpoint_path=str(ckpt))
    model, history = train_nucleus(small_records, spec, UNetConfig(depth=4, base_channels=8))
    return model, history, ckpt


def test_train_nucleus_loss_decreases(trained_nucleus):
    _, history, _ = trained_nucleus
    assert len(history) == 30 and np.all(np.isfinite(history))
    assert history[-1] < history[0]


def test_trained_nucleus_separates(trained_nucleus, small_records):
    model, _, _ = trained_nucleus
    rec = small_records[0]
    prob = predict_nucleus(model, rec.image)
    inside = np.zeros(prob.shape, bool)
    for nuc, _ in rec.gt_instances:
        inside |= nuc.astype(bool)
    assert prob[inside].mean() > prob[~inside].mean()


def test_nucleus_checkpoint_roundtrip(trained_nucleus, small_records):
    model, _, ckpt = trained_nucleus
    loaded = load_nucleus(ckpt, UNetConfig(depth=4, base_channels=8))
    img = small_records[1].image
    assert np.array_equal(predict_nucleus(model, img), predict_nucleus(loaded, img))
    with pytest.raises(CheckpointError):
        load_nucleus(ckpt, UNetConfig(depth=4, base_channels=16))
    with pytest.raises(CheckpointError):
        load_cytoplasm(ckpt)


def test_training_order_changes_history_not_shapes(small_records):
    spec = TrainSpec(epochs=2, learning_rate=1e-3, batch_size=2, rng_seed=3)
    cfg = UNetConfig(depth=2, base_channels=4)
    m1, h1 = train_nucleus(small_records[:4], spec, cfg)
    m2, h2 = train_nucleus(small_records[:4][::-1], spec, cfg)
    m3, h3 = train_nucleus(small_records[:4], spec, cfg)
    assert h1 == h3
    assert h1 != h2
    img = small_records[0].image
    assert predict_nucleus(m1, img).shape == predict_nucleus(m2, img).shape == (64, 64)


# -- attention deeplab ------------------------------------------------------------


def test_aspp_branch_shapes():
    model = AttentionDeeplab().eval()
    feats = torch.rand(1, 64, 8, 8)
    maps = model.aspp_forward(feats)
    assert len(maps) == 4
    assert {tuple(m.shape) for m in maps} == {(1, 32, 8, 8)}


def test_aspp_rate_one_is_plain_conv():
    model = AttentionDeeplab().eval()
    conv = model.aspp[0][0]
    assert conv.dilation == (1, 1) and conv.kernel_size == (3, 3)
    feats = torch.rand(1, 64, 8, 8)
    plain = F.conv2d(feats, conv.weight, padding=1)
    assert torch.allclose(conv(feats), plain, atol=1e-6)


def test_aspp_rate_does_not_change_shape():
    feats = torch.rand(1, 8, 16, 16)
    shapes = set()
    for rates in [(1, 2), (1, 6), (3, 12), (6, 24)]:
        m = AttentionDeeplab(AttentionDeeplabConfig(encoder_channels=(4, 4, 8), aspp_rates=rates, aspp_channels=4))
        shapes |= {tuple(t.shape) for t in m.aspp_forward(feats)}
    assert shapes == {(1, 4, 16, 16)}


def test_channel_attention_saturation():
    att = ChannelAttention(8, 4)
    x = torch.randn(2, 8, 5, 5)
    with torch.no_grad():
        for lin in (att.fc1, att.fc2):
            lin.weight.zero_()
            lin.bias.zero_()
        att.fc2.bias.fill_(20.0)
        assert torch.allclose(att(x), x, atol=1e-6)
        att.fc2.bias.fill_(-20.0)
        assert att(x).abs().max() < 1e-6


def test_channel_attention_descriptor_linear():
    x = torch.randn(1, 6, 7, 7)
    d1, d2 = ChannelAttention.descriptor(x), ChannelAttention.descriptor(2 * x)
    assert torch.allclose(d2, 2 * d1, atol=1e-6)
    att = ChannelAttention(6, 2)
    w = att.weights(x)
    assert ((w > 0) & (w < 1)).all()
    assert att(x).shape == x.shape


def test_fusion_identical_branches_averaging():
    torch.manual_seed(0)
    fusion = CrossScaleFusion(4, 5, n_branches=3, spatial=3)
    w2d = torch.randn(5, 4, 3, 3)
    fusion.init_averaging(w2d)
    x = torch.randn(1, 4, 6, 6)
    out = fusion([x, x, x])
    assert torch.allclose(out, F.conv2d(x, w2d, padding=1), atol=1e-5)


def test_fusion_zero_branch_uses_first_slice():
    torch.manual_seed(1)
    fusion = CrossScaleFusion(3, 3, n_branches=2, spatial=3)
    x = torch.randn(1, 3, 5, 5)
    out = fusion([x, torch.zeros_like(x)])
    expected = F.conv2d(x, fusion.conv.weight[:, :, 0], padding=1)
    assert torch.allclose(out, expected, atol=1e-5)


def test_fusion_shape_mismatch():
    fusion = CrossScaleFusion(3, 3, n_branches=2)
    with pytest.raises(ShapeError):
        fusion([torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 5, 5)])


def test_fusion_short_kernel_averages():
    fusion = CrossScaleFusion(2, 2, n_branches=4, scale_kernel=2, spatial=1)
    out = fusion([torch.randn(1, 2, 3, 3) for _ in range(4)])
    assert out.shape == (1, 2, 3, 3)


@pytest.mark.parametrize("side", [64, 128])
def test_cytoplasm_forward_shape_softmax(side):
    torch.manual_seed(0)
    model = AttentionDeeplab().eval()
    crop = np.random.default_rng(0).random((side, side, 4)).astype(np.float32) * 255
    crop[:, :, 3] = crop[:, :, 3] > 127
    logits = cytoplasm_forward(model, crop)
    assert logits.shape == (2, side, side)
    sums = torch.softmax(logits, 0).sum(0)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


def test_cytoplasm_forward_256():
    model = AttentionDeeplab().eval()
    with torch.no_grad():
        assert cytoplasm_forward(model, torch.rand(1, 4, 256, 256)).shape == (1, 2, 256, 256)


def test_cytoplasm_consumes_nucleus_channel():
    torch.manual_seed(0)
    model = AttentionDeeplab().eval()
    crop = np.random.default_rng(2).random((64, 64, 4)).astype(np.float32) * 255
    crop[:, :, 3] = 0
    crop[24:40, 24:40, 3] = 1
    with torch.no_grad():
        a = cytoplasm_forward(model, crop)
        crop[:, :, 3] = 0
        b = cytoplasm_forward(model, crop)
    assert (a - b).abs().max() > 0


def test_cytoplasm_shape_errors():
    model = AttentionDeeplab()
    with pytest.raises(ShapeError):
        model(torch.rand(1, 3, 64, 64))
    with pytest.raises(ShapeError):
        model(torch.rand(1, 4, 64, 60))


def test_cytoplasm_config_validation():
    with pytest.raises(ValueError):
        AttentionDeeplabConfig(aspp_rates=(6,))
    with pytest.raises(ValueError):
        AttentionDeeplabConfig(aspp_rates=(1, 12, 6))
    with pytest.raises(ValueError):
        AttentionDeeplabConfig(aspp_rates=(0, 6))


def test_cytoplasm_gradient_flow():
    torch.manual_seed(0)
    model = AttentionDeeplab()
    x = torch.rand(2, 4, 64, 64)
    y = (torch.rand(2, 64, 64) > 0.5).long()
    dead = _zero_grad_groups(model, x, y)
    assert dead == []
    names = [n for n, _ in model.named_parameters()]
    assert any(n.startswith("attention.") for n in names)
    assert any(n.startswith("fusion.") for n in names)


def test_cytoplasm_finite_differences():
    torch.manual_seed(0)
    model = AttentionDeeplab(MINI_DEEPLAB)
    x = torch.rand(2, 4, 16, 16)
    y = (torch.rand(2, 16, 16) > 0.5).long()
    errors = finite_difference_errors(model, x, y, seed=1)
    assert max(errors) < 1e-3, errors


@pytest.fixture(scope="module")
def patch_records():
    return [
        generate_synthetic_scene(
            SyntheticSceneSpec(image_side=64, n_cells=3, nucleus_radius=(4.0, 6.0), rng_seed=100 + s),
            sample_id=f"p{s}",
        )
        for s in range(14)
    ]


def test_build_patches_count(patch_records):
    x, y = build_patches(patch_records, 2.0, 32)
    assert x.shape == (42, 4, 32, 32) and y.shape == (42, 32, 32)
    assert set(torch.unique(x[:, 3]).tolist()) <= {0.0, 1.0}
    assert x[:, :3].max() <= 1.0


def test_train_cytoplasm_loss_decreases_and_scales_differ(patch_records, tmp_path):
    cfg = AttentionDeeplabConfig(encoder_channels=(8, 16, 32), aspp_channels=16)
    spec = TrainSpec(epochs=30, learning_rate=1e-3, batch_size=8, rng_seed=0,
                     checkpoint_path=str(tmp_path / "c2.pt"))
    m2, h2 = train_cytoplasm_scale(patch_records, 2.0, spec, cfg, input_side=32)
    assert all(np.isfinite(h2)) and h2[-1] < h2[0]
    spec3 = TrainSpec(epochs=2, learning_rate=1e-3, batch_size=8, rng_seed=0,
                      checkpoint_path=str(tmp_path / "c3.pt"))
    m3, _ = train_cytoplasm_scale(patch_records, 3.0, spec3, cfg, input_side=32)
    m2b, _ = train_cytoplasm_scale(patch_records, 2.0, spec3, cfg, input_side=32)
    assert parameter_digest(m3) != parameter_digest(m2b)

    loaded, scale, side = load_cytoplasm(tmp_path / "c2.pt", 2.0, cfg, allowed_scales=(1.0, 2.0))
    assert (scale, side) == (2.0, 32)
    assert parameter_digest(loaded) == parameter_digest(m2)
    with pytest.raises(CheckpointError):
        load_cytoplasm(tmp_path / "c2.pt", allowed_scales=(1.0, 3.0))
    with pytest.raises(CheckpointError):
        load_cytoplasm(tmp_path / "c2.pt", scale=3.0)

    # channel attention swapped for identity: the gate must matter
    x, y = build_patches(patch_records[:4], 2.0, 32)
    with torch.no_grad():
        base = F.cross_entropy(m2(x), y).item()
        saved = m2.attention
        m2.attention = torch.nn.ModuleList(torch.nn.Identity() for _ in saved)
        ablated = F.cross_entropy(m2(x), y).item()
        m2.attention = saved
    print(f"channel-attention ablation: loss {base:.4f} -> {ablated:.4f}")
    assert ablated != base


def test_train_cytoplasm_empty():
    empty = DatasetRecord(np.zeros((32, 32, 3), np.uint8), [], "e")
    with pytest.raises(EmptyDatasetError):
        train_cytoplasm_scale([empty], 2.0, TrainSpec(epochs=1))
