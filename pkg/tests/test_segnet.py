import numpy as np
import pytest

from terraseg.core import Raster
from terraseg.nn import Tensor, ops
from terraseg.raster import FEATURE_CHANNELS
from terraseg.segnet import (TileSet, UNet, UNetConfig, crop_tiles, evaluate_tiles, load_unet, placements,
                             save_unet, train_unet, unet_forward)


def rasters(w, h, rng, label_fn=None):
    chans = {c: rng.random((h, w)) for c in FEATURE_CHANNELS}
    lab = rng.random((h, w)) > 0.5 if label_fn is None else label_fn(chans)
    return (Raster((0, 0), 0.2, w, h, chans),
            Raster((0, 0), 0.2, w, h, {"label": lab.astype(float)}))


def toy_tiles(rng, n, size=16):
    # each tile is split by a random straight edge; channel 0 is the signed distance
    rr, cc = np.mgrid[0:size, 0:size] / size - 0.5
    x = np.zeros((n, size, size, 2))
    for i in range(n):
        a = rng.uniform(0, 2 * np.pi)
        x[i, ..., 0] = np.cos(a) * rr + np.sin(a) * cc + rng.uniform(-0.2, 0.2)
    x[..., 1] = rng.normal(size=(n, size, size)) * 0.1
    y = (x[..., 0] > 0).astype(float)
    m = np.ones(y.shape, bool)
    m[:, :2] = False
    return TileSet(x, y, m, [(i, 0) for i in range(n)])


def test_shapes_k3():
    model = UNet(8, k=3, c0=16)
    logits, enc, dec = model(Tensor(np.zeros((1, 96, 96, 8))), "eval", return_features=True)
    assert enc[3].shape == (1, 12, 12, 128)
    assert logits.shape == (1, 96, 96, 1)
    assert [e.shape[-1] for e in enc] == [16, 32, 64, 128]


def test_shapes_k5_bottleneck():
    model = UNet(8, k=5, c0=2)
    logits, enc, _ = model(Tensor(np.zeros((1, 96, 96, 8))), "eval", return_features=True)
    assert enc[5].shape == (1, 3, 3, 64)
    assert logits.shape == (1, 96, 96, 1)


@pytest.mark.parametrize("k,size", [(1, 6), (2, 12), (3, 24)])
def test_output_matches_input_size(k, size):
    out = unet_forward(UNet(3, k=k, c0=2), np.zeros((size, 2 * size, 3)))
    assert out.shape == (size, 2 * size, 1)


def test_indivisible_input_rejected():
    with pytest.raises(ValueError):
        unet_forward(UNet(3, k=3, c0=2), np.zeros((20, 24, 3)))


def test_zero_input_constant_logits():
    out = unet_forward(UNet(8, k=3, c0=4, seed=2), np.zeros((32, 32, 8)))
    assert np.ptp(out) < 1e-9


def test_parameter_ratio_k5_over_k3():
    ratio = UNet(8, k=5, c0=4).num_parameters() / UNet(8, k=3, c0=4).num_parameters()
    assert 15 <= ratio <= 25


def test_crop_tile_counts(rng):
    f, l = rasters(96, 96, rng)
    assert len(crop_tiles(f, l, 96, 96)) == 1
    f, l = rasters(192, 96, rng)
    ts = crop_tiles(f, l, 96, 48)
    assert len(ts) == 3 and ts.tensors.shape == (3, 96, 96, 8)
    f, l = rasters(50, 50, rng)
    with pytest.raises(ValueError):
        crop_tiles(f, l, 96, 48)


def test_crop_drops_unlabelled_and_masks_nodata(rng):
    f, l = rasters(64, 32, rng)
    lab = l.channels["label"]
    lab[:, :32] = -9999.0
    lab[0, 40] = -9999.0
    ts = crop_tiles(f, l, 32, 32)
    assert ts.origins == [(0, 32)]
    assert not ts.masks[0, 0, 8] and ts.masks[0].sum() == 32 * 32 - 1


def test_placements_clamp():
    assert placements(97, 96, 48) == [0, 1]
    assert placements(144, 96, 48) == [0, 48]


def test_masked_cells_contribute_no_gradient(rng):
    model = UNet(2, k=1, c0=2, seed=0)
    x = Tensor(rng.normal(size=(1, 8, 8, 2)))
    y = (rng.random((1, 8, 8, 1)) > 0.5).astype(float)
    m = rng.random((1, 8, 8, 1)) > 0.4

    def grads(labels):
        model.zero_grad()
        ops.focal_loss(model(x, "train"), labels, m).backward()
        return {k: p.grad.copy() for k, p in model.parameters().items()}

    a = grads(y)
    y2 = np.where(m, y, 1 - y)
    b = grads(y2)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_patience_zero_returns_first_epoch(rng):
    hist = []
    cfg = UNetConfig(k=2, c0=2, epochs=5, patience=0, batch_size=2)
    train_unet(toy_tiles(rng, 4), toy_tiles(rng, 2), cfg, history=hist)
    assert len(hist) == 1


def test_training_independent_of_tile_order(rng):
    tr, va = toy_tiles(rng, 6), toy_tiles(rng, 2)
    perm = np.random.default_rng(9).permutation(6)
    shuffled = TileSet(tr.tensors[perm], tr.labels[perm], tr.masks[perm], [tr.origins[i] for i in perm])
    cfg = UNetConfig(k=2, c0=2, epochs=3, batch_size=2, seed=4)
    a = train_unet(tr, va, cfg)
    b = train_unet(shuffled, va, cfg)
    np.testing.assert_array_equal(evaluate_tiles(a, va), evaluate_tiles(b, va))


def test_training_learns_toy_task(rng):
    tr, va = toy_tiles(rng, 8), toy_tiles(rng, 3)
    model = train_unet(tr, va, UNetConfig(k=1, c0=4, epochs=20, patience=20, batch_size=2, lr=1e-2))
    assert model.best_score > 0.8


def test_empty_sets_rejected(rng):
    with pytest.raises(ValueError):
        train_unet(toy_tiles(rng, 0), toy_tiles(rng, 1), UNetConfig(k=1, c0=2))


def test_unet_checkpoint_roundtrip(tmp_path, rng):
    model = UNet(3, k=2, c0=2, seed=1)
    save_unet(model, tmp_path / "u.tsnn", {"channels": ["z", "r", "g"]})
    back = load_unet(tmp_path / "u.tsnn")
    assert back.channels == ["z", "r", "g"]
    x = rng.normal(size=(8, 8, 3))
    np.testing.assert_array_equal(unet_forward(back, x), unet_forward(model, x))
