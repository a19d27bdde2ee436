import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from terraseg import harmonize as H
from terraseg.core import Polygon, PolygonSet, ValidationError, contains
from terraseg.harmonize import (CellInfo, EmbedBatch, EncoderModel, HarmonizeConfig, combine_parts, emd_1d,
                                embed_loss, encode_cloud, encoder_derivative, intersection_fraction,
                                load_encoder, save_encoder, select_training_cells)
from terraseg.nn import Tensor
from terraseg.synth import oracle_emd

from conftest import make_cloud

CELL = (0.0, 0.0, 10.0, 10.0)


# --------------------------------------------------------------------------
# intersection fraction


def test_fraction_full_and_empty():
    assert intersection_fraction(CELL, PolygonSet((Polygon.rect(-5, -5, 20, 20),))) == 1.0
    assert intersection_fraction(CELL, PolygonSet((Polygon.rect(20, 20, 30, 30),))) == 0.0
    assert intersection_fraction(CELL, PolygonSet()) == 0.0


def test_fraction_west_half_exact_and_monte_carlo(rng):
    polys = PolygonSet((Polygon.rect(-3, -1, 5, 12),))
    assert intersection_fraction(CELL, polys) == pytest.approx(0.5, abs=1e-9)
    tri = Polygon(np.array([[-2.0, -2.0], [14.0, 3.0], [4.0, 13.0]]),
                  (np.array([[3.0, 3.0], [6.0, 4.0], [4.0, 7.0]]),))
    pts = rng.random((1_000_000, 2)) * 10
    mc = contains(tri, pts[:, 0], pts[:, 1]).mean()
    assert intersection_fraction(CELL, PolygonSet((tri,))) == pytest.approx(mc, abs=1e-3)


def test_fraction_overlap_clamped_and_degenerate():
    polys = PolygonSet((Polygon.rect(0, 0, 10, 10), Polygon.rect(0, 0, 10, 10)))
    assert intersection_fraction(CELL, polys) == 1.0
    with pytest.raises(ValueError):
        intersection_fraction((0, 0, 0, 5), polys)


# --------------------------------------------------------------------------
# cell selection


def cell(k, sensors, road, fld):
    return CellInfo((k, 0), (k, 0, k + 1, 1), frozenset(sensors), road, fld)


def test_multi_sensor_and_sparse_cells_dropped():
    cells = [cell(0, {0}, 100, 100), cell(1, {0, 1}, 500, 500), cell(2, {1}, 100, 100), cell(3, {1}, 10, 900)]
    got = select_training_cells(cells, min_points=50)
    assert [c.key[0] for c in got[0]] == [0]
    assert [c.key[0] for c in got[1]] == [2]


def test_identical_buckets_keep_everything():
    cells = [cell(k, {k % 2}, 60 + 10 * (k // 2), 80) for k in range(6)]
    got = select_training_cells(cells)
    assert sum(len(v) for v in got.values()) == 6


def test_large_bucket_subsampled():
    cells = [cell(0, {0}, 100, 100)] + [cell(k, {1}, 100, 100) for k in range(1, 11)]
    got = select_training_cells(cells)
    assert sum(c.n_road for c in got[1]) <= 110
    assert sum(c.n_road for c in got[0]) == 100


def test_empty_bucket_is_error():
    with pytest.raises(ValidationError):
        select_training_cells([cell(0, {0}, 100, 100), cell(1, {1}, 10, 10)])


# --------------------------------------------------------------------------
# EMD


def test_emd_examples(rng):
    u = rng.random(20)
    assert emd_1d(u, u) == 0
    assert emd_1d(u, u + 1) == pytest.approx(1.0)
    assert emd_1d([0, 0], [0, 4]) == 2.0 == oracle_emd([0, 0], [0, 4])
    with pytest.raises(ValueError):
        emd_1d([1.0], [1.0, 2.0])


def test_emd_matches_matching_oracle(rng):
    for n in range(1, 7):
        u, v = rng.normal(size=n), rng.normal(size=n)
        assert emd_1d(u, v) == pytest.approx(oracle_emd(u, v), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12).flatmap(lambda n: st.tuples(*[st.lists(st.floats(-100, 100), min_size=n, max_size=n)
                                                          for _ in range(3)])))
def test_emd_is_metric(triple):
    a, b, c = (np.array(t) for t in triple)
    assert emd_1d(a, b) == pytest.approx(emd_1d(b, a))
    assert emd_1d(a, b) <= emd_1d(a, c) + emd_1d(c, b) + 1e-9
    assert (emd_1d(a, b) == 0) == np.array_equal(np.sort(a), np.sort(b))


# --------------------------------------------------------------------------
# encoder model


class LinearStub:
    """E(x) = s * x, a stand-in with the interface embed_loss needs."""

    def __init__(self, slope, n_contexts=2):
        self.slope, self.n_contexts = slope, n_contexts
        self.w = Tensor(np.array(0.5), requires_grad=True)
        self.b = Tensor(np.array(0.1), requires_grad=True)

    def forward_with_derivative(self, x, ctx):
        x = Tensor(np.asarray(x, dtype=np.float64))
        return x * self.slope, Tensor(np.full(x.shape, float(self.slope)))


def batch(rng, n=200, same=False):
    x = rng.random((2, n))
    if same:
        x[1] = x[0]
    M = np.ones((2, n))
    M[:, -n // 5:] = 0
    C = np.zeros((2, n))
    C[:, :n // 6] = 1
    return EmbedBatch(x, M, C)


def test_identity_on_identical_batches(rng):
    parts = embed_loss(batch(rng, same=True), LinearStub(1.0))[1]
    assert parts["emd_all"] == parts["emd_road"] == parts["emd_field"] == 0.0
    assert parts["grad"] == 0.0


def test_contracting_grad_part(rng):
    assert embed_loss(batch(rng), LinearStub(0.1))[1]["grad"] == pytest.approx(-np.log(0.1), abs=1e-12)


def test_total_is_weighted_sum_of_parts(rng):
    model = EncoderModel([0, 1], 1.0, seed=3)
    b = batch(rng)
    cfg = HarmonizeConfig()
    total, parts = embed_loss(b, model, cfg)
    assert total.item() == pytest.approx(combine_parts(parts, cfg), abs=1e-12)
    want = 1.0 * (parts["emd_all"] + parts["emd_road"] + parts["emd_field"]) + 0.3 * parts["grad"] + parts["class"]
    assert total.item() == pytest.approx(want, abs=1e-12)
    assert min(parts["emd_all"], parts["emd_road"], parts["emd_field"], parts["class"]) >= 0


def test_emd_parts_recomputed_independently(rng):
    model = EncoderModel([0, 1], 1.0, seed=1)
    b = batch(rng)
    b.C[1, 32:40] = 1  # unequal road counts force subsampling to the smaller set
    parts = embed_loss(b, model)[1]
    e = [model.encode(b.x[k], [k] * b.x.shape[1]) for k in range(2)]
    assert parts["emd_all"] == pytest.approx(emd_1d(e[0], e[1]), abs=1e-12)
    m = b.M > 0
    f0, f1 = e[0][m[0] & (b.C[0] == 0)], e[1][m[1] & (b.C[1] == 0)]
    r0, r1 = np.sort(e[0][m[0] & (b.C[0] == 1)]), np.sort(e[1][m[1] & (b.C[1] == 1)])
    pick = np.floor((np.arange(len(r0)) + 0.5) * len(r1) / len(r0)).astype(int)
    assert parts["emd_road"] == pytest.approx(np.mean(np.abs(r0 - r1[pick])), abs=1e-12)
    pick = np.floor((np.arange(len(f1)) + 0.5) * len(f0) / len(f1)).astype(int)
    assert parts["emd_field"] == pytest.approx(np.mean(np.abs(np.sort(f0)[pick] - np.sort(f1))), abs=1e-12)
    logits = np.concatenate(e) * model.w.item() + model.b.item()
    y, w = b.C.ravel(), b.M.ravel()
    bce = (np.logaddexp(0, logits) - y * logits) * w
    assert parts["class"] == pytest.approx(bce.sum() / (2 * b.x.shape[1]), abs=1e-12)


def test_missing_label_class_everywhere_is_error(rng):
    b = batch(rng)
    b.C[:] = 0
    with pytest.raises(ValidationError):
        embed_loss(b, EncoderModel([0, 1], 1.0))


def test_near_identity_init(rng):
    model = EncoderModel([3, 5], 1.0)
    x = rng.random(100)
    for k in range(2):
        assert np.abs(encoder_derivative(model, x, k) - 1).max() < 0.1
        assert np.abs(model.encode(x, [(3, 5)[k]] * 100) - x).max() < 0.1


def test_derivative_matches_finite_differences(rng):
    model = EncoderModel([0, 1, 2], 1.0, seed=4, out_scale=1.0)
    x = rng.random(50) * 1.5
    for k in range(3):
        h = 1e-5
        num = (model.encode(x + h, [k] * 50) - model.encode(x - h, [k] * 50)) / (2 * h)
        ana = encoder_derivative(model, x, k)
        assert (np.abs(ana - num) / np.maximum(np.abs(num), 1e-6)).max() < 1e-4


def test_single_tanh_unit_derivative():
    model = EncoderModel([0, 1], 1.0, hidden=(1,))
    model.mlp[0].weight.data = np.array([[1.0], [0.0], [0.0]])
    model.mlp[0].bias.data = np.zeros(1)
    model.out.weight.data = np.array([[1.0]])
    model.out.bias.data = np.zeros(1)
    # E(x) = x + tanh(x): the tanh part contributes exactly 1 at x = 0
    assert encoder_derivative(model, [0.0], 0)[0] - 1.0 == pytest.approx(1.0, abs=1e-15)


def test_loss_gradient_finite_differences(rng):
    model = EncoderModel([0, 1], 1.0, seed=2, out_scale=0.5)
    b = batch(rng, n=64)
    params = model.parameters()
    names = ["mlp.0.weight", "mlp.1.bias", "out.weight", "clf.w", "clf.b"]
    model.zero_grad()
    embed_loss(b, model)[0].backward()
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        for i in range(min(4, flat.size)):
            old = flat[i]
            flat[i] = old + 1e-6
            up = embed_loss(b, model)[0].item()
            flat[i] = old - 1e-6
            down = embed_loss(b, model)[0].item()
            flat[i] = old
            num = (up - down) / 2e-6
            ana = p.grad.reshape(-1)[i]
            assert abs(ana - num) <= 1e-4 * max(abs(num), 1e-3), (name, i, ana, num)


def test_unknown_sensor_and_double_encoding():
    model = EncoderModel([0, 1], 100.0)
    with pytest.raises(ValidationError):
        encode_cloud(model, make_cloud([0.0], [0.0], sensor_id=[7]))
    enc = encode_cloud(model, make_cloud([0.0, 1.0], [0.0, 0.0], intensity=[50.0, 10.0], sensor_id=[0, 1]))
    assert enc.encoded
    np.testing.assert_allclose(enc.intensity, [0.5, 0.1], atol=0.1)
    with pytest.raises(ValidationError):
        encode_cloud(model, enc)


def test_encoder_checkpoint_roundtrip(tmp_path, rng):
    model = EncoderModel([0, 4], 321.0, seed=8, out_scale=1.0)
    model.w.data = np.array(-0.4)
    save_encoder(model, tmp_path / "e.tsnn")
    back = load_encoder(tmp_path / "e.tsnn")
    assert back.normalizer == 321.0 and back.w.item() == -0.4 and back.sensor_ids == [0, 4]
    x = rng.random(20) * 400
    np.testing.assert_array_equal(back.encode(x, [4] * 20), model.encode(x, [4] * 20))


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        HarmonizeConfig(beta=-0.1)


# --------------------------------------------------------------------------
# batches and training on a generated world


@pytest.fixture(scope="module")
def enc_data(small_world):
    cfg = HarmonizeConfig(cell_size=20.0, batch_n=512, epochs=40)
    return H.prepare_encoder_data(small_world.cloud, small_world.roads, small_world.grain, cfg), cfg


def test_batch_composition(enc_data, rng):
    data, cfg = enc_data
    for n in (100, 512, 1001):
        b = H.sample_batch(data, n, rng)
        assert b.x.shape == (2, n)
        lab = b.M.sum(axis=1)
        assert lab[0] == lab[1]
        road = (b.M * b.C).sum(axis=1)
        assert (np.abs(road - np.round(0.2 * lab)) <= 1).all()


def test_training_keeps_w_in_range_and_is_deterministic(enc_data):
    data, cfg = enc_data
    cfg = HarmonizeConfig(cell_size=20.0, batch_n=256, epochs=25, lr=0.05)
    hist = []
    a = H.train_encoder(data, cfg, history=hist)
    b = H.train_encoder(data, cfg)
    assert -1 <= a.w.item() <= 1
    for k, v in a.state().items():
        np.testing.assert_array_equal(v, b.state()[k])
    assert len(hist) >= 20


def test_short_training_aligns_sensors_and_stays_monotone(enc_data):
    data, cfg = enc_data
    model = H.train_encoder(data, cfg)
    pre, post = H.pairwise_emd_all(None, data, 5000), H.pairwise_emd_all(model, data, 5000)
    assert post < 0.5 * pre
    grid = np.linspace(0, 1.5, 1000)
    for k in range(2):
        assert np.diff(H._encode_norm(model, grid, k)).min() > 0


def test_batch_all_labelled_when_a_context_lacks_unknown_points():
    x = [np.linspace(0, 1, 100), np.linspace(0, 1, 100)]
    road = [np.arange(100) < 30, np.arange(100) < 30]
    fld = [np.arange(100) >= 30, (np.arange(100) >= 30) & (np.arange(100) < 80)]
    data = H.EncoderData([0, 1], 1.0, x, road, fld, {})
    b = H.sample_batch(data, 50, np.random.default_rng(0))
    assert b.x.shape == (2, 50)
    assert (b.M == 1).all()
    np.testing.assert_array_equal(b.C.sum(axis=1), [10, 10])
