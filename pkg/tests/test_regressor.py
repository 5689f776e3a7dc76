import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clothloop.errors import InputError, NumericalError
from clothloop.mesh import PointCloud
from clothloop.regressor import RegressorParams, Sample, TrainConfig, forward, gradients, train
from clothloop.util.enum.head_kind import HeadKind

SMALL = {"encoder": (4, 6), "decoder": 5}
STILL = {"noise": 0.0, "scale_range": (1.0, 1.0), "rotation_deg": 0.0}


def small_params(head: HeadKind, outputs: int, seed: int = 0, triples: str = "") -> RegressorParams:
    return RegressorParams.init(head, outputs, np.random.default_rng(seed), triples=triples, **SMALL)


def naive_forward(params: RegressorParams, points: np.ndarray) -> np.ndarray:
    """Point-by-point re-implementation of the forward pass."""
    w = params.weights
    centroid = points.sum(axis=0) / len(points)
    h1 = [np.maximum((p - centroid) @ w["enc1_W"] + w["enc1_b"], 0) for p in points]
    h2 = [np.maximum(h @ w["enc2_W"] + w["enc2_b"], 0) for h in h1]
    g = np.max(np.stack(h2), axis=0)
    if params.head is HeadKind.POOLED:
        d = np.maximum(g @ w["dec1_W"] + w["dec1_b"], 0)
        out = d @ w["out_W"] + w["out_b"]
        for i, kind in enumerate(params.triples):
            if kind == "p":
                out[3 * i : 3 * i + 3] += centroid
        return out
    rows = []
    for h in h1:
        d = np.maximum(np.concatenate([h, g]) @ w["dec1_W"] + w["dec1_b"], 0)
        raw = d @ w["out_W"] + w["out_b"]
        rows.append(1 / (1 + np.exp(-raw)) if params.head is HeadKind.HEATMAP else raw / np.linalg.norm(raw))
    return np.stack(rows)


def test_default_parameter_count() -> None:
    params = RegressorParams.init(HeadKind.HEATMAP, 5, np.random.default_rng(0))
    assert params.parameter_count == 8576 + 24704 + 129 * 5
    pooled = RegressorParams.init(HeadKind.POOLED, 12, np.random.default_rng(0), triples="pdpd")
    assert pooled.parameter_count == 8576 + 16512 + 129 * 12


@pytest.mark.parametrize(("head", "outputs", "triples"), [(HeadKind.HEATMAP, 2, ""), (HeadKind.VECTOR, 3, ""), (HeadKind.POOLED, 6, "pd")])
def test_output_rows_follow_head_kind(head: HeadKind, outputs: int, triples: str) -> None:
    params = small_params(head, outputs, triples=triples)
    out = forward(params, np.random.default_rng(6).random((11, 3)))
    assert out.shape == ((11, outputs) if head.per_point else (outputs,))
    assert head.per_point == (head is not HeadKind.POOLED)
    assert params.weights["dec1_W"].shape[0] == params.weights["enc2_W"].shape[1] + (
        params.weights["enc1_W"].shape[1] if head.per_point else 0
    )


def test_zero_weights_give_half() -> None:
    params = small_params(HeadKind.HEATMAP, 3)
    for value in params.weights.values():
        value[...] = 0.0
    out = forward(params, np.random.default_rng(1).random((8, 3)))
    assert np.array_equal(out, np.full((8, 3), 0.5))


@pytest.mark.parametrize(("head", "outputs", "triples"), [(HeadKind.HEATMAP, 2, ""), (HeadKind.VECTOR, 3, ""), (HeadKind.POOLED, 6, "pd")])
def test_matches_naive_forward(head: HeadKind, outputs: int, triples: str) -> None:
    params = RegressorParams.init(head, outputs, np.random.default_rng(2), triples=triples)
    points = np.random.default_rng(3).random((25, 3))
    assert np.allclose(forward(params, PointCloud(points)), naive_forward(params, points), atol=1e-10)


def test_permutation_symmetry() -> None:
    points = np.random.default_rng(4).random((30, 3))
    perm = np.random.default_rng(5).permutation(30)
    per_point = small_params(HeadKind.HEATMAP, 2)
    assert np.allclose(forward(per_point, points[perm]), forward(per_point, points)[perm])
    pooled = small_params(HeadKind.POOLED, 3, triples="p")
    assert np.allclose(forward(pooled, points[perm]), forward(pooled, points))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_vector_head_is_unit(seed: int) -> None:
    rng = np.random.default_rng(seed)
    params = RegressorParams.init(HeadKind.VECTOR, 3, rng)
    out = forward(params, rng.normal(size=(int(rng.integers(2, 40)), 3)))
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)


def test_nan_names_layer() -> None:
    points = np.random.default_rng(6).random((5, 3))
    points[2, 0] = np.nan
    with pytest.raises(NumericalError, match="enc1"):
        forward(small_params(HeadKind.HEATMAP, 2), points)


def test_empty_cloud_rejected() -> None:
    with pytest.raises(InputError):
        forward(small_params(HeadKind.HEATMAP, 2), np.empty((0, 3)))


def test_shape_validation() -> None:
    params = small_params(HeadKind.HEATMAP, 2)
    params.weights["dec1_W"] = params.weights["dec1_W"][:-1]
    with pytest.raises(InputError, match="dec1_W"):
        RegressorParams(params.head, params.outputs, params.weights)
    with pytest.raises(InputError):
        small_params(HeadKind.VECTOR, 4)
    with pytest.raises(InputError):
        small_params(HeadKind.POOLED, 6, triples="p")


def batch_for(head: HeadKind, outputs: int, rng: np.random.Generator) -> list[Sample]:
    points = rng.random((5, 3))
    if head is HeadKind.HEATMAP:
        return [Sample(points, rng.uniform(0.1, 0.9, (5, outputs)))]
    if head is HeadKind.VECTOR:
        target = rng.normal(size=(5, 3))
        return [Sample(points, target / np.linalg.norm(target, axis=1, keepdims=True))]
    mask = np.ones(outputs)
    mask[-3:] = 0.0
    return [Sample(points, rng.normal(size=outputs), mask), Sample(rng.random((5, 3)), rng.normal(size=outputs))]


@pytest.mark.parametrize(("head", "outputs", "triples"), [(HeadKind.HEATMAP, 2, ""), (HeadKind.VECTOR, 3, ""), (HeadKind.POOLED, 6, "pd")])
def test_gradients_match_finite_differences(head: HeadKind, outputs: int, triples: str) -> None:
    rng = np.random.default_rng(7)
    params = small_params(head, outputs, seed=8, triples=triples)
    batch = batch_for(head, outputs, rng)
    _, grads = gradients(params, batch)
    h = 1e-4
    for name, weights in params.weights.items():
        for index in np.ndindex(weights.shape):
            original = weights[index]
            weights[index] = original + h
            up, _ = gradients(params, batch)
            weights[index] = original - h
            down, _ = gradients(params, batch)
            weights[index] = original
            numeric = (up - down) / (2 * h)
            scale = max(abs(numeric), abs(grads[name][index]), 1e-6)
            assert abs(numeric - grads[name][index]) / scale < 1e-3, (name, index)


def test_zero_loss_has_zero_gradients() -> None:
    params = small_params(HeadKind.HEATMAP, 2)
    points = np.random.default_rng(9).random((6, 3))
    loss, grads = gradients(params, [Sample(points, forward(params, points))])
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_gradients_scale_with_weight() -> None:
    params = small_params(HeadKind.HEATMAP, 2)
    batch = batch_for(HeadKind.HEATMAP, 2, np.random.default_rng(10))
    loss, grads = gradients(params, batch)
    loss2, grads2 = gradients(params, batch, weight=2.0)
    assert loss2 == pytest.approx(2 * loss)
    for name, g in grads.items():
        assert np.allclose(grads2[name], 2 * g)


def test_fully_masked_place_target_is_ignored() -> None:
    params = small_params(HeadKind.POOLED, 6, triples="pd")
    points = np.random.default_rng(11).random((5, 3))
    loss, grads = gradients(params, [Sample(points, np.full(6, 1e3), np.zeros(6))])
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_overfits_single_sample() -> None:
    params = RegressorParams.init(HeadKind.POOLED, 3, np.random.default_rng(12), encoder=(16, 32), decoder=32, triples="d")
    sample = Sample(np.random.default_rng(13).random((20, 3)), np.array([0.3, -0.2, 0.5]))
    cfg = TrainConfig(epochs=200, batch_size=1, learning_rate=1e-2, **STILL)
    _, curve = train(params, [sample], cfg, np.random.default_rng(14))
    assert len(curve) == 200
    assert curve[-1] <= curve[0] / 10


def test_zero_learning_rate_keeps_params() -> None:
    params = small_params(HeadKind.HEATMAP, 2)
    dataset = batch_for(HeadKind.HEATMAP, 2, np.random.default_rng(15))
    trained, curve = train(params, dataset, TrainConfig(epochs=5, learning_rate=0.0, **STILL), np.random.default_rng(0))
    for name, value in params.weights.items():
        assert np.array_equal(trained.weights[name], value)
    assert len(set(curve)) == 1


def test_warmup_then_cosine() -> None:
    cfg = TrainConfig(epochs=80, learning_rate=1e-4, warmup_epochs=10)
    assert cfg.learning_rate_at(0) < cfg.learning_rate_at(9)
    assert cfg.learning_rate_at(9) == pytest.approx(1e-4)
    assert cfg.learning_rate_at(40) < cfg.learning_rate_at(10)
    assert cfg.learning_rate_at(79) < cfg.learning_rate_at(40)


def test_training_is_deterministic() -> None:
    params = small_params(HeadKind.VECTOR, 3)
    dataset = batch_for(HeadKind.VECTOR, 3, np.random.default_rng(16)) * 3
    cfg = TrainConfig(epochs=4, batch_size=2, learning_rate=1e-3)
    first = train(params, dataset, cfg, np.random.default_rng(17))
    second = train(params, dataset, cfg, np.random.default_rng(17))
    assert first[1] == second[1]


def test_train_config_validation() -> None:
    with pytest.raises(InputError):
        TrainConfig(epochs=0)
    with pytest.raises(InputError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(InputError):
        train(small_params(HeadKind.HEATMAP, 2), [], TrainConfig(), np.random.default_rng(0))


def test_save_and_load(tmp_path) -> None:
    params = small_params(HeadKind.POOLED, 6, triples="pd")
    params.save(tmp_path / "place.params")
    loaded = RegressorParams.load(tmp_path / "place.params")
    assert (loaded.head, loaded.outputs, loaded.loss, loaded.triples) == (HeadKind.POOLED, 6, "l2", "pd")
    points = np.random.default_rng(18).random((7, 3))
    assert np.array_equal(forward(loaded, points), forward(params, points))
