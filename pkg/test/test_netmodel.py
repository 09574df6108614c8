import re

import numpy as np
import pytest

from nesy_soc import netmodel as nm
from nesy_soc.errors import ModelError
from nesy_soc.flowdata import FeatureStats, Label

DIMS = (15, 16, 16, 8, 3)


def _toy(n_per_class=30, n_nws=10, seed=0):
    """Three separable clusters; the NWS rows are benign rows with their own signature."""
    rng = np.random.default_rng(seed)
    blocks, labels = [], []
    for label in Label:
        x = rng.uniform(0.0, 0.3, (n_per_class, 15))
        x[:, int(label) * 4:(int(label) + 1) * 4] += 0.6
        blocks.append(x)
        labels += [int(label)] * n_per_class
    features = np.vstack(blocks)
    nws = list(range(n_nws))
    return features, np.array(labels), nws


def test_init_shapes_and_determinism():
    model = nm.mlp_init(DIMS, seed=3)
    assert [p.shape for p in model.params] == [(15, 16), (16,), (16, 16), (16,), (16, 8), (8,), (8, 3), (3,)]
    again = nm.mlp_init(DIMS, seed=3)
    assert model.parameter_bytes() == again.parameter_bytes()
    assert model.parameter_bytes() != nm.mlp_init(DIMS, seed=4).parameter_bytes()
    assert all(np.all(b == 0) for b in model.params[1::2])
    limit = np.sqrt(6.0 / (15 + 16))
    assert np.abs(model.params[0]).max() <= limit


def test_init_rejects_bad_dims():
    with pytest.raises(ModelError):
        nm.mlp_init((15, 0, 3), seed=1)
    with pytest.raises(ModelError):
        nm.mlp_init((15,), seed=1)


def test_predict_is_a_distribution():
    model = nm.mlp_init(DIMS, seed=1)
    rng = np.random.default_rng(0)
    out = nm.predict(model, rng.uniform(0, 1, 15))
    assert out.shape == (3,)
    assert out.sum() == pytest.approx(1.0)
    assert np.all((out >= 0) & (out <= 1))
    batch = nm.predict_batch(model, rng.uniform(0, 1, (7, 15)))
    assert batch.shape == (7, 3)
    with pytest.raises(ModelError):
        nm.predict(model, np.zeros(14))


def test_classify_ties_pick_lowest_index():
    model = nm.mlp_init(DIMS, seed=1)
    model.params = [np.zeros_like(p) for p in model.params]
    assert nm.classify(model, np.ones(15)) == Label.BENIGN
    assert list(nm.classify_memberships(np.array([[0.2, 0.4, 0.4]]))) == [1]


def test_adam_first_step_moves_by_learning_rate():
    model = nm.mlp_init((2, 2), seed=0)
    state = nm.AdamState.for_model(model, learning_rate=0.1)
    grads = [np.array([[1.0, -2.0], [0.5, 0.0]]), np.array([3.0, -0.25])]
    new_model, new_state = nm.adam_step(model, grads, state)
    assert new_state.t == 1
    step = new_model.params[0] - model.params[0]
    assert step[0, 0] == pytest.approx(-0.1, rel=1e-6)
    assert step[0, 1] == pytest.approx(0.1, rel=1e-6)
    assert step[1, 1] == 0.0
    assert new_model.params[1] - model.params[1] == pytest.approx(np.array([-0.1, 0.1]), rel=1e-6)


def test_adam_rejects_mismatched_gradients():
    model = nm.mlp_init((2, 2), seed=0)
    state = nm.AdamState.for_model(model)
    with pytest.raises(ModelError):
        nm.adam_step(model, [np.zeros((2, 2))], state)
    with pytest.raises(ModelError):
        nm.adam_step(model, [np.zeros((2, 3)), np.zeros(2)], state)


def test_zero_epochs_returns_initialisation():
    features, labels, nws = _toy()
    config = nm.TrainConfig(epochs=0, seed=5)
    baseline = nm.train_baseline(features, labels, config)
    ltn = nm.train_ltn(features, labels, nws, config)
    init = nm.mlp_init(DIMS, seed=5)
    assert baseline.parameter_bytes() == init.parameter_bytes()
    assert ltn.parameter_bytes() == init.parameter_bytes()
    assert baseline.history == [] and ltn.history == []


def test_baseline_learns_separable_clusters():
    features, labels, _ = _toy()
    model = nm.train_baseline(features, labels, nm.TrainConfig(epochs=300, seed=1, learning_rate=0.02))
    assert np.mean(nm.classify_batch(model, features) == labels) > 0.95
    assert model.history[-1]["loss"] < model.history[0]["loss"]
    assert model.config.mode == "baseline"


def test_ltn_raises_satisfaction():
    features, labels, nws = _toy()
    config = nm.TrainConfig(epochs=300, seed=1, learning_rate=0.02)
    model = nm.train_ltn(features, labels, nws, config)
    partitions = nm.Partitions.from_labels(labels, nws)
    start = nm.satisfaction(nm.mlp_init(DIMS, seed=1), features, partitions)
    assert model.history[-1]["satisfaction"] == pytest.approx(nm.satisfaction(model, features, partitions))
    assert model.history[-1]["satisfaction"] > start
    assert np.mean(nm.classify_batch(model, features) == labels) > 0.95


def test_training_is_deterministic():
    features, labels, nws = _toy()
    config = nm.TrainConfig(epochs=20, seed=9)
    a = nm.train_ltn(features, labels, nws, config)
    b = nm.train_ltn(features, labels, nws, config)
    assert a.parameter_bytes() == b.parameter_bytes()
    assert a.history == b.history


def test_minibatch_path_is_deterministic(monkeypatch):
    monkeypatch.setattr(nm, "FULL_BATCH_LIMIT", 20)
    features, labels, nws = _toy()
    config = nm.TrainConfig(epochs=3, seed=2, batch_size=16)
    a = nm.train_ltn(features, labels, nws, config)
    b = nm.train_ltn(features, labels, nws, config)
    assert a.parameter_bytes() == b.parameter_bytes()
    assert nm.train_baseline(features, labels, config).history[0]["epoch"] == 1


def test_empty_partition_is_named():
    features, labels, nws = _toy()
    keep = labels != int(Label.XSS)
    with pytest.raises(ModelError, match="XSS"):
        nm.train_ltn(features[keep], labels[keep], nws, nm.TrainConfig(epochs=1))
    with pytest.raises(ModelError, match="NWS"):
        nm.train_ltn(features, labels, [], nm.TrainConfig(epochs=1))


def test_axiom_set_names_four_axioms():
    features, labels, nws = _toy()
    model = nm.mlp_init(DIMS, seed=1)
    axioms = nm.axiom_set(model, features, nm.Partitions.from_labels(labels, nws))
    assert [name for name, _ in axioms] == ["forall Benign", "forall BruteForce", "forall XSS", "forall NWS"]
    assert all(0.0 <= node.item() <= 1.0 for _, node in axioms)


def test_train_config_validation():
    with pytest.raises(ModelError):
        nm.TrainConfig(mode="svm")
    with pytest.raises(ModelError):
        nm.TrainConfig(epochs=-1)


def test_checkpoint_round_trip(tmp_path):
    features, labels, nws = _toy()
    model = nm.train_ltn(features, labels, nws, nm.TrainConfig(epochs=2, seed=4))
    model.stats = FeatureStats(tuple(range(15)), tuple(range(1, 16)))
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    nm.save_checkpoint(str(first), model)
    nm.save_checkpoint(str(second), model)
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes().startswith(b"NESYCKPT")

    loaded = nm.load_checkpoint(str(first))
    assert loaded.layer_dims == DIMS
    assert loaded.parameter_bytes() == model.parameter_bytes()
    assert loaded.config == model.config
    assert loaded.stats == model.stats
    x = features[:5]
    assert np.array_equal(nm.predict_batch(loaded, x), nm.predict_batch(model, x))


def test_checkpoint_rejects_foreign_files(tmp_path):
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"not a checkpoint")
    with pytest.raises(ModelError):
        nm.load_checkpoint(str(bogus))

    model = nm.mlp_init((2, 2), seed=0)
    path = tmp_path / "m.ckpt"
    nm.save_checkpoint(str(path), model)
    data = path.read_bytes().replace(b'"format_version":1', b'"format_version":9')
    path.write_bytes(data)
    with pytest.raises(ModelError, match="version"):
        nm.load_checkpoint(str(path))
    with pytest.raises(ModelError):
        nm.load_checkpoint(str(tmp_path / "missing.ckpt"))


def test_checkpoint_rejects_truncated_files(tmp_path):
    model = nm.mlp_init(DIMS, seed=0)
    path = tmp_path / "m.ckpt"
    nm.save_checkpoint(str(path), model)
    data = path.read_bytes()
    for cut in (data[:9], data[:20], data[:-40], data + b"\x00"):
        path.write_bytes(cut)
        with pytest.raises(ModelError, match=re.escape(str(path))):
            nm.load_checkpoint(str(path))

    blob = b'{"format_version":1,"labels":["Benign","BruteForce","XSS"]}'
    path.write_bytes(nm.CHECKPOINT_MAGIC + len(blob).to_bytes(4, "little") + blob)
    with pytest.raises(ModelError, match="corrupt header"):
        nm.load_checkpoint(str(path))


# ===== PREDICATE AND OPTIMIZER EXAMPLES =====


def test_zero_weight_model_is_uniform():
    model = nm.mlp_init(DIMS, seed=1)
    model.params = [np.zeros_like(p) for p in model.params]
    np.testing.assert_allclose(nm.predict(model, np.linspace(0, 1, 15)), np.full(3, 1 / 3), rtol=1e-15)


def test_seed_one_model_on_zero_vector():
    # zero biases propagate a zero input to zero logits
    model = nm.mlp_init(nm.REFERENCE_DIMS, seed=1)
    np.testing.assert_allclose(nm.predict(model, np.zeros(15)), [1 / 3, 1 / 3, 1 / 3], rtol=1e-15)


def test_predict_rejects_non_finite_features():
    model = nm.mlp_init(DIMS, seed=1)
    x = np.zeros(15)
    x[4] = np.nan
    with pytest.raises(ModelError, match="finite"):
        nm.predict(model, x)
    with pytest.raises(ModelError, match="finite"):
        nm.predict_batch(model, np.vstack([np.zeros(15), np.full(15, np.inf)]))


def test_adam_zero_gradients():
    model = nm.mlp_init((2, 2), seed=0)
    zeros = [np.zeros_like(p) for p in model.params]
    new_model, state = nm.adam_step(model, zeros, nm.AdamState.for_model(model))
    assert new_model.parameter_bytes() == model.parameter_bytes()

    warm = nm.AdamState([np.ones_like(p) for p in model.params], [np.ones_like(p) for p in model.params], t=3)
    _, state = nm.adam_step(model, zeros, warm)
    assert state.t == 4
    assert all(np.allclose(m, 0.9) for m in state.m)
    assert all(np.allclose(v, 0.999) for v in state.v)


def test_adam_single_scalar_step():
    model = nm.MlpModel((1, 1), [np.array([[0.5]]), np.array([0.0])])
    state = nm.AdamState.for_model(model)
    first, state = nm.adam_step(model, [np.array([[1.0]]), np.array([0.0])], state)
    delta = first.params[0][0, 0] - 0.5
    assert delta == pytest.approx(-9.99999e-4, rel=1e-5)
    assert first.params[1][0] == 0.0

    second, _ = nm.adam_step(first, [np.array([[1.0]]), np.array([0.0])], state)
    assert second.params[0][0, 0] < first.params[0][0, 0]


# ===== TRAINING PROPERTIES =====


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_ltn_satisfaction_settles_on_consistent_data(seed):
    features, labels, nws = _toy(seed=seed)
    model = nm.train_ltn(features, labels, nws, nm.TrainConfig(epochs=300, seed=seed, learning_rate=0.02))
    curve = np.array([entry["satisfaction"] for entry in model.history])
    assert np.all(np.diff(curve[-50:]) >= -0.02)
    assert curve[-1] > 0.9


def test_ltn_terminates_on_contradictory_nws_flow():
    features, labels, nws = _toy()
    brute_force_row = int(np.flatnonzero(labels == int(Label.BRUTE_FORCE))[0])
    config = nm.TrainConfig(epochs=100, seed=1, learning_rate=0.02)
    model = nm.train_ltn(features, labels, nws + [brute_force_row], config)
    assert len(model.history) == 100
    assert model.history[-1]["satisfaction"] < 1.0
