import numpy as np
import pytest

from semgap import model as M
from semgap.compiler import compile_model
from semgap.deviation import consistency_rate, max_deviation
from semgap.errors import ConfigError, NumericError, ShapeError
from semgap.trainer import accuracy, build, class_templates, gen_dataset, train_clean

from conftest import TRAIN_CONFIG

DATA, OPT = TRAIN_CONFIG["dataset"], TRAIN_CONFIG["train"]
SHAPE = tuple(DATA["shape"])


def desk_run(seed):
    train = gen_dataset(DATA["k"], DATA["n_train"], SHAPE, DATA["sigma"], seed, "train")
    test = gen_dataset(DATA["k"], DATA["n_test"], SHAPE, DATA["sigma"], seed, "test")
    m = build(TRAIN_CONFIG["arch"], SHAPE, DATA["k"], seed)
    m = train_clean(m, train, OPT["lr"], OPT["epochs"], OPT["batch"], seed, OPT["momentum"])
    return m, test


@pytest.fixture(scope="module")
def three_seeds():
    return {s: desk_run(s) for s in (1, 2, 3)}


def test_zero_noise_samples_equal_their_template():
    ds = gen_dataset(4, 40, (2, 5, 6), sigma=0.0, seed=3)
    t = class_templates(4, (2, 5, 6), 3).astype(np.float32)
    for i in range(40):
        assert ds.X[i].tobytes() == t[ds.y[i]].tobytes()


def test_dataset_is_seeded_balanced_and_in_range():
    a, b = gen_dataset(5, 50, (1, 4, 4), seed=9), gen_dataset(5, 50, (1, 4, 4), seed=9)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert np.bincount(a.y).tolist() == [10] * 5
    assert a.X.min() >= 0 and a.X.max() <= 1 and a.y.max() < 5
    other = gen_dataset(5, 50, (1, 4, 4), seed=9, split="test")
    assert other.X.tobytes() != a.X.tobytes()


def test_dataset_errors():
    with pytest.raises(ConfigError):
        gen_dataset(1, 10)
    with pytest.raises(ConfigError):
        gen_dataset(5, 4)
    with pytest.raises(ShapeError):
        gen_dataset(2, 4, (16, 16))
    with pytest.raises(ShapeError):
        gen_dataset(2, 4, (3, 0, 4))


@pytest.mark.parametrize("arch", ["mlp", "convnet"])
def test_fixture_architectures_have_split_point(arch):
    m = build(arch, SHAPE, 10, seed=0)
    sp = M.split_at_first_activation(m)
    assert sp.bias_node.kind in ("Dense", "Conv2d") and sp.m2.nodes[0].kind == "Relu"
    assert m.num_classes == 10
    with pytest.raises(ConfigError):
        build("resnet", SHAPE, 10)


def test_zero_epochs_leaves_parameters_unchanged():
    ds = gen_dataset(3, 30, (1, 4, 4), seed=0)
    m = build("mlp", (1, 4, 4), 3, seed=0)
    assert M.serialize(train_clean(m, ds, epochs=0)) == M.serialize(m)


def test_training_is_bitwise_reproducible():
    ds = gen_dataset(3, 60, (1, 6, 6), seed=0)
    runs = [M.serialize(train_clean(build("convnet", (1, 6, 6), 3, seed=4), ds, lr=0.02, epochs=2, batch=16, seed=4))
            for _ in range(2)]
    assert runs[0] == runs[1]
    assert runs[0] != M.serialize(build("convnet", (1, 6, 6), 3, seed=4))


def test_training_errors():
    ds = gen_dataset(3, 30, (1, 4, 4), seed=0)
    with pytest.raises(ConfigError, match="outputs"):
        train_clean(build("mlp", (1, 4, 4), 4), ds)
    with pytest.raises(NumericError, match=r"diverged at epoch \d"):
        train_clean(build("mlp", (1, 4, 4), 3), ds, lr=1e30, epochs=3)


def test_desk_accuracy_is_high_and_stable(three_seeds):
    accs = [accuracy(m, test) for m, test in three_seeds.values()]
    assert min(accs) >= 0.90
    assert max(accs) - min(accs) <= 0.04  # within +-2 points of the midpoint


def test_trained_models_deviate_but_agree(three_seeds):
    for m, test in three_seeds.values():
        plan, x = compile_model(m), test.X[:500]
        assert max_deviation(m, plan, x) > -np.inf
        assert consistency_rate(m, plan, x) == 1.0
