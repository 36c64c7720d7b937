import json

import pytest

from vmfd.config import (
    ConfigError,
    MissingFieldError,
    load_config,
    parse_config,
    scene_config,
    stable_hash,
    train_config,
)
from vmfd.synthdata import SceneConfig
from vmfd.trainer import TrainConfig


def test_parse_comments_and_blank_lines():
    text = "# header\n\nscene.seed = 4   # trailing\n  train.epochs=3\n"
    assert parse_config(text) == {"scene.seed": "4", "train.epochs": "3"}


@pytest.mark.parametrize("text, needle", [
    ("scene.seed 4\n", "line 1"),
    ("seed = 4\n", "prefixes"),
    ("other.seed = 4\n", "prefixes"),
    ("scene.seed = 1\nscene.seed = 2\n", "duplicate"),
])
def test_parse_errors(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.cfg")


def test_scene_conversion():
    cfg = scene_config(parse_config(
        "scene.seed = 2\nscene.num_classes = 2\nscene.class_frequencies = 0.25, 0.75\n"
        "scene.noise_range = 30\nscene.label_noise_rate = 0.2\n"))
    assert cfg == SceneConfig(seed=2, num_classes=2, class_frequencies=(0.25, 0.75), noise_range=30.0,
                              label_noise_rate=0.2)


def test_scene_none_value():
    assert scene_config(parse_config("scene.seed = 0\nscene.noise_range = none\n")).noise_range is None
    with pytest.raises(ConfigError, match="scene.num_points"):
        scene_config(parse_config("scene.seed = 0\nscene.num_points = none\n"))


def test_train_aliases_and_types():
    cfg = train_config(parse_config(
        "train.epochs = 3\ntrain.seed = 1\nsample.mode = random\nsample.m_s = 32\n"
        "model.hidden = 8, 8\nmodel.train_2d_heads = yes\nmodel.kappa_max = 100\ntrain.lambda3 = 0\n"))
    assert cfg == TrainConfig(epochs=3, seed=1, sampling_mode="random", m_s=32, hidden=(8, 8),
                              train_2d_heads=True, kappa_max=100.0, lambda3=0.0)


def test_train_ignores_scene_keys():
    cfg = train_config(parse_config("scene.seed = 9\ntrain.epochs = 1\ntrain.seed = 0\n"))
    assert cfg.epochs == 1


@pytest.mark.parametrize("text, needle", [
    ("train.epochs = 1\ntrain.seed = 0\nsample.color = red\n", "sample.color"),
    ("train.epochs = 1\ntrain.seed = 0\ntrain.bogus = 1\n", "train.bogus"),
    ("train.epochs = 1\ntrain.seed = 0\nmodel.train_2d_heads = maybe\n", "model.train_2d_heads"),
    ("train.epochs = 1\ntrain.seed = 0\ntrain.tau = -1\n", "tau"),
])
def test_train_bad_values(text, needle):
    with pytest.raises(ConfigError, match=needle):
        train_config(parse_config(text))


def test_missing_required_field():
    with pytest.raises(MissingFieldError) as info:
        train_config(parse_config("train.seed = 0\n"))
    assert info.value.field == "train.epochs"


def test_override_satisfies_requirement():
    cfg = train_config(parse_config("train.epochs = 2\n"), overrides={"seed": 7})
    assert cfg.seed == 7
    assert scene_config({}, overrides={"seed": 3}).seed == 3


def test_override_wins_over_file():
    assert scene_config(parse_config("scene.seed = 1\n"), overrides={"seed": 5}).seed == 5


def test_stable_hash():
    assert stable_hash({"a": 1, "b": [1, 2]}) == stable_hash({"b": [1, 2], "a": 1})
    assert stable_hash({"a": 1}) != stable_hash({"a": 2})
    assert len(stable_hash({})) == 16


def test_configs_json_safe():
    json.dumps(SceneConfig().to_dict(), allow_nan=False)
    json.dumps(TrainConfig().to_dict(), allow_nan=False)
