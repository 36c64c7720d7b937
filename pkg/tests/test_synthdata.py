import math
import struct

import numpy as np
import pytest

from vmfd._binio import FormatError, TruncationError, VersionError
from vmfd.synthdata import (
    DEFAULT_CLASS_FREQUENCIES,
    SceneConfig,
    generate_dataset,
    generate_scene,
    load_scene,
    make_world,
    save_scene,
    scene_bytes,
)


@pytest.fixture(scope="module")
def default_scene():
    return generate_scene(SceneConfig(seed=11))


def test_default_frequencies_include_extremes():
    assert max(DEFAULT_CLASS_FREQUENCIES) == 0.3766
    assert min(DEFAULT_CLASS_FREQUENCIES) == 0.0147
    assert sum(DEFAULT_CLASS_FREQUENCIES) == pytest.approx(1.0, abs=1e-12)


def test_default_desk_scale(default_scene):
    cfg = SceneConfig()
    assert (cfg.num_points, cfg.height, cfg.width, cfg.num_classes, cfg.num_cameras) == (4096, 64, 96, 6, 2)
    assert cfg.label_noise_rate == 0.10
    assert default_scene.weak_label_image.shape == (2, 64, 96)
    assert default_scene.point_descriptors.shape == (4096, 6)


def test_scene_invariants(default_scene):
    s = default_scene
    assert s.true_labels.min() >= 0 and s.true_labels.max() < 6
    for arr in (s.points, s.point_descriptors, s.pixel_descriptors):
        assert np.all(np.isfinite(arr))


def test_no_noise_means_weak_equals_true():
    s = generate_scene(SceneConfig(seed=1, label_noise_rate=0.0))
    np.testing.assert_array_equal(s.weak_label_image, s.true_label_image)


def test_binomial_class_counts():
    s = generate_scene(SceneConfig(seed=2, num_points=10**4, num_classes=2, class_frequencies=(0.5, 0.5)))
    count = int(np.sum(s.true_labels == 0))
    assert abs(count - 5000) <= 3 * math.sqrt(10**4 * 0.25)


def test_flip_rate_within_binomial_noise():
    cfg = SceneConfig(seed=3)
    s = generate_scene(cfg)
    n = s.weak_label_image.size
    flipped = int(np.sum(s.weak_label_image != s.true_label_image))
    p = cfg.label_noise_rate
    assert abs(flipped - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_flips_go_to_other_classes(default_scene):
    s = default_scene
    diff = s.weak_label_image != s.true_label_image
    assert diff.any()
    assert s.weak_label_image.min() >= 0 and s.weak_label_image.max() < 6


def test_radial_density_monotone():
    cfg = SceneConfig(seed=4)
    r = np.concatenate([np.linalg.norm(generate_scene(cfg, np.random.default_rng(i)).points, axis=1)
                        for i in range(3)])
    counts, _ = np.histogram(r, bins=np.linspace(2.0, 60.0, 9))
    assert np.all(np.diff(counts) < 0)


def test_determinism():
    a = scene_bytes(generate_scene(SceneConfig(seed=5)))
    b = scene_bytes(generate_scene(SceneConfig(seed=5)))
    assert a == b
    assert a != scene_bytes(generate_scene(SceneConfig(seed=6)))


def test_dataset_split_sizes():
    train, ev = generate_dataset(SceneConfig(seed=0, num_scenes=3, num_eval_scenes=2, num_points=500))
    assert len(train) == 3 and len(ev) == 2
    assert not np.array_equal(train[0].points, train[1].points)


def test_prototypes_separated():
    protos = make_world(SceneConfig()).prototypes
    gram = protos @ protos.T
    np.testing.assert_allclose(np.diag(gram), 1.0)
    assert (gram - 2 * np.eye(len(protos))).max() <= math.cos(math.radians(60.0)) + 1e-12


@pytest.mark.parametrize("kwargs", [
    dict(num_points=3),
    dict(class_frequencies=(0.5, 0.5, 0.0, 0.0, 0.0, 0.0)),
    dict(class_frequencies=(0.5, 0.5)),
    dict(label_noise_rate=1.0),
    dict(range_profile=(5.0, 1.0, 3.0)),
])
def test_infeasible_config(kwargs):
    with pytest.raises(ValueError):
        SceneConfig(**kwargs)


def test_save_load_round_trip(tmp_path, default_scene):
    path = tmp_path / "s.scene"
    save_scene(default_scene, path)
    back = load_scene(path)
    for name in ("points", "point_descriptors", "true_labels", "pixel_descriptors",
                 "weak_label_image", "true_label_image"):
        np.testing.assert_array_equal(getattr(back, name), getattr(default_scene, name))
    for a, b in zip(back.cameras, default_scene.cameras):
        np.testing.assert_array_equal(a.intrinsics, b.intrinsics)
        np.testing.assert_array_equal(a.extrinsics, b.extrinsics)
    assert back.meta == default_scene.meta
    assert scene_bytes(back) == scene_bytes(default_scene)


def test_truncated_file(tmp_path, default_scene):
    path = tmp_path / "s.scene"
    save_scene(default_scene, path)
    data = path.read_bytes()
    for cut in (4, 30, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(TruncationError):
            load_scene(path)


def test_corrupted_magic(tmp_path, default_scene):
    path = tmp_path / "s.scene"
    save_scene(default_scene, path)
    data = bytearray(path.read_bytes())
    data[0] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_scene(path)


def test_version_mismatch(tmp_path, default_scene):
    path = tmp_path / "s.scene"
    save_scene(default_scene, path)
    data = bytearray(path.read_bytes())
    data[8:12] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(VersionError):
        load_scene(path)
