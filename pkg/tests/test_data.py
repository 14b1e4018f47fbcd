import os

import numpy as np
import pytest
from PIL import Image

from camadv.data import (
    DataError,
    DatasetSplit,
    FilenameLayout,
    Sample,
    SealedIds,
    SyntheticSpec,
    camera_distributions,
    generate_synthetic,
    hide_labels,
    load_dataset_dir,
    load_split,
    save_split,
    with_role,
)
from camadv.evaluation import mutual_information, unseal


def _write_images(root, names, size=(8, 4)):
    for name in names:
        Image.fromarray(np.full((size[0], size[1], 3), 128, np.uint8)).save(root / name)


def test_directory_filenames_parse_into_ids_and_cameras(tmp_path):
    _write_images(tmp_path, ["0001_c1_f.jpg", "0001_c2_f.jpg", "0002_c1_f.jpg"])
    split = load_dataset_dir(tmp_path, FilenameLayout(image_size=(8, 4)))
    assert len(split) == 3
    assert split.num_cameras == 2
    assert split.num_identities == 2
    np.testing.assert_array_equal(split.cameras, [0, 1, 0])
    assert split.person_ids == [1, 1, 2]
    assert split.stack().shape == (3, 8, 4, 3)


def test_distractor_filenames_are_flagged(tmp_path):
    _write_images(tmp_path, ["0000_c1_a.jpg", "-1_c2_b.jpg", "0005_c1_c.jpg"])
    split = load_dataset_dir(tmp_path, FilenameLayout(image_size=(8, 4)))
    # Sorted order: -1_c2_b, 0000_c1_a, 0005_c1_c.
    assert split.distractor_mask.tolist() == [True, True, False]
    assert split.person_ids == [None, None, 5]
    assert split.num_identities == 1


def test_unparseable_filename_raises(tmp_path):
    _write_images(tmp_path, ["0001_c1_f.jpg", "holiday.jpg"])
    with pytest.raises(DataError, match="holiday"):
        load_dataset_dir(tmp_path)


def test_empty_or_missing_directory_raises(tmp_path):
    with pytest.raises(DataError, match="empty"):
        load_dataset_dir(tmp_path)
    with pytest.raises(DataError, match="not found"):
        load_dataset_dir(tmp_path / "missing")


def test_camera_out_of_range_rejected():
    with pytest.raises(DataError, match="camera"):
        DatasetSplit((Sample(3, 0, np.zeros(2), 1),), "gallery", num_cameras=3)


def test_gallery_samples_need_ids_unless_distractor():
    with pytest.raises(DataError, match="person id"):
        DatasetSplit((Sample(0, 0, np.zeros(2)),), "gallery", num_cameras=1)
    DatasetSplit((Sample(0, 0, np.zeros(2), distractor=True),), "gallery", num_cameras=1)


def test_uncorrelated_synthetic_has_small_identity_camera_mi():
    # 10 ids x 4 cameras x 8 samples per (id, camera) cell on average.
    train, _, _ = generate_synthetic(SyntheticSpec(num_identities=10, num_cameras=4, samples_per_id=32, correlation=0.0))
    assert mutual_information(train.person_ids, train.cameras) < 0.1


def test_full_correlation_puts_each_id_under_one_camera():
    train, _, _ = generate_synthetic(SyntheticSpec(num_identities=12, correlation=1.0, seed=5))
    for pid in set(train.person_ids):
        cams = {s.camera for s in train.samples if s.person_id == pid}
        assert len(cams) == 1


def test_camera_distribution_rows_are_stochastic():
    spec = SyntheticSpec(correlation=0.4)
    probs = camera_distributions(spec, np.array([0, 3, 1]))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    np.testing.assert_allclose(probs[0], [0.55, 0.15, 0.15, 0.15])


def test_synthetic_is_deterministic():
    a = generate_synthetic(SyntheticSpec(seed=11, num_distractors=3))
    b = generate_synthetic(SyntheticSpec(seed=11, num_distractors=3))
    for x, y in zip(a, b):
        assert x.cameras.tobytes() == y.cameras.tobytes()
        assert x.stack().tobytes() == y.stack().tobytes()
        assert x.person_ids == y.person_ids


def test_synthetic_scale_parameters_rescale_shared_draws():
    base = generate_synthetic(SyntheticSpec(seed=2, noise_sigma=0.0, camera_shift_scale=0.0))[0]
    noisy = generate_synthetic(SyntheticSpec(seed=2, noise_sigma=0.5, camera_shift_scale=0.0))[0]
    assert base.cameras.tolist() == noisy.cameras.tolist()
    ids = np.array(base.person_ids)
    # Without noise or shifts every sample of an identity is its code.
    x = base.stack()
    for pid in range(3):
        np.testing.assert_array_equal(x[ids == pid], np.repeat(x[ids == pid][:1], (ids == pid).sum(), axis=0))


def test_synthetic_distractors_land_in_gallery():
    _, gallery, query = generate_synthetic(SyntheticSpec(num_distractors=5))
    assert gallery.distractor_mask.sum() == 5
    assert not query.distractor_mask.any()


def test_samples_per_id_below_two_rejected():
    with pytest.raises(DataError):
        SyntheticSpec(samples_per_id=1)


def test_hide_labels_strips_ids_and_keeps_them_sealed(small_synthetic):
    train = small_synthetic[0]
    hidden = hide_labels(train)
    assert all(s.person_id is None for s in hidden.samples)
    assert unseal(hidden.diagnostics) == train.person_ids
    assert "hidden" in repr(hidden.diagnostics)


def test_hide_labels_rejects_other_roles(small_synthetic):
    with pytest.raises(DataError, match="target_train"):
        hide_labels(small_synthetic[1])


def test_split_round_trips_through_npz(tmp_path, small_synthetic):
    train, gallery, _ = small_synthetic
    for split in (hide_labels(train), gallery, with_role(train, "source_train")):
        save_split(split, tmp_path / "s.npz")
        back = load_split(tmp_path / "s.npz")
        assert back.role == split.role
        assert back.stack().tobytes() == split.stack().tobytes()
        assert back.person_ids == split.person_ids
        assert back.diagnostics == split.diagnostics


def test_sealed_ids_compare_by_value():
    assert SealedIds([1, 2]) == SealedIds([1, 2])
    assert SealedIds([1, 2]) != SealedIds([2, 1])


@pytest.mark.parametrize(
    "env, samples, cameras",
    [("CAMADV_MARKET_TRAIN", 12936, 6), ("CAMADV_DUKE_TRAIN", 16522, 8)],
)
def test_public_benchmark_training_dirs(env, samples, cameras):
    path = os.environ.get(env)
    if not path:
        pytest.skip(f"set {env} to a bounding_box_train directory to check published split sizes")
    split = load_dataset_dir(path, role="source_train")
    assert (len(split), split.num_cameras) == (samples, cameras)
