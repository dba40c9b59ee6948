import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asmloc.dataset import (BUCKET_NAMES, SyntheticConfig, bucket_counts, bucket_of,
                            bucket_snippet_range, class_means, encode_labels, generate_synthetic,
                            load_dataset, load_manifest, make_splits, read_features,
                            resample_video, write_dataset, write_features)
from asmloc.errors import (BadMagicError, ConfigurationError, ContractError, DimMismatchError,
                           TruncatedFileError)


def small(**kw):
    return SyntheticConfig(**{**dict(num_videos=30, seed=3), **kw})


# ---------------------------------------------------------------- generator

def test_zero_noise_segment_equals_class_mean():
    cfg = SyntheticConfig(num_classes=3, feature_dim=6, num_videos=1, noise=0.0,
                          segments_range=(1, 1), classes_per_video=(1, 1), seed=4)
    v = generate_synthetic(cfg)[0]
    (s, e, c), = v.gt_segments
    means = class_means(3, 6, cfg.separation, np.random.default_rng([4, 1]))
    np.testing.assert_array_equal(v.features[s:e], np.tile(means[c - 1], (e - s, 1)))
    mask = np.ones(v.T, bool)
    mask[s:e] = False
    assert np.all(v.features[mask] == 0)


def test_generation_is_deterministic():
    a, b = generate_synthetic(small()), generate_synthetic(small())
    for x, y in zip(a, b):
        assert x.id == y.id and x.gt_segments == y.gt_segments
        assert np.array_equal(x.features, y.features)


def test_nearest_mean_classifier_separates_snippets():
    # C-way nearest class mean over the planted (action) snippets
    cfg = SyntheticConfig(num_videos=60, seed=5)
    videos = generate_synthetic(cfg)
    means = class_means(cfg.num_classes, cfg.feature_dim, cfg.separation,
                        np.random.default_rng([cfg.seed, 1]))
    correct = total = 0
    for v in videos:
        for s, e, c in v.gt_segments:
            d = ((v.features[s:e, None, :] - means[None]) ** 2).sum(-1)
            correct += int((d.argmin(1) == c - 1).sum())
            total += e - s
    assert correct / total > 0.95


def test_segments_valid_and_cover_every_bucket():
    cfg = SyntheticConfig(num_videos=200, seed=1)
    videos = generate_synthetic(cfg)
    for v in videos:
        segs = sorted(v.gt_segments)
        assert all(0 <= s < e <= v.T for s, e, _ in segs)
        assert all(e1 < s2 for (_, e1, _), (s2, _, _) in zip(segs, segs[1:]))
        assert set(c for *_, c in segs) == set(v.classes)
        assert cfg.T_range[0] <= v.T <= cfg.T_range[1]
    counts = bucket_counts(videos, cfg.snippet_duration)
    assert np.all(counts > 0.1 * counts.sum())


def test_bucket_rule_is_right_closed():
    assert bucket_of(1.0) == 0 and bucket_of(1.0001) == 1 and bucket_of(6.0) == 3
    assert bucket_of(100) == 4
    assert bucket_snippet_range(0, 0.64) == (1, 1)    # 0.64 s; 2 snippets = 1.28 s is S
    lo, hi = bucket_snippet_range(4, 0.64, 12.0)
    assert lo * 0.64 > 6 and hi * 0.64 <= 12 and (hi + 1) * 0.64 > 12
    with pytest.raises(ValueError):
        bucket_of(0)


def test_invalid_synthetic_config():
    with pytest.raises(ConfigurationError, match="bucket_probs"):
        generate_synthetic(small(bucket_probs=(0.5, 0.5, 0.5, 0, 0)))
    with pytest.raises(ConfigurationError, match="classes_per_video"):
        generate_synthetic(small(num_classes=2, classes_per_video=(1, 3)))


def test_splits_share_class_means():
    tr, te = make_splits(small(num_videos=10, noise=0.0, classes_per_video=(1, 1)), 5)
    assert len(te) == 5 and tr[0].id.startswith("train") and te[0].id.startswith("test")
    mean_of = {}
    for v in tr + te:
        for s, e, c in v.gt_segments:
            mean_of.setdefault(c, v.features[s])
            np.testing.assert_array_equal(v.features[s], mean_of[c])


# ---------------------------------------------------------------- files

def test_feature_round_trip(tmp_path, rng):
    x = rng.standard_normal((13, 5))
    write_features(tmp_path / "a.asml", x)
    y = read_features(tmp_path / "a.asml", 5)
    np.testing.assert_array_equal(y, x.astype(np.float32))


def test_feature_errors(tmp_path, rng):
    p = tmp_path / "a.asml"
    write_features(p, rng.standard_normal((4, 3)))
    raw = p.read_bytes()
    with pytest.raises(DimMismatchError):
        read_features(p, 2048)
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        read_features(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-4])
    with pytest.raises(TruncatedFileError):
        read_features(tmp_path / "short")
    (tmp_path / "tiny").write_bytes(raw[:7])
    with pytest.raises(TruncatedFileError):
        read_features(tmp_path / "tiny")


def test_dataset_round_trip(tmp_path):
    videos = generate_synthetic(small(num_videos=6))
    write_dataset(tmp_path / "m.json", videos, 5)
    man, back = load_dataset(tmp_path / "m.json")
    assert man.num_classes == 5 and man.feature_dim == 16
    for v, w in zip(videos, back):
        assert v.id == w.id and v.gt_segments == w.gt_segments
        np.testing.assert_array_equal(v.video_label, w.video_label)
        np.testing.assert_allclose(w.features, v.features, rtol=1e-6, atol=1e-6)


def test_manifest_missing_file_named(tmp_path):
    videos = generate_synthetic(small(num_videos=2))
    write_dataset(tmp_path / "m.json", videos, 5)
    missing = tmp_path / "features" / f"{videos[1].id}.asml"
    missing.unlink()
    with pytest.raises(FileNotFoundError, match=videos[1].id):
        load_manifest(tmp_path / "m.json")


def test_manifest_dimension_mismatch(tmp_path):
    videos = generate_synthetic(small(num_videos=2))
    write_dataset(tmp_path / "m.json", videos, 5)
    data = json.loads((tmp_path / "m.json").read_text())
    data["feature_dim"] = 8
    (tmp_path / "m.json").write_text(json.dumps(data))
    with pytest.raises(DimMismatchError):
        load_manifest(tmp_path / "m.json")


def test_resample_video_to_fixed_length():
    v = generate_synthetic(small(num_videos=1))[0]
    r = resample_video(v, 50)
    assert r.features.shape == (50, 16)
    assert all(0 <= s < e <= 50 for s, e, _ in r.gt_segments)
    same = resample_video(v, v.T)
    np.testing.assert_allclose(same.features, v.features)
    assert same.gt_segments == v.gt_segments


# ---------------------------------------------------------------- labels

def test_encode_single_class():
    y_fg, y_bg = encode_labels({3}, 5)
    assert y_fg.tolist() == [0, 0, 1, 0, 0, 0]
    assert y_bg.tolist() == [0, 0, 0, 0, 0, 1]


def test_encode_two_classes_l1():
    y_fg, _ = encode_labels({1, 2}, 5)
    assert y_fg.tolist() == [0.5, 0.5, 0, 0, 0, 0]


def test_encode_errors():
    with pytest.raises(ContractError):
        encode_labels(set(), 5)
    with pytest.raises(ContractError):
        encode_labels({6}, 5)


@given(st.sets(st.integers(1, 8), min_size=1), st.integers(8, 12))
def test_encode_properties(classes, C):
    y_fg, y_bg = encode_labels(classes, C)
    assert y_fg @ y_bg == 0
    assert math.isclose(y_fg.sum(), 1.0) and y_fg[C] == 0
    assert np.count_nonzero(y_fg) == len(classes)


def test_bucket_names():
    assert BUCKET_NAMES == ("XS", "S", "M", "L", "XL")
