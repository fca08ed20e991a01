import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from camf.data import (
    AtlasParcellation,
    DatasetManifest,
    SynthConfig,
    ZeroVarianceWarning,
    compute_fc,
    generate_synthetic,
    load_dataset,
    synthesize,
    write_dataset,
)
from camf.errors import ConfigError, DataError, MissingFileError, ShapeMismatchError
from camf.io import FC_MAGIC, read_fc, write_fc

# T=4, R=3 fixture with its Pearson matrix evaluated term by term and frozen
TS_4x3 = np.array([[1.0, 2.0, 0.5], [2.0, 1.0, 1.5], [4.0, 0.0, -1.0], [3.0, 5.0, 2.0]])
FC_4x3 = np.array(
    [
        [1.0, -0.11952286093343936, -0.3903600291794133],
        [-0.11952286093343936, 1.0, 0.7581753965757455],
        [-0.3903600291794133, 0.7581753965757455, 1.0],
    ]
)


def test_compute_fc_frozen_values():
    np.testing.assert_allclose(compute_fc(TS_4x3), FC_4x3, rtol=1e-13, atol=1e-15)


def test_compute_fc_perfect_and_anti_correlation(rng):
    a = rng.standard_normal(30)
    ts = np.stack([a, a, -a, rng.standard_normal(30)], axis=1)
    fc = compute_fc(ts)
    assert fc[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert fc[0, 2] == pytest.approx(-1.0, abs=1e-12)
    assert np.array_equal(fc, fc.T)
    assert np.all(np.diag(fc) == 1.0)


def test_zero_variance_roi_warns():
    ts = TS_4x3.copy()
    ts[:, 1] = 3.0
    with pytest.warns(ZeroVarianceWarning):
        fc = compute_fc(ts)
    assert fc[1, 0] == 0.0 and fc[1, 2] == 0.0 and fc[1, 1] == 1.0
    assert fc[0, 2] == pytest.approx(FC_4x3[0, 2], rel=1e-13)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.floats(0.1, 50.0),
    st.floats(-100.0, 100.0),
)
def test_compute_fc_affine_invariant(seed, scale, shift):
    ts = np.random.default_rng(seed).standard_normal((20, 5))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        np.testing.assert_allclose(compute_fc(ts * scale + shift), compute_fc(ts), atol=1e-9)


def test_compute_fc_rejects_bad_shapes():
    with pytest.raises(ShapeMismatchError):
        compute_fc(np.zeros(5))
    with pytest.raises(DataError):
        compute_fc(np.array([[1.0, np.nan], [2.0, 3.0]]))


def test_synth_config_rejects_small_grid():
    with pytest.raises(ConfigError):
        synthesize(SynthConfig(n_subjects=4, grid_shape=(4, 4, 4)))
    with pytest.raises(ConfigError):
        synthesize(SynthConfig(n_subjects=4, mode="nope"))


def test_synth_deterministic(tmp_path):
    cfg = SynthConfig(n_subjects=6, seed=7, noise=0.3)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) > 12
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def _block_feature(samples, block):
    b = np.asarray(block)
    feats = []
    for s in samples:
        sub = s.fc[np.ix_(b, b)]
        feats.append(sub[~np.eye(len(b), dtype=bool)].mean())
    return np.array(feats)[:, None]


def _blob_feature(samples, ds):
    atlas = ds.atlas
    center = np.array(ds.metadata["blob_center"])
    r = ds.metadata["blob_radius"]
    coords = np.stack(np.meshgrid(*[np.arange(s) for s in atlas.labels.shape], indexing="ij"), -1)
    blob = (((coords - center) ** 2).sum(-1) <= r**2) & (atlas.labels == ds.metadata["blob_region"])
    return np.array([s.volume[blob].mean() for s in samples])[:, None]


def _probe(x, y):
    clf = LogisticRegression(C=1e4, max_iter=2000).fit(x, y)
    return clf.score(x, y)


def test_noiseless_fc_only_block_is_separable():
    ds = synthesize(SynthConfig(n_subjects=100, mode="fc_only", noise=0.0, seed=11))
    y = np.array([s.label for s in ds.samples])
    assert _probe(_block_feature(ds.samples, ds.metadata["fc_block"]), y) == 1.0


def test_cross_modal_needs_both_modalities():
    ds = synthesize(SynthConfig(n_subjects=200, mode="cross_modal", noise=0.5, seed=5))
    y = np.array([s.label for s in ds.samples])
    fc_acc = _probe(_block_feature(ds.samples, ds.metadata["fc_block"]), y)
    vol_acc = _probe(_blob_feature(ds.samples, ds), y)
    assert fc_acc <= 0.65 and vol_acc <= 0.65
    # joint rule on the clean factors
    factors = ds.metadata["factors"]
    oracle = np.array([int(factors[s.subject_id][0] * factors[s.subject_id][1] > 0) for s in ds.samples])
    assert np.mean(oracle == y) == 1.0


def test_round_trip_equals_generator(tmp_path):
    ds = synthesize(SynthConfig(n_subjects=5, seed=2, noise=0.2))
    path = write_dataset(ds, tmp_path, seed=2)
    loaded = load_dataset(path)
    assert [s.subject_id for s in loaded] == [s.subject_id for s in ds.samples]
    assert loaded == ds.samples
    assert load_dataset(path, workers=3) == ds.samples
    atlas = AtlasParcellation.load(tmp_path / "atlas.nii")
    assert np.array_equal(atlas.labels, ds.atlas.labels)
    assert atlas.region_names == ds.atlas.region_names


def test_four_subject_manifest_in_order(tmp_path):
    ds = synthesize(SynthConfig(n_subjects=4, seed=9))
    path = write_dataset(ds, tmp_path)
    m = DatasetManifest.read(path)
    m.entries.reverse()
    path.write_text(m.to_json())
    ids = [s.subject_id for s in load_dataset(path)]
    assert ids == ["sub-0003", "sub-0002", "sub-0001", "sub-0000"]


def test_wrong_fc_shape_names_subject(tmp_path):
    ds = synthesize(SynthConfig(n_subjects=4, seed=9))
    path = write_dataset(ds, tmp_path)
    write_fc(tmp_path / "fc" / "sub-0002.fc", np.zeros((31, 32)))
    with pytest.raises(ShapeMismatchError, match="sub-0002"):
        load_dataset(path)


def test_missing_file_names_subject(tmp_path):
    ds = synthesize(SynthConfig(n_subjects=4, seed=9))
    path = write_dataset(ds, tmp_path)
    (tmp_path / "volumes" / "sub-0001.nii").unlink()
    with pytest.raises(MissingFileError, match="sub-0001"):
        load_dataset(path)


def test_fc_container_layout(tmp_path):
    m = np.arange(6, dtype=np.float32).reshape(2, 3)
    p = write_fc(tmp_path / "x.fc", m)
    raw = p.read_bytes()
    assert raw[:8] == FC_MAGIC and len(raw) == 8 + 6 * 4
    assert np.array_equal(np.frombuffer(raw[8:], "<f4").reshape(2, 3), m)
    assert json.loads((tmp_path / "x.fc.json").read_text()) == {"rows": 2, "cols": 3, "dtype": "float32"}
    assert np.array_equal(read_fc(p), m)
    p.write_bytes(raw[:-4])
    with pytest.raises(ShapeMismatchError):
        read_fc(p)
    p.write_bytes(b"BADMAGIC" + raw[8:])
    with pytest.raises(DataError):
        read_fc(p)
