import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divnorm.errors import ConfigError, ParseError
from divnorm.synth_data import (
    Dataset,
    SampleMeta,
    SynthConfig,
    dataset_to_csv,
    drop_outfits,
    generate,
    load_dataset,
    save_dataset,
)

SMALL = SynthConfig(n_ids=6, outfits_per_id=4, samples_per_outfit=3, n_cameras=2, d_id=2, d_c=2, d_obs=6, seed=3)
CLEAN = replace(SMALL, noise_std=0.0, id_occlusion_rate=0.0, clothes_occlusion_rate=0.0, mixing="identity")


def test_sample_count_and_ids():
    ds = generate(SMALL)
    assert len(ds) == 6 * 4 * 3
    assert [m.sample_id for m in ds.meta] == list(range(len(ds)))
    owner = {}
    for m in ds.meta:
        assert owner.setdefault(m.clothes_id, m.person_id) == m.person_id
        assert m.camera_id >= 0


def test_splits_per_identity():
    ds = generate(SMALL)
    for pid in range(SMALL.n_ids):
        roles = {}
        for m in ds.meta:
            if m.person_id == pid:
                roles.setdefault(m.split, set()).add(m.clothes_id)
        assert len(roles["query"]) == 1 and len(roles["gallery"]) == 1
        assert roles["query"].isdisjoint(roles["gallery"])
        assert len(roles["train"]) == SMALL.outfits_per_id - 2


def test_same_outfit_bit_identical_without_noise():
    ds = generate(CLEAN)
    rows = {}
    for m, x in zip(ds.meta, ds.features):
        if m.clothes_id in rows:
            assert np.array_equal(rows[m.clothes_id], x)
        rows[m.clothes_id] = x


def test_identity_and_clothes_blocks():
    ds = generate(CLEAN)
    by_outfit = {}
    for m, x in zip(ds.meta, ds.features):
        by_outfit.setdefault((m.person_id, m.clothes_id), x)
    (p0, c0), (p1, c1) = [k for k in by_outfit if k[0] == 0][:2]
    a, b = by_outfit[(p0, c0)], by_outfit[(p1, c1)]
    d_id = CLEAN.d_id
    np.testing.assert_array_equal(a[:d_id], b[:d_id])
    assert not np.allclose(a[d_id : d_id + CLEAN.d_c], b[d_id : d_id + CLEAN.d_c])


def test_clothes_signal_has_double_magnitude():
    cfg = replace(CLEAN, mixing="random")
    from divnorm.synth_data import mixing_matrix

    A = mixing_matrix(cfg)
    norms = np.linalg.norm(A, axis=0)
    np.testing.assert_allclose(norms[: cfg.d_id], 1.0)
    np.testing.assert_allclose(norms[cfg.d_id :], 2.0)


def test_generate_is_deterministic():
    assert generate(SMALL) == generate(SMALL)
    assert generate(SMALL) != generate(replace(SMALL, seed=4))


def test_config_errors():
    with pytest.raises(ConfigError):
        generate(replace(SMALL, outfits_per_id=1))
    with pytest.raises(ConfigError):
        generate(replace(SMALL, d_obs=3))
    with pytest.raises(ConfigError):
        generate(replace(SMALL, id_occlusion_rate=1.5))


def test_identifiability_nearest_neighbour():
    ds = generate(CLEAN)
    X = ds.features
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nn = d2.argmin(axis=1)
    for i, j in enumerate(nn):
        assert ds.meta[i].clothes_id == ds.meta[j].clothes_id


# drop_outfits


def train_outfits(ds):
    out = {}
    for m in ds.meta:
        if m.split == "train":
            out.setdefault(m.person_id, set()).add(m.clothes_id)
    return out


def test_drop_outfits_keep_all():
    ds = generate(SMALL)
    assert drop_outfits(ds, 1.0, 0) == ds


def test_drop_outfits_tiny_fraction_keeps_one():
    ds = generate(SMALL)
    kept = train_outfits(drop_outfits(ds, 1e-9, 0))
    assert all(len(v) == 1 for v in kept.values())
    assert set(kept) == set(train_outfits(ds))


def test_drop_outfits_deterministic():
    ds = generate(SMALL)
    assert train_outfits(drop_outfits(ds, 0.5, 7)) == train_outfits(drop_outfits(ds, 0.5, 7))


@settings(max_examples=20, deadline=None)
@given(keep=st.floats(1e-3, 1.0), seed=st.integers(0, 1000))
def test_drop_outfits_invariants(keep, seed):
    ds = generate(SMALL)
    dropped = drop_outfits(ds, keep, seed)
    before = [m for m in ds.meta if m.split != "train"]
    after = [m for m in dropped.meta if m.split != "train"]
    assert before == after
    kept = train_outfits(dropped)
    full = train_outfits(ds)
    assert set(kept) == set(full)
    for pid, cids in kept.items():
        assert len(cids) == max(1, math.ceil(keep * len(full[pid]) - 1e-12))
        assert cids <= full[pid]


def test_drop_outfits_rejects_bad_fraction():
    with pytest.raises(ConfigError):
        drop_outfits(generate(SMALL), 0.0, 0)


# csv


def test_round_trip(tmp_path):
    ds = generate(SMALL)
    path = tmp_path / "ds.csv"
    save_dataset(ds, path)
    assert load_dataset(path) == ds
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    assert raw.splitlines()[0] == b"sample_id,person_id,clothes_id,camera_id,split,f0,f1,f2,f3,f4,f5"


def test_round_trip_10k_rows(tmp_path):
    rng = np.random.default_rng(0)
    n, d = 10_000, 4
    feats = rng.normal(size=(n, d)) * 10.0 ** rng.integers(-30, 30, size=(n, d))
    meta = [SampleMeta(i, i % 97, i % 97 + 97 * (i % 3), i % 5, ("train", "query", "gallery")[i % 3]) for i in range(n)]
    ds = Dataset(feats, meta)
    path = tmp_path / "big.csv"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.count_nonzero(back.features != ds.features) == 0
    assert back.meta == ds.meta


def write(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    return p


def test_missing_person_column(tmp_path):
    p = write(tmp_path, "sample_id,clothes_id,camera_id,split,f0\n0,0,0,train,1.0\n")
    with pytest.raises(ParseError, match="person_id"):
        load_dataset(p)


def test_bad_rows_report_line(tmp_path):
    header = "sample_id,person_id,clothes_id,camera_id,split,f0,f1\n"
    p = write(tmp_path, header + "0,0,0,0,train,1.0,2.0\n1,0,0,1,train,abc,2.0\n")
    with pytest.raises(ParseError, match="line 3"):
        load_dataset(p)
    p = write(tmp_path, header + "0,0,0,0,train,1.0\n")
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(p)
    p = write(tmp_path, header + "0,0,0,0,test,1.0,2.0\n")
    with pytest.raises(ParseError, match="split"):
        load_dataset(p)


def test_csv_text_is_deterministic():
    assert dataset_to_csv(generate(SMALL)) == dataset_to_csv(generate(SMALL))
