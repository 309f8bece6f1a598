from dataclasses import replace

import numpy as np
import pytest

from divnorm.diffnet import Param
from divnorm.errors import ConfigError, NonFiniteError, ParseError
from divnorm.numerics import SeededRng
from divnorm.synth_data import Dataset, SampleMeta, SynthConfig, generate
from divnorm.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    decode_checkpoint,
    encode_checkpoint,
    lr_at_epoch,
    model_config_for,
    pk_batches,
    train_run,
)

TINY = SynthConfig(n_ids=10, outfits_per_id=4, samples_per_outfit=4, n_cameras=2, d_id=3, d_c=3, d_obs=8)
FAST = TrainConfig(P=4, K=4, epochs=4, lr0=3.5e-3)


def tiny_ds(seed=0):
    return generate(replace(TINY, seed=seed))


# sampler


def test_pk_batch_shape():
    ds = generate(SynthConfig(seed=0))
    batches = pk_batches(ds, 8, 8, SeededRng(0))
    for idx in batches:
        assert len(idx) == 64
        pids = [ds.meta[i].person_id for i in idx]
        assert len(set(pids)) == 8
        assert all(pids.count(p) == 8 for p in set(pids))
        assert all(ds.meta[i].split == "train" for i in idx)


def test_pk_covers_every_identity():
    ds = generate(SynthConfig(seed=1))
    batches = pk_batches(ds, 8, 8, SeededRng(1))
    seen = {ds.meta[i].person_id for b in batches for i in b}
    assert seen == {m.person_id for m in ds.meta if m.split == "train"}


def test_pk_replacement_for_small_identity():
    meta = [SampleMeta(i, i // 8 if i < 64 else 8, 0, 0, "train") for i in range(67)]
    meta = [replace(m, clothes_id=m.person_id) for m in meta]
    ds = Dataset(np.zeros((67, 2)), meta)
    for seed in range(5):
        for idx in pk_batches(ds, 9, 8, SeededRng(seed)):
            small = [i for i in idx if ds.meta[i].person_id == 8]
            assert len(small) == 8
            assert set(small) <= {64, 65, 66}


def test_pk_deterministic():
    ds = tiny_ds()
    a = pk_batches(ds, 4, 4, SeededRng(3, 500, 0))
    b = pk_batches(ds, 4, 4, SeededRng(3, 500, 0))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_pk_needs_p_identities():
    with pytest.raises(ConfigError):
        pk_batches(tiny_ds(), 11, 2, SeededRng(0))


# schedule and optimizer


def test_lr_schedule_values():
    cfg = TrainConfig()
    assert lr_at_epoch(0, cfg) == 3.5e-4
    assert lr_at_epoch(19, cfg) == 3.5e-4
    assert lr_at_epoch(20, cfg) == 3.5e-5
    assert lr_at_epoch(40, cfg) == 3.5e-6


def test_adam_first_step_is_signed_lr():
    g = np.array([[0.3, -2.0, 1e-3]])
    p = {"w": Param("w", np.zeros((1, 3)))}
    adam_step(p, {"w": g}, AdamState(), 1e-3, TrainConfig())
    np.testing.assert_allclose(p["w"].value, -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_zero_gradient_is_noop():
    p = {"w": Param("w", np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 1e-3, TrainConfig())
    np.testing.assert_array_equal(p["w"].value, [1.0, -2.0])


def test_adam_converges_on_quadratic():
    # with beta1 = 0.9 the asymptotic contraction per step is at best sqrt(0.9),
    # so 100 steps buy roughly two orders of magnitude: start near 0.1
    A = np.diag([1.0, 2.0, 4.0])
    p = {"x": Param("x", np.array([0.05, -0.025, 0.0125]))}
    state = AdamState()
    for _ in range(100):
        adam_step(p, {"x": A @ p["x"].value}, state, 0.02, TrainConfig())
    assert np.linalg.norm(A @ p["x"].value) < 1e-3


def test_adam_rejects_nan_and_names_tensor():
    p = {"gate.fc.weight": Param("gate.fc.weight", np.zeros(2))}
    with pytest.raises(NonFiniteError, match="gate.fc.weight"):
        adam_step(p, {"gate.fc.weight": np.array([np.nan, 0.0])}, AdamState(), 1e-3, TrainConfig())


# training runs


def run(ds, seed=0, **kw):
    rows = []
    ck = train_run(ds, model_config_for(ds, dim=8, seed=seed), replace(FAST, seed=seed), log_rows=rows, **kw)
    return ck, rows


def test_training_is_bit_identical():
    ds = tiny_ds()
    a, _ = run(ds)
    b, _ = run(ds)
    assert encode_checkpoint(a) == encode_checkpoint(b)


@pytest.mark.parametrize("seed", range(3))
def test_loss_decreases(seed):
    _, rows = run(tiny_ds(seed), seed=seed)
    assert rows[-1][1] < rows[0][1]
    assert all(0.0 <= r[4] <= 2.0 for r in rows)


def test_resume_matches_uninterrupted():
    ds = tiny_ds()
    full, _ = run(ds)
    half, _ = run(ds, stop_after=2)
    assert half.epoch == 2
    restored = decode_checkpoint(encode_checkpoint(half))
    resumed = train_run(ds, restored.model_config, restored.train_config, resume=restored)
    assert encode_checkpoint(resumed) == encode_checkpoint(full)


def test_checkpoint_round_trip():
    ck, _ = run(tiny_ds(), stop_after=1)
    data = encode_checkpoint(ck)
    assert data.startswith(b"DIVNORM")
    assert encode_checkpoint(decode_checkpoint(data)) == data
    m1 = ck.build_model()
    m2 = decode_checkpoint(data).build_model()
    ds = tiny_ds()
    np.testing.assert_array_equal(m1.embed(ds.features)[0], m2.embed(ds.features)[0])


def test_checkpoint_corruption():
    ck, _ = run(tiny_ds(), stop_after=1)
    data = encode_checkpoint(ck)
    with pytest.raises(ParseError):
        decode_checkpoint(b"NOTDIVN" + data[7:])
    with pytest.raises(ParseError):
        decode_checkpoint(data[: len(data) // 2])


def test_train_rejects_mismatched_model():
    ds = tiny_ds()
    mc = replace(model_config_for(ds), n_classes=3)
    with pytest.raises(ConfigError):
        train_run(ds, mc, FAST)


def test_baseline_trains():
    ds = tiny_ds()
    rows = []
    train_run(ds, model_config_for(ds, dim=8, kind="baseline"), FAST, log_rows=rows)
    assert rows[-1][1] < rows[0][1]


@pytest.mark.parametrize("seed", range(3))
def test_loss_decreases_on_default_synthetic_data(seed):
    ds = generate(SynthConfig(seed=seed))
    rows = []
    train_run(ds, model_config_for(ds, dim=32, seed=seed), TrainConfig(seed=seed), log_rows=rows)
    assert rows[-1][1] < rows[0][1]
