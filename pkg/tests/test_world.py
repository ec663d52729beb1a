import dataclasses

import numpy as np
import pytest

from d2d import tape
from d2d.critic import CriticConfig, d2d_loss_on_tape, hard_count, logit_threshold, per_class_counts
from d2d.world import (DetectionSet, TapeWorld, WorldCalibrationError, controllability, generate,
                       make_world, oracle_count, oracle_counts, world_from_spec)


def test_default_world_calibration(world):
    assert world.d == 128
    assert world.gain == pytest.approx(4.866, abs=5e-3)


def test_same_seed_identical():
    a, b = make_world(3), make_world(3)
    assert a.gain == b.gain
    for f in ("A", "U", "v", "box_center", "box_size"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_different_seed_different_logits(world):
    x = np.random.default_rng(0).normal(size=world.d)
    z0 = generate(x, world).logits.z
    z1 = generate(x, make_world(1)).logits.z
    assert np.any(z0 != z1)


def test_count_distribution_is_spread(world):
    rng = np.random.default_rng(0)
    counts = [oracle_count(generate(rng.normal(size=world.d), world, [0]), 0.2, 0) for _ in range(1000)]
    assert len(set(counts)) >= 5
    mean = np.mean(counts)
    assert world.slots / 4 <= mean <= world.slots / 2


def test_zero_latent_gives_bias(world):
    z = generate(np.zeros(world.d), world).logits.z
    np.testing.assert_array_equal(z, np.broadcast_to(world.v, z.shape))


def test_generate_deterministic_and_shaped(world):
    x = np.random.default_rng(1).normal(size=world.d)
    a, b = generate(x, world), generate(x, world)
    assert isinstance(a, DetectionSet)
    assert np.array_equal(a.logits.z, b.logits.z)
    assert a.logits.n == world.slots and a.boxes.shape == (world.slots, 4)
    assert np.all((a.boxes >= 0) & (a.boxes <= 1))


def test_dimension_mismatch(world):
    with pytest.raises(ValueError):
        generate(np.zeros(world.d - 1), world)
    with pytest.raises(ValueError):
        generate(np.zeros(world.d), world, [world.n_classes])


def test_world_is_frozen(world):
    with pytest.raises(ValueError):
        world.A[0, 0, 0] = 1.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        world.gain = 2.0


def test_tape_world_matches_numpy(world, rng):
    x = rng.normal(size=world.d)
    g = tape.Graph()
    z = TapeWorld(world, [2, 0])(g.leaf(x))
    np.testing.assert_allclose(z.value.reshape(world.slots, 2), generate(x, world, [2, 0]).logits.z, atol=1e-12)


def test_jacobian_matches_fd(world, rng):
    tw = TapeWorld(world)
    c = rng.normal(size=world.slots * world.n_classes)
    fn = lambda g, x: tape.sum_(tape.mul(tw(x), g.const(c)))
    assert tape.check_gradients(fn, rng.normal(size=world.d), 1e-6, n_coords=40, rng=rng) <= 1e-6


def test_end_to_end_gradient(world):
    rng = np.random.default_rng(4)
    tw = TapeWorld(world, [1])
    cfg = CriticConfig()
    checked = 0
    while checked < 20:
        x = rng.normal(size=world.d)
        z = generate(x, world, [1]).logits.z[:, 0]
        if np.min(np.abs(z - cfg.tau_z)) < 0.02:
            continue
        target = int(rng.integers(0, world.slots + 1))
        fn = lambda g, xt: d2d_loss_on_tape(tw(xt), [target], cfg, 1)[0]
        assert tape.check_gradients(fn, x, 1e-6, rng=rng) <= 1e-5
        checked += 1


def test_oracle_examples():
    tz = logit_threshold(0.2)
    from d2d.critic import LogitMatrix
    low = DetectionSet(LogitMatrix(np.full((5, 2), tz - 1)), np.zeros((5, 4)), (0, 1))
    assert oracle_counts(low, 0.2) == [0, 0]
    z = tz + np.random.default_rng(0).normal(size=(9, 1))
    one = DetectionSet(LogitMatrix(z), np.zeros((9, 4)), (0,))
    assert oracle_count(one, 0.2, 0) == hard_count(z[:, 0], CriticConfig())


def test_oracle_matches_per_class_counts():
    from d2d.critic import LogitMatrix
    rng = np.random.default_rng(8)
    cfg = CriticConfig()
    for _ in range(1000):
        n, m = rng.integers(1, 20), rng.integers(1, 4)
        z = cfg.tau_z + rng.normal(size=(n, m))
        det = DetectionSet(LogitMatrix(z), np.zeros((n, 4)), tuple(range(m)))
        assert oracle_counts(det, 0.2) == [h for _, h in per_class_counts(z, cfg)]


def test_spec_roundtrip(world):
    again = world_from_spec(world.spec())
    assert again.gain == world.gain
    bad = dict(world.spec(), gain=world.gain * 1.1)
    with pytest.raises(ValueError):
        world_from_spec(bad)


def test_bad_world_arguments():
    with pytest.raises(ValueError):
        make_world(0, slots=0)
    with pytest.raises(ValueError):
        make_world(0, slot_dim=1)


def test_calibration_failure_is_reported(monkeypatch):
    import d2d.world as w
    # no gain can push more than about half the slots over the threshold
    monkeypatch.setattr(w, "TARGET_FRACTION", 0.9)
    with pytest.raises(WorldCalibrationError):
        make_world(0)


def test_controllability(world):
    assert controllability(world, n_latents=40) >= 0.9
