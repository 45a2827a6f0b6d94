import math

import numpy as np
import pytest

from advart.adam import AdamState, NonFiniteGradient
from advart.detector import DetectorConfig, GridDetector, synth_dataset
from advart.imaging import builtin_artwork, ssim
from advart.losses import LossWeights
from advart.optimize import (
    CraftError,
    Plateau,
    adam_step,
    craft_patch,
    load_patch,
    load_patch_state,
    resume_run,
    save_patch_state,
)
from advart.patchops import EOTConfig, init_patch

TINY = DetectorConfig(input_size=160, channels=(4, 4, 4, 4))


@pytest.fixture(scope="module")
def tiny():
    return GridDetector.init(TINY, seed=5)


@pytest.fixture(scope="module")
def scenes():
    return synth_dataset(2, 10)


# --- Adam ---------------------------------------------------------------------


def test_adam_three_step_hand_recurrence():
    lr, b1, b2, eps = 0.03, 0.9, 0.999, 1e-8
    grads = [0.5, -0.2, 0.1]
    # hand-executed scalar recurrence
    p, m, v, expect = 0.4, 0.0, 0.0, []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        expect.append(p)

    state = AdamState(lr=lr)
    x = np.full((2, 2, 3), 0.4)
    for g, want in zip(grads, expect):
        x = adam_step(state, x, np.full_like(x, g))
        np.testing.assert_allclose(x, want, atol=1e-12, rtol=0)
    assert state.step_count == 3


def test_adam_first_step_is_lr_against_sign():
    state = AdamState(lr=0.03)
    x = np.full((3, 3, 3), 0.5)
    g = np.where(np.arange(27).reshape(3, 3, 3) % 2, 2.5, -0.01)
    new = adam_step(state, x, g)
    # eps in the denominator shrinks the step by about eps/|g|
    np.testing.assert_allclose(np.abs(new - x), 0.03, rtol=1e-5)
    assert np.all(np.sign(new - x) == -np.sign(g))


def test_adam_zero_grad_leaves_patch():
    x = np.random.default_rng(0).uniform(size=(4, 4, 3))
    assert np.array_equal(adam_step(AdamState(), x, np.zeros_like(x)), x)


def test_adam_clamps_to_unit_interval():
    x = np.array([[[0.0, 1.0, 0.5]]])
    new = adam_step(AdamState(lr=0.5), x, np.array([[[1.0, -1.0, 0.0]]]))
    assert new.min() >= 0.0 and new.max() <= 1.0


def test_adam_non_finite_names_step():
    state = AdamState()
    x = np.zeros((2, 2, 3))
    adam_step(state, x, np.ones_like(x))
    with pytest.raises(NonFiniteGradient, match="step 2"):
        adam_step(state, x, np.full_like(x, np.nan))


def test_plateau_halves_to_floor():
    st = AdamState(lr=0.08)
    pl = Plateau(patience=2)
    for loss in (1.0, 1.0, 0.5, 0.5):  # improving windows
        pl.update(loss, st, 0.08)
    assert st.lr == 0.08
    for _ in range(20):  # flat from here on
        pl.update(0.5, st, 0.08)
    assert st.lr == pytest.approx(0.01)


# --- crafting -------------------------------------------------------------------


def test_similarity_only_descends_in_windows(tiny, scenes):
    target = builtin_artwork("waves", 16)
    for metric in ("mse", "cosine"):
        canvas = init_patch(target, 16, "uniform-random", seed=3)
        run = craft_patch(tiny, scenes, canvas, LossWeights(0, 8, 0, metric), EOTConfig(), iters=300, batch=2)
        sim = np.array([h.sim_raw for h in run.history])
        windows = sim.reshape(3, 100).mean(axis=1)
        assert np.all(np.diff(windows) < 0), (metric, windows)


def test_history_length_and_pixel_range(tiny, scenes):
    canvas = init_patch(builtin_artwork("sunset", 16), 16)
    seen = []
    run = craft_patch(tiny, scenes, canvas, iters=6, batch=2, snapshot_every=2,
                      on_snapshot=lambda r: seen.append((r.iteration, r.canvas.pixels.copy())))
    assert run.iteration == len(run.history) == 6
    assert [i for i, _ in seen] == [2, 4, 6]
    assert all(0 <= px.min() and px.max() <= 1 for _, px in seen)
    for h in run.history:
        assert h.total == pytest.approx(h.det + 8 * h.sim_effective + 0.5 * h.tv, abs=1e-12)


def test_defaults_deterministic(tiny, scenes):
    runs = [craft_patch(tiny, scenes, init_patch(builtin_artwork("mosaic", 16), 16), iters=5, batch=3, seed=9)
            for _ in range(2)]
    assert runs[0].history == runs[1].history
    assert runs[0].canvas.pixels.tobytes() == runs[1].canvas.pixels.tobytes()


def test_no_eot_full_batch_seed_free(tiny, scenes):
    """Without EOT and with the whole dataset per batch the seed has no effect."""
    a, b = (
        craft_patch(tiny, scenes, init_patch(builtin_artwork("waves", 16), 16), eot=EOTConfig.none(),
                    iters=3, batch=len(scenes), seed=s)
        for s in (1, 2)
    )
    assert a.history == b.history


def test_resume_matches_uninterrupted(tiny, scenes, tmp_path):
    canvas = init_patch(builtin_artwork("sunflower", 16), 16)
    full = craft_patch(tiny, scenes, canvas, iters=8, batch=2, seed=4)

    def snap(run):
        if run.iteration == 4:
            save_patch_state(run, tmp_path / "s.bin")

    first = craft_patch(tiny, scenes, canvas, iters=8, batch=2, seed=4, snapshot_every=4, on_snapshot=snap)
    assert first.history == full.history
    resumed = resume_run(tmp_path / "s.bin", full.history[:4], {})
    done = craft_patch(tiny, scenes, canvas, iters=8, batch=2, seed=4, resume=resumed)
    assert done.history == full.history
    assert done.canvas.pixels.tobytes() == full.canvas.pixels.tobytes()


def test_patch_state_round_trip_and_errors(tiny, scenes, tmp_path):
    run = craft_patch(tiny, scenes, init_patch(builtin_artwork("waves", 16), 16), iters=2, batch=2)
    save_patch_state(run, tmp_path / "p.bin")
    header, px, m, v, target = load_patch_state(tmp_path / "p.bin")
    assert header["iteration"] == 2 and px.tobytes() == run.canvas.pixels.tobytes()
    assert np.array_equal(target, run.canvas.target)
    assert np.array_equal(load_patch(tmp_path / "p.bin"), px)
    with pytest.raises(CraftError, match="history"):
        resume_run(tmp_path / "p.bin", run.history[:1], {})
    data = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-16])
    with pytest.raises(CraftError):
        load_patch_state(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(b"hello")
    with pytest.raises(CraftError, match="ADVART-PATCH"):
        load_patch_state(tmp_path / "x.bin")


def test_craft_preconditions(tiny, scenes):
    canvas = init_patch(None, 16, "gray")
    with pytest.raises(CraftError, match="target"):
        craft_patch(tiny, scenes, canvas, LossWeights(1, 8, 0.5), iters=1)
    with pytest.raises(CraftError, match="no scenes"):
        craft_patch(tiny, [], canvas, LossWeights(1, 0, 0.5), iters=1)
    thawed = GridDetector.init(TINY, seed=5)
    thawed.frozen = False
    with pytest.raises(CraftError, match="frozen"):
        craft_patch(thawed, scenes, canvas, LossWeights(1, 0, 0.5), iters=1)


# --- on the trained toy detector -----------------------------------------------------


@pytest.mark.slow
def test_beta_zero_probe_falls_below_clean(trained):
    canvas = init_patch(builtin_artwork("sunset", 32), 32)
    run = craft_patch(trained.model, trained.train, canvas, LossWeights(1, 0, 0), EOTConfig(),
                      iters=500, batch=8, seed=0, probe_scenes=trained.val[:32], probe_every=100)
    assert min(run.probes.values()) < 100.0, run.probes


@pytest.mark.slow
def test_raising_beta_keeps_patch_closer(trained):
    target = builtin_artwork("waves", 32)
    out = {}
    for beta in (0.0, 8.0):
        run = craft_patch(trained.model, trained.train, init_patch(target, 32), LossWeights(1, beta, 0.5),
                          EOTConfig(), iters=150, batch=4, seed=1)
        out[beta] = run.canvas
    assert ssim(out[8.0].pixels, out[8.0].target) >= ssim(out[0.0].pixels, out[0.0].target)
    assert not np.array_equal(out[0.0].pixels, out[8.0].pixels)
