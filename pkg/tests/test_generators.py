import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genrep.autodiff import SeededRNG, Tape, Tensor
from genrep.autodiff import functional as F
from genrep.generators import (ACTIVATION_SHAPES, NeuralGenerator, ProceduralGenerator,
                               SceneParams, distill_neural_generator, generate_with_activations,
                               ground_truth_labels, image_mse, labels_for_latents,
                               latent_to_scene, render, resume_forward, sample_latent)

latents_st = st.lists(st.floats(-3, 3), min_size=12, max_size=12).map(np.array)

PINNED_LATENT = np.linspace(-1.1, 1.1, 12)
PINNED_SCENE = [0.29666536974595115, 0.32352222308056844, 0.12406826713903382,
                0.3924927804947642, 0.43361645963046686, 0.1710168371175001,
                0.1889831628824999, 0.610639233949222, 0.679178699175393,
                0.7407748991821539, 0.7941296281990526, 0.8388910504234148,
                0.25922510081784605, 0.21877964714313114, 0.15485012369050316,
                0.7002582945903374]


def bilinear_up2(a):
    """Half-pixel bilinear 2x upsampling with edge clamping, one axis at a time."""
    def axis_up(x, ax):
        n = x.shape[ax]
        src = np.clip((np.arange(2 * n) + 0.5) / 2 - 0.5, 0, n - 1)
        return np.apply_along_axis(lambda v: np.interp(src, np.arange(n), v), ax, x)
    return axis_up(axis_up(a, -1), -2)


# --- latents and scenes ----------------------------------------------------

def test_sample_latent_zero_scale_and_determinism():
    assert np.array_equal(sample_latent(SeededRNG(0), sigma=0.0), np.zeros(12))
    assert np.array_equal(sample_latent(SeededRNG(3)), sample_latent(SeededRNG(3)))


def test_sample_latent_moments():
    z = sample_latent(SeededRNG(1), n=10_000)
    assert np.all(np.abs(z.mean(0)) < 0.05)
    assert np.all(np.abs(z.var(0) - 1) < 0.05)


def test_zero_latent_gives_range_midpoints():
    p = latent_to_scene(np.zeros(12))
    assert p.circle_center == (0.5, 0.5)
    assert math.isclose(p.radius, (0.08 + 0.25) / 2)
    assert p.half_extents == (0.18, 0.18)
    assert p.background == (0.5, 0.5, 0.5)


def test_saturated_latent_hits_range_bounds():
    l = np.zeros(12)
    l[0], l[2], l[5] = 1e4, -1e4, 1e4
    p = latent_to_scene(l)
    assert p.circle_center[0] == 0.8
    assert p.radius == 0.08
    assert p.half_extents[0] == 0.3


def test_pinned_latent_golden_scene():
    assert np.allclose(latent_to_scene(PINNED_LATENT).as_array(), PINNED_SCENE, rtol=0, atol=1e-15)
    # first coordinate by hand: 0.2 + 0.6 * sigmoid(1.5 * -1.1)
    assert math.isclose(PINNED_SCENE[0], 0.2 + 0.6 / (1 + math.exp(1.65)), rel_tol=1e-14)


def test_latent_to_scene_wrong_dimension():
    with pytest.raises(ValueError):
        latent_to_scene(np.zeros(11))


@settings(max_examples=50, deadline=None)
@given(latents_st)
def test_scene_parameters_stay_in_range(l):
    v = latent_to_scene(l * 100).as_array()
    lo = [0.2, 0.2, 0.08, 0.2, 0.2, 0.06, 0.06] + [0] * 9
    hi = [0.8, 0.8, 0.25, 0.8, 0.8, 0.3, 0.3] + [1] * 9
    assert np.all(v >= lo) and np.all(v <= hi)


# --- procedural generator ---------------------------------------------------

def test_shapes_and_determinism():
    g = ProceduralGenerator()
    l = sample_latent(SeededRNG(2))
    img, phis = generate_with_activations(g, l)
    assert img.shape == (3, 32, 32)
    assert [p.shape for p in phis] == [tuple(s) for s in ACTIVATION_SHAPES]
    img2, phis2 = generate_with_activations(g, l)
    assert np.array_equal(img, img2) and all(np.array_equal(a, b) for a, b in zip(phis, phis2))


def test_circle_centre_pixel_has_circle_colour():
    g = ProceduralGenerator()
    rng = SeededRNG(4)
    checked = 0
    while checked < 5:
        l = sample_latent(rng)
        p = latent_to_scene(l)
        cx, cy = p.circle_center
        (rx, ry), (hx, hy) = p.rect_center, p.half_extents
        far = max(abs(cx - rx) - hx, abs(cy - ry) - hy) > 0.1
        if not (far and p.radius > 0.12):
            continue
        img, _ = generate_with_activations(g, l)
        i, j = int(cy * 32), int(cx * 32)
        assert np.max(np.abs(img[:, i, j] - p.circle_color)) < 0.02
        checked += 1


@settings(max_examples=20, deadline=None)
@given(latents_st)
def test_pyramid_matches_direct_render(l):
    _, phis = ProceduralGenerator().generate(l[None])
    for phi, (_, r, _) in zip(phis, ACTIVATION_SHAPES):
        assert np.max(np.abs(phi.data - render(l[None], r))) < 1e-10


@settings(max_examples=20, deadline=None)
@given(latents_st, st.integers(1, 4))
def test_substitution_identity(l, m):
    for g in (ProceduralGenerator(), ProceduralGenerator("nonlinear")):
        img, phis = generate_with_activations(g, l)
        assert np.max(np.abs(resume_forward(g, l, m, phis[m - 1]) - img)) < 1e-10


def test_linear_mode_reconstruction_closed_form():
    g = ProceduralGenerator("linear")
    rng = SeededRNG(5)
    for m in range(1, 5):
        l = sample_latent(rng)
        img, phis = generate_with_activations(g, l)
        delta = rng.normal(phis[m - 1].shape, scale=0.3)
        rec = resume_forward(g, l, m, phis[m - 1] + delta)
        up = delta
        for _ in range(4 - m):
            up = bilinear_up2(up)
        assert np.max(np.abs(rec - img - up[:3])) < 1e-9


def test_last_stage_substitution_is_the_head():
    g = ProceduralGenerator("nonlinear")
    l = sample_latent(SeededRNG(6))
    phi = SeededRNG(7).normal((8, 32, 32))
    rec = resume_forward(g, l, 4, phi)
    assert np.array_equal(rec, g.head(Tensor(phi[None])).data[0])


def test_resume_errors():
    g = ProceduralGenerator()
    l = np.zeros(12)
    with pytest.raises(ValueError):
        resume_forward(g, l, 0, np.zeros((8, 4, 4)))
    with pytest.raises(ValueError):
        resume_forward(g, l, 5, np.zeros((8, 4, 4)))
    with pytest.raises(ValueError):
        resume_forward(g, l, 2, np.zeros((8, 4, 4)))


def test_resume_is_differentiable_in_the_substitute():
    g = ProceduralGenerator("nonlinear")
    l = sample_latent(SeededRNG(8))
    _, phis = generate_with_activations(g, l)
    phi = Tensor(phis[1][None], requires_grad=True)
    with Tape() as tape:
        loss = F.squared_l2(resume_forward(g, l, 2, phi))
    (grad,) = tape.backward(loss, [phi])
    assert np.abs(grad).sum() > 0


# --- labels ----------------------------------------------------------------

def scene(circle=((0.3, 0.3), 0.08), rect=((0.8, 0.8), (0.06, 0.06))):
    grey = (0.5, 0.5, 0.5)
    return SceneParams(circle[0], circle[1], rect[0], rect[1], grey, grey, grey)


def test_small_disk_pixel_count():
    lab = ground_truth_labels(scene(), 32)
    expected = math.pi * (0.08 * 32) ** 2
    assert abs((lab == 1).sum() - expected) <= 0.15 * expected


def test_rectangle_covering_circle_hides_it():
    lab = ground_truth_labels(scene(circle=((0.5, 0.5), 0.1), rect=((0.5, 0.5), (0.3, 0.3))), 32)
    assert (lab == 1).sum() == 0


def test_disjoint_shapes_partition_the_image():
    lab = ground_truth_labels(scene(), 32)
    assert sum((lab == c).sum() for c in range(3)) == 32 * 32
    assert set(np.unique(lab)) == {0, 1, 2}


def test_ground_truth_resolution_precondition():
    with pytest.raises(ValueError):
        ground_truth_labels(scene(), 3)


@settings(max_examples=30, deadline=None)
@given(latents_st)
def test_labels_agree_with_occupancy_channels(l):
    _, phis = generate_with_activations(ProceduralGenerator(), l)
    occ_bg, occ_c, occ_r = phis[-1][3:6]
    z_order = np.where(occ_r > 0.5, 2, np.where(occ_c > 0.5, 1, 0))
    assert np.array_equal(labels_for_latents(l)[0], z_order)
    # background occupancy is the complement of the union
    assert np.all((occ_bg > 0.5) == (z_order == 0))


# --- neural generator ------------------------------------------------------

def test_neural_generator_contract():
    g = NeuralGenerator(SeededRNG(0))
    l = sample_latent(SeededRNG(1))
    img, phis = generate_with_activations(g, l)
    assert img.shape == (3, 32, 32)
    assert [p.shape for p in phis] == [tuple(s) for s in ACTIVATION_SHAPES]
    for m in range(1, 5):
        assert np.max(np.abs(resume_forward(g, l, m, phis[m - 1]) - img)) < 1e-10


def test_untrained_neural_generator_error_is_finite_and_positive():
    proc = ProceduralGenerator()
    g0 = distill_neural_generator(proc, steps=0, rng=SeededRNG(1))
    fresh = NeuralGenerator(SeededRNG(1).spawn(1))
    lat = sample_latent(SeededRNG(2), n=16)
    mse = image_mse(g0, proc, lat)
    assert np.isfinite(mse) and mse > 0
    assert mse == image_mse(fresh, proc, lat)


@pytest.mark.slow
def test_generator_distillation_descends():
    proc = ProceduralGenerator()
    for seed in range(3):
        log = []
        distill_neural_generator(proc, steps=501, rng=SeededRNG(seed), log=log)
        assert log[500][1] < log[0][1]


@pytest.mark.slow
def test_generator_distillation_default_run_reaches_threshold():
    proc = ProceduralGenerator()
    g = distill_neural_generator(proc, rng=SeededRNG(1))
    assert image_mse(g, proc, sample_latent(SeededRNG(99), n=64)) < 0.01
    assert all(not p.requires_grad for p in g.parameters())
