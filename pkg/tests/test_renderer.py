import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latitude.field import FieldConfig, RadianceField
from latitude.geometry import CameraIntrinsics, Pose, apply_increment, look_at, se3_exp
from latitude.renderer import (
    PixelOutOfBounds,
    RayBatch,
    composite,
    generate_rays,
    load_png,
    load_raw,
    loss_grad_wrt_twist,
    make_batch,
    photometric_loss,
    render_rays,
    save_png,
    save_raw,
    stratified_depths,
)
from latitude.scene import oracle_composite

K = CameraIntrinsics(fx=20.0, fy=20.0, cx=8.0, cy=6.0, width=16, height=12)


def test_principal_ray_points_forward():
    o, d = generate_rays(Pose.identity(), K, np.array([[7.5, 5.5]]))
    np.testing.assert_allclose(d[0], [0, 0, 1], atol=1e-15)
    np.testing.assert_array_equal(o[0], 0)


def test_translation_only_moves_origins():
    px = np.array([[0, 0], [15, 11], [3, 9]])
    o0, d0 = generate_rays(Pose.identity(), K, px)
    o1, d1 = generate_rays(Pose(np.array([1.0, 0, 0, 0]), np.array([1.0, -2, 3])), K, px)
    np.testing.assert_array_equal(d0, d1)
    np.testing.assert_array_equal(o1 - o0, np.broadcast_to([1.0, -2, 3], o0.shape))
    np.testing.assert_allclose(np.linalg.norm(d1, axis=1), 1, atol=1e-12)


def test_out_of_bounds_pixel():
    with pytest.raises(PixelOutOfBounds):
        generate_rays(Pose.identity(), K, np.array([[16, 0]]))


def test_midpoint_depths():
    np.testing.assert_allclose(stratified_depths(0.0, 1.0, 4), [[0.125, 0.375, 0.625, 0.875]])
    with pytest.raises(ValueError):
        stratified_depths(0.0, 1.0, 1)


def test_random_depths_in_bins():
    rng = np.random.default_rng(0)
    near = rng.uniform(0, 1, size=50)
    far = near + rng.uniform(0.5, 3, size=50)
    s = stratified_depths(near, far, 16, rng)
    assert np.all(np.diff(s, axis=1) > 0)
    assert np.all((s >= near[:, None]) & (s <= far[:, None]))


def test_depth_histogram_uniform_within_bins():
    rng = np.random.default_rng(1)
    n = 100_000
    s = stratified_depths(np.zeros(n), np.full(n, 4.0), 4, rng)
    # position inside each unit bin should be uniform
    frac = (s - np.arange(4)).ravel()
    counts, _ = np.histogram(frac, bins=10, range=(0, 1))
    expected = frac.size / 10
    sigma = np.sqrt(expected * (1 - 0.1))
    assert np.all(np.abs(counts - expected) <= 3 * sigma)


# ----------------------------------------------------------------- compositing


def random_sequence(rng, n=7, N=9):
    colors = rng.random((n, N, 3))
    sigmas = rng.exponential(2.0, size=(n, N)) * (rng.random((n, N)) < 0.7)
    depths = np.sort(rng.uniform(0, 5, size=(n, N)), axis=1)
    far = depths[:, -1] + rng.uniform(0.01, 1, size=n)
    return colors, sigmas, depths, far


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_partition_of_unity(seed):
    rng = np.random.default_rng(seed)
    colors, sigmas, depths, far = random_sequence(rng)
    _, aux = composite(colors, sigmas, depths, far, return_aux=True)
    assert np.all(aux["weights"] >= 0)
    total = aux["weights"].sum(-1) + aux["bg_weight"]
    assert np.max(np.abs(total - 1)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_independent_compositing(seed):
    rng = np.random.default_rng(seed)
    colors, sigmas, depths, far = random_sequence(rng)
    bg = rng.random(3)
    got = composite(colors, sigmas, depths, far, bg)
    want = oracle_composite(colors, sigmas, depths, far, bg)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_empty_scene_gives_background():
    rng = np.random.default_rng(2)
    colors, _, depths, far = random_sequence(rng)
    bg = np.array([0.2, 0.4, 0.6])
    out = composite(colors, np.zeros(depths.shape), depths, far, bg)
    assert np.array_equal(out, np.broadcast_to(bg, out.shape))


def test_opaque_first_sample():
    colors = np.array([[[0.9, 0.1, 0.3], [0.0, 1.0, 0.0]]])
    depths = np.array([[0.0, 1.0]])
    sig = np.array([[20.0, 5.0]])
    out = composite(colors, sig, depths, np.array([2.0]), (0.5, 0.5, 0.5))
    assert np.max(np.abs(out[0] - colors[0, 0])) <= 1e-8


def test_photometric_loss_examples():
    a = np.random.default_rng(3).random((5, 3))
    assert photometric_loss(a, a) == 0.0
    assert photometric_loss([[0.1, 0, 0]], [[0, 0, 0]]) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        photometric_loss(np.zeros((2, 3)), np.zeros((3, 3)))


# -------------------------------------------------------------- pose gradient


def small_field(rng, dtype=np.float64):
    cfg = FieldConfig(depth=2, width=16, pos_bands=4, dir_bands=2, app_dim=2, scale=2.0)
    f = RadianceField.create(cfg, 2, [[0.0, 0.0]], rng, dtype)
    for cell in f.cells:
        for name, arr in cell.items():
            cell[name] = rng.normal(scale=0.6, size=arr.shape).astype(dtype)
    return f


def twist_setup(seed, dtype=np.float64):
    rng = np.random.default_rng(seed)
    field = small_field(rng, dtype)
    eye = rng.normal(size=3)
    eye = 4.0 * eye / np.linalg.norm(eye)
    base = look_at(eye, rng.normal(scale=0.3, size=3), up=(0, 0, 1))
    bounds = (np.full(3, -2.0), np.full(3, 2.0))
    px = np.stack([rng.integers(0, K.width, 12), rng.integers(0, K.height, 12)], axis=1)
    batch = make_batch(base, K, px, bounds, 16)
    observed = rng.random((12, 3))
    xi = np.concatenate([rng.normal(scale=0.1, size=3), rng.normal(scale=0.05, size=3)])
    return field, base, batch, observed, xi


def fd_twist(field, base, xi, batch, observed, emb, omega, h=1e-6):
    # h=1e-4 straddles ReLU kinks for the rotation directions; 1e-6 is converged
    fd = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        vals = []
        for sgn in (1, -1):
            pose = apply_increment(xi + sgn * e, base)
            o, d = generate_rays(pose, K, batch.pixels)
            rgb, _ = render_rays(field, o, d, batch.depths, batch.far, emb, omega)
            vals.append(photometric_loss(rgb, observed))
        fd[k] = (vals[0] - vals[1]) / (2 * h)
    return fd


@pytest.mark.parametrize("seed", range(20))
def test_twist_gradient_matches_finite_differences(seed):
    field, base, batch, observed, xi = twist_setup(seed)
    emb = np.array([0.3, -0.2])
    omega = np.ones(field.cfg.pos_bands)
    _, g, _ = loss_grad_wrt_twist(field, base, xi, K, batch, observed, emb, omega)
    fd = fd_twist(field, base, xi, batch, observed, emb, omega)
    assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


def test_low_band_gradient_differs_but_is_exact():
    field, base, batch, observed, xi = twist_setup(11)
    emb = np.zeros(2)
    grads = []
    for omega in (np.ones(4), np.array([1.0, 1.0, 0.0, 0.0])):
        _, g, _ = loss_grad_wrt_twist(field, base, xi, K, batch, observed, emb, omega)
        fd = fd_twist(field, base, xi, batch, observed, emb, omega)
        assert np.linalg.norm(g - fd) <= 1e-3 * np.linalg.norm(fd)
        grads.append(g)
    assert np.linalg.norm(grads[0] - grads[1]) > 1e-3 * np.linalg.norm(grads[0])


def test_gradient_vanishes_at_true_pose():
    field, base, batch, _, _ = twist_setup(12)
    emb = np.zeros(2)
    o, d = generate_rays(base, K, batch.pixels)
    observed, _ = render_rays(field, o, d, batch.depths, batch.far, emb)
    loss, g, _ = loss_grad_wrt_twist(field, base, np.zeros(6), K, batch, observed, emb)
    assert loss == 0.0
    assert np.linalg.norm(g) == 0.0


def test_fixed_depths_follow_the_pose():
    # the batch keeps its depths; only ray geometry moves with xi
    field, base, batch, observed, _ = twist_setup(13)
    moved = apply_increment(np.array([0.1, 0, 0, 0, 0, 0]), base)
    o, _ = generate_rays(moved, K, batch.pixels)
    np.testing.assert_allclose(o[0] - base.translation, [0.1, 0, 0], atol=1e-12)
    assert isinstance(batch, RayBatch) and batch.depths.shape == (12, 16)


# --------------------------------------------------------------------- output


def test_png_and_raw_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.random((5, 7, 3))
    save_raw(tmp_path / "a.raw", img)
    np.testing.assert_array_equal(load_raw(tmp_path / "a.raw"), img.astype(np.float32))
    save_png(tmp_path / "a.png", img)
    back = load_png(tmp_path / "a.png")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    header = (tmp_path / "a.raw").read_bytes().split(b"\n", 1)[0]
    assert header == b"5 7 3"
