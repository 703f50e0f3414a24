"""Ray generation, stratified sampling, compositing and the photometric pose gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, apply_increment, se3_left_jacobian

DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)


class PixelOutOfBounds(ValueError):
    pass


@dataclass
class RayBatch:
    """Pixel set with fixed sample depths.

    Depths are held fixed while the pose varies so that the rendered colour is
    a smooth function of the pose.
    """

    pixels: np.ndarray  # (n, 2) integer (u, v)
    depths: np.ndarray  # (n, N) increasing
    far: np.ndarray  # (n,)

    def __len__(self):
        return len(self.pixels)


def generate_rays(pose: Pose, K: CameraIntrinsics, pixels: np.ndarray):
    """Unit-direction rays through pixel centres; returns ``(origins, dirs)``."""
    pixels = np.asarray(pixels)
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any((u < 0) | (u >= K.width) | (v < 0) | (v >= K.height)):
        raise PixelOutOfBounds("pixel coordinates outside the image")
    cam = np.stack(
        [(u + 0.5 - K.cx) / K.fx, (v + 0.5 - K.cy) / K.fy, np.ones(len(u))], axis=1
    )
    dirs = cam @ pose.R.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def all_pixels(K: CameraIntrinsics) -> np.ndarray:
    vv, uu = np.mgrid[0:K.height, 0:K.width]
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def ray_box(origins, dirs, bmin, bmax, min_near: float = 1e-3):
    """Slab intersection. Missed rays get a degenerate interval at ``min_near``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (np.asarray(bmin) - origins) * inv
        t1 = (np.asarray(bmax) - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    near = np.maximum(tmin, min_near)
    hit = tmax > near
    far = np.where(hit, tmax, near + 1e-3)
    return near, far, hit


def stratified_depths(near, far, n_samples: int, rng: np.random.Generator | None = None):
    """One sample per equal-width bin; bin midpoints when ``rng`` is None."""
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    width = (far - near) / n_samples
    k = np.arange(n_samples)
    if rng is None:
        u = np.full((len(near), n_samples), 0.5)
    else:
        u = rng.random((len(near), n_samples))
    return near[:, None] + (k[None, :] + u) * width[:, None]


def make_batch(pose, K, pixels, bounds, n_samples, rng=None) -> RayBatch:
    origins, dirs = generate_rays(pose, K, pixels)
    near, far, _ = ray_box(origins, dirs, *bounds)
    return RayBatch(np.asarray(pixels), stratified_depths(near, far, n_samples, rng), far)


# ------------------------------------------------------------------ compositing


def composite(colors, sigmas, depths, far, background=DEFAULT_BACKGROUND, return_aux=False):
    """Alpha-composite ``(n, N, 3)`` colours along rays.

    ``delta_i = s_{i+1} - s_i`` with the last interval ending at ``far``; the
    residual transmittance multiplies ``background``.
    """
    colors = np.asarray(colors)
    sigmas = np.asarray(sigmas)
    depths = np.asarray(depths)
    far = np.asarray(far, dtype=depths.dtype)
    delta = np.diff(np.concatenate([depths, far[..., None]], axis=-1), axis=-1)
    tau = sigmas * delta
    csum = np.cumsum(tau, axis=-1)
    # T_i = exp(-sum_{j<i} tau_j); T_end is the background weight
    trans_next = np.exp(-csum)
    trans = np.concatenate([np.ones_like(csum[..., :1]), trans_next[..., :-1]], axis=-1)
    weights = trans - trans_next
    bg_weight = trans_next[..., -1]
    rgb = (weights[..., None] * colors).sum(-2) + bg_weight[..., None] * np.asarray(background)
    if not return_aux:
        return rgb
    return rgb, dict(delta=delta, trans_next=trans_next, weights=weights, bg_weight=bg_weight)


def composite_backward(g_rgb, colors, aux, background=DEFAULT_BACKGROUND):
    """Gradients of a loss w.r.t. per-sample colours and densities."""
    weights, trans_next, delta = aux["weights"], aux["trans_next"], aux["delta"]
    g_colors = weights[..., None] * g_rgb[..., None, :]
    # d rgb / d tau_i = T_{i+1} c_i - (sum_{k>i} w_k c_k + T_end * bg)
    wc = weights[..., None] * colors
    tail = np.cumsum(wc[..., ::-1, :], axis=-2)[..., ::-1, :]
    after = tail - wc + aux["bg_weight"][..., None, None] * np.asarray(background)
    d_tau = trans_next[..., None] * colors - after
    g_tau = (d_tau * g_rgb[..., None, :]).sum(-1)
    return g_colors, g_tau * delta


# ------------------------------------------------------------- field rendering


def render_rays(field, origins, dirs, depths, far, embedding, omega=None, background=DEFAULT_BACKGROUND, keep=False):
    n, N = depths.shape
    dt = field.dtype
    pts = (origins[:, None, :] + depths[..., None] * dirs[:, None, :]).reshape(-1, 3)
    d_rep = np.repeat(dirs, N, axis=0)
    emb = np.asarray(embedding)
    if emb.ndim == 2:
        emb = np.repeat(emb, N, axis=0)
    rgb_s, sigma_s, fcache = field.forward(pts, d_rep, emb, omega, keep=keep)
    colors = rgb_s.reshape(n, N, 3)
    sigmas = sigma_s.reshape(n, N)
    rgb, aux = composite(colors, sigmas, depths.astype(dt), far.astype(dt), np.asarray(background, dt), return_aux=True)
    if not keep:
        return rgb, None
    return rgb, dict(fcache=fcache, colors=colors, aux=aux, pts=pts, dirs=d_rep, shape=(n, N))


def render_backward(field, cache, g_rgb, background=DEFAULT_BACKGROUND, want_params=True, want_inputs=True):
    n, N = cache["shape"]
    dt = field.dtype
    g_colors, g_sigmas = composite_backward(g_rgb.astype(dt), cache["colors"], cache["aux"], np.asarray(background, dt))
    return field.backward(
        cache["fcache"], g_colors.reshape(-1, 3), g_sigmas.reshape(-1), want_params=want_params, want_inputs=want_inputs
    )


def render_image(field, pose, K, bounds, n_samples=64, embedding=None, omega=None, background=DEFAULT_BACKGROUND, chunk=4096):
    """Deterministic (bin-midpoint) render of a full image, ``(H, W, 3)``."""
    if embedding is None:
        embedding = field.mean_embedding()
    pixels = all_pixels(K)
    out = np.empty((len(pixels), 3))
    for start in range(0, len(pixels), chunk):
        px = pixels[start:start + chunk]
        origins, dirs = generate_rays(pose, K, px)
        near, far, _ = ray_box(origins, dirs, *bounds)
        depths = stratified_depths(near, far, n_samples)
        rgb, _ = render_rays(field, origins, dirs, depths, far, embedding, omega, background)
        out[start:start + chunk] = rgb
    return out.reshape(K.height, K.width, 3)


# --------------------------------------------------------------------- losses


def photometric_loss(rendered, observed) -> float:
    """Sum over rays of squared colour residuals."""
    rendered = np.asarray(rendered, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if rendered.shape != observed.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {observed.shape}")
    return float(((rendered - observed) ** 2).sum())


def observed_colors(image, pixels):
    pixels = np.asarray(pixels)
    return np.asarray(image)[pixels[:, 1], pixels[:, 0]]


def loss_and_local_grad(field, pose, K, batch: RayBatch, observed_rgb, embedding, omega=None, background=DEFAULT_BACKGROUND):
    """Photometric loss at ``pose`` and its gradient w.r.t. a left increment at zero.

    Returns ``(loss, grad6, rendered)`` with ``grad6 = [d/d rho, d/d phi]``.
    """
    origins, dirs = generate_rays(pose, K, batch.pixels)
    rgb, cache = render_rays(field, origins, dirs, batch.depths, batch.far, embedding, omega, background, keep=True)
    resid = rgb.astype(np.float64) - observed_rgb
    loss = float((resid**2).sum())
    g = render_backward(field, cache, 2 * resid, background, want_params=False)
    gx = g.x.astype(np.float64)
    gd = g.d.astype(np.float64)
    pts = cache["pts"].astype(np.float64)
    # d(exp(delta) p)/d delta = [I | -skew(p)]  =>  phi-gradient is p x g
    g_rho = gx.sum(0)
    g_phi = np.cross(pts, gx).sum(0) + np.cross(cache["dirs"].astype(np.float64), gd).sum(0)
    return loss, np.concatenate([g_rho, g_phi]), rgb


def loss_grad_wrt_twist(field, base_pose, xi, K, batch: RayBatch, observed_rgb, embedding, omega=None, background=DEFAULT_BACKGROUND):
    """Loss of ``exp(xi) @ base_pose`` and its exact gradient w.r.t. ``xi``.

    The Jacobians are evaluated about the current pose and mapped back to
    ``xi`` through the SE(3) left Jacobian.
    """
    pose = apply_increment(xi, base_pose)
    loss, g_local, rgb = loss_and_local_grad(field, pose, K, batch, observed_rgb, embedding, omega, background)
    return loss, se3_left_jacobian(xi).T @ g_local, rgb


# --------------------------------------------------------------- image output


def to_uint8(image) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, image, seed: int | None = None) -> None:
    """8-bit RGB; ``seed`` goes into a text chunk when given."""
    from PIL import Image, PngImagePlugin

    info = None
    if seed is not None:
        info = PngImagePlugin.PngInfo()
        info.add_text("seed", str(seed))
    Image.fromarray(to_uint8(image), mode="RGB").save(path, pnginfo=info)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_raw(path, image, seed: int | None = None) -> None:
    """Planar little-endian float32: header line ``H W 3 [seed=N]`` then R, G, B planes."""
    image = np.asarray(image, dtype="<f4")
    h, w, c = image.shape
    tail = f" seed={seed}" if seed is not None else ""
    with open(path, "wb") as fh:
        fh.write(f"{h} {w} {c}{tail}\n".encode())
        fh.write(np.ascontiguousarray(image.transpose(2, 0, 1)).tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w, c = (int(v) for v in fh.readline().split()[:3])
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(c, h, w).transpose(1, 2, 0).copy()
