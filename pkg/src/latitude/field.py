"""Radiance field MLP with hand-written reverse-mode gradients.

A field maps ``(x, d, appearance)`` to ``(rgb, sigma)``.  The density head sees
only the encoded position; the colour head also receives the encoded view
direction and the per-image appearance embedding.  A
:class:`RadianceField` holds one MLP per spatial cell and routes each point to
the cell with the nearest horizontal centroid.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoding import EncodingConfig, encode_with_derivative


class NonFiniteInput(ValueError):
    pass


@dataclass
class FieldConfig:
    depth: int = 4
    width: int = 64
    pos_bands: int = 8
    dir_bands: int = 4
    app_dim: int = 4
    include_raw_input: bool = True
    density_activation: str = "softplus"
    # positions are mapped through (x - center) / scale before encoding
    center: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    # apply the position filter weights to the direction encoding too
    filter_directions: bool = True

    @property
    def skip_layer(self) -> int:
        return self.depth // 2

    @property
    def pos_encoding(self) -> EncodingConfig:
        return EncodingConfig(self.pos_bands, self.include_raw_input, 3)

    @property
    def dir_encoding(self) -> EncodingConfig:
        return EncodingConfig(self.dir_bands, self.include_raw_input, 3)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in checkpoint order."""
        pe = self.pos_encoding.output_dim
        de = self.dir_encoding.output_dim
        shapes = []
        for i in range(self.depth):
            fan_in = pe if i == 0 else self.width
            if i == self.skip_layer and i > 0:
                fan_in += pe
            shapes += [(f"W{i}", (fan_in, self.width)), (f"b{i}", (self.width,))]
        half = max(self.width // 2, 1)
        shapes += [
            ("W_sigma", (self.width, 1)),
            ("b_sigma", (1,)),
            ("W_feat", (self.width + de + self.app_dim, half)),
            ("b_feat", (half,)),
            ("W_rgb", (half, 3)),
            ("b_rgb", (3,)),
        ]
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())


def _softplus(z):
    return np.logaddexp(0, z)


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def init_mlp_params(cfg: FieldConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in cfg.layer_shapes():
        if name in ("W_sigma", "b_sigma", "W_rgb", "b_rgb"):
            # zero output layers: untrained field renders grey fog
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.startswith("W"):
            bound = np.sqrt(6.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


class MLP:
    """One cell's network, operating on normalised positions."""

    def __init__(self, cfg: FieldConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @property
    def dtype(self):
        return self.params["W0"].dtype

    def forward(self, xn, d, emb, omega_pos, omega_dir, keep=True):
        cfg, p = self.cfg, self.params
        dt = self.dtype
        xn = xn.astype(dt, copy=False)
        enc_x, denc_x = encode_with_derivative(xn, cfg.pos_encoding, omega_pos, derivative=keep)
        enc_d, denc_d = encode_with_derivative(d.astype(dt, copy=False), cfg.dir_encoding, omega_dir, derivative=keep)
        inputs, masks = [], []
        h = enc_x
        for i in range(cfg.depth):
            if i == cfg.skip_layer and i > 0:
                h = np.concatenate([h, enc_x], axis=1)
            inputs.append(h)
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            mask = z > 0
            h = z * mask
            masks.append(mask)
        z_sigma = (h @ p["W_sigma"] + p["b_sigma"])[:, 0]
        if cfg.density_activation == "softplus":
            sigma = _softplus(z_sigma)
        else:
            sigma = np.maximum(z_sigma, 0)
        feat_in = np.concatenate([h, enc_d, emb.astype(dt, copy=False)], axis=1)
        zf = feat_in @ p["W_feat"] + p["b_feat"]
        fmask = zf > 0
        feat = zf * fmask
        rgb = _sigmoid(feat @ p["W_rgb"] + p["b_rgb"])
        cache = None
        if keep:
            cache = dict(
                enc_x=enc_x, denc_x=denc_x, denc_d=denc_d, inputs=inputs, masks=masks, h=h,
                z_sigma=z_sigma, feat_in=feat_in, fmask=fmask, feat=feat, rgb=rgb,
            )
        return rgb, sigma, cache

    def backward(self, cache, g_rgb, g_sigma, want_params=True, want_inputs=True):
        cfg, p = self.cfg, self.params
        dt = self.dtype
        g_rgb = g_rgb.astype(dt, copy=False)
        g_sigma = g_sigma.astype(dt, copy=False)
        grads = {} if want_params else None
        rgb = cache["rgb"]
        g_zc = g_rgb * rgb * (1 - rgb)
        if want_params:
            grads["W_rgb"] = cache["feat"].T @ g_zc
            grads["b_rgb"] = g_zc.sum(0)
        g_zf = (g_zc @ p["W_rgb"].T) * cache["fmask"]
        if want_params:
            grads["W_feat"] = cache["feat_in"].T @ g_zf
            grads["b_feat"] = g_zf.sum(0)
        g_feat_in = g_zf @ p["W_feat"].T
        w = cfg.width
        de = cfg.dir_encoding.output_dim
        g_h = g_feat_in[:, :w].copy()
        g_denc = g_feat_in[:, w:w + de]
        g_emb = g_feat_in[:, w + de:]

        z_sigma = cache["z_sigma"]
        if cfg.density_activation == "softplus":
            g_zs = g_sigma * _sigmoid(z_sigma)
        else:
            g_zs = g_sigma * (z_sigma > 0)
        if want_params:
            grads["W_sigma"] = cache["h"].T @ g_zs[:, None]
            grads["b_sigma"] = np.array([g_zs.sum()], dtype=dt)
        g_h += g_zs[:, None] * p["W_sigma"][:, 0][None, :]

        pe = cfg.pos_encoding.output_dim
        g_enc_x = None
        for i in reversed(range(cfg.depth)):
            g_z = g_h * cache["masks"][i]
            if want_params:
                grads[f"W{i}"] = cache["inputs"][i].T @ g_z
                grads[f"b{i}"] = g_z.sum(0)
            if i == 0 and not want_inputs:
                break
            g_in = g_z @ p[f"W{i}"].T
            if i == cfg.skip_layer and i > 0:
                g_skip = g_in[:, -pe:]
                g_enc_x = g_skip if g_enc_x is None else g_enc_x + g_skip
                g_h = g_in[:, :-pe]
            elif i == 0:
                g_enc_x = g_in if g_enc_x is None else g_enc_x + g_in
            else:
                g_h = g_in

        g_xn = g_d = None
        if want_inputs:
            n = g_enc_x.shape[0]
            g_xn = (g_enc_x * cache["denc_x"]).reshape(n, -1, 3).sum(1)
            g_d = (g_denc * cache["denc_d"]).reshape(n, -1, 3).sum(1)
        return grads, g_xn, g_d, g_emb


@dataclass
class FieldGrads:
    cells: list[dict[str, np.ndarray]] | None
    appearance: np.ndarray | None
    x: np.ndarray | None
    d: np.ndarray | None
    embedding: np.ndarray | None


@dataclass
class RadianceField:
    """Spatially partitioned field with a shared appearance table."""

    cfg: FieldConfig
    cells: list[dict[str, np.ndarray]]
    centroids: np.ndarray  # (n_cells, 2), horizontal plane
    appearance: np.ndarray  # (n_images, app_dim)
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: FieldConfig, n_images: int, centroids, rng: np.random.Generator, dtype=np.float32):
        centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
        cells = [init_mlp_params(cfg, rng, dtype) for _ in range(len(centroids))]
        appearance = (0.01 * rng.normal(size=(n_images, cfg.app_dim))).astype(dtype)
        return cls(cfg, cells, centroids, appearance)

    @property
    def dtype(self):
        return self.appearance.dtype

    def astype(self, dtype) -> RadianceField:
        cells = [{k: v.astype(dtype) for k, v in c.items()} for c in self.cells]
        return RadianceField(self.cfg, cells, self.centroids.copy(), self.appearance.astype(dtype), dict(self.meta))

    def mean_embedding(self) -> np.ndarray:
        return self.appearance.mean(axis=0)

    def route(self, x: np.ndarray) -> np.ndarray:
        return route(x, self.centroids)

    def normalize(self, x):
        return (x - np.asarray(self.cfg.center)) / self.cfg.scale

    def _omegas(self, omega):
        cfg = self.cfg
        if omega is None:
            omega = np.ones(cfg.pos_bands)
        omega = np.asarray(omega, dtype=np.float64)
        if omega.shape != (cfg.pos_bands,):
            raise ValueError(f"omega must have {cfg.pos_bands} entries")
        if cfg.filter_directions:
            omega_dir = np.ones(cfg.dir_bands)
            k = min(cfg.dir_bands, cfg.pos_bands)
            omega_dir[:k] = omega[:k]
        else:
            omega_dir = np.ones(cfg.dir_bands)
        return omega, omega_dir

    def forward(self, x, d, emb, omega=None, keep=True):
        """Evaluate ``n`` points. ``emb`` is an ``(n, app_dim)`` array or one vector."""
        x = np.asarray(x)
        d = np.asarray(d)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(d))):
            raise NonFiniteInput("non-finite position or direction")
        n = x.shape[0]
        emb = np.asarray(emb)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (n, emb.shape[0]))
        omega_pos, omega_dir = self._omegas(omega)
        xn = self.normalize(x)
        dt = self.dtype
        rgb = np.empty((n, 3), dtype=dt)
        sigma = np.empty(n, dtype=dt)
        caches = []
        if len(self.cells) == 1:
            groups = [(0, slice(None))]
        else:
            cell = self.route(x)
            groups = [(c, np.nonzero(cell == c)[0]) for c in range(len(self.cells))]
        for c, idx in groups:
            mlp = MLP(self.cfg, self.cells[c])
            if not isinstance(idx, slice) and idx.size == 0:
                caches.append((c, idx, None))
                continue
            r, s, cache = mlp.forward(xn[idx], d[idx], emb[idx], omega_pos, omega_dir, keep=keep)
            rgb[idx] = r
            sigma[idx] = s
            caches.append((c, idx, cache))
        return rgb, sigma, (caches, n) if keep else None

    def eval(self, x, d, emb, omega=None):
        rgb, sigma, _ = self.forward(x, d, emb, omega, keep=False)
        return rgb, sigma

    def backward(self, cache, g_rgb, g_sigma, want_params=True, want_inputs=True) -> FieldGrads:
        caches, n = cache
        dt = self.dtype
        cell_grads = [None] * len(self.cells) if want_params else None
        g_x = np.zeros((n, 3), dtype=dt) if want_inputs else None
        g_d = np.zeros((n, 3), dtype=dt) if want_inputs else None
        g_emb = np.zeros((n, self.cfg.app_dim), dtype=dt)
        for c, idx, cc in caches:
            if cc is None:
                if want_params:
                    cell_grads[c] = {k: np.zeros_like(v) for k, v in self.cells[c].items()}
                continue
            mlp = MLP(self.cfg, self.cells[c])
            grads, gx, gd, ge = mlp.backward(cc, g_rgb[idx], g_sigma[idx], want_params, want_inputs)
            if want_params:
                cell_grads[c] = grads
            if want_inputs:
                g_x[idx] = gx / self.cfg.scale
                g_d[idx] = gd
            g_emb[idx] = ge
        return FieldGrads(cell_grads, None, g_x, g_d, g_emb)

    def eval_with_grad(self, x, d, emb, omega=None):
        """Outputs plus Jacobians of each output channel w.r.t. x, d and the embedding.

        Returns ``(rgb, sigma, jac)`` where ``jac[name]`` has shape
        ``(n, 4, dim)`` with output channels ordered ``(r, g, b, sigma)``.
        Intended for small batches (tests, diagnostics).
        """
        rgb, sigma, cache = self.forward(x, d, emb, omega)
        n = len(sigma)
        jac = {"x": np.zeros((n, 4, 3)), "d": np.zeros((n, 4, 3)), "embedding": np.zeros((n, 4, self.cfg.app_dim))}
        for ch in range(4):
            g_rgb = np.zeros((n, 3), dtype=self.dtype)
            g_sigma = np.zeros(n, dtype=self.dtype)
            if ch < 3:
                g_rgb[:, ch] = 1
            else:
                g_sigma[:] = 1
            g = self.backward(cache, g_rgb, g_sigma, want_params=False)
            jac["x"][:, ch] = g.x
            jac["d"][:, ch] = g.d
            jac["embedding"][:, ch] = g.embedding
        return rgb, sigma, jac

    # ------------------------------------------------------------ flat params

    def flat_params(self) -> np.ndarray:
        parts = [self.cells[c][name].ravel() for c in range(len(self.cells)) for name, _ in self.cfg.layer_shapes()]
        parts.append(self.appearance.ravel())
        return np.concatenate(parts)

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat)
        expected = len(self.cells) * self.cfg.param_count() + self.appearance.size
        if flat.size != expected:
            raise ValueError(f"parameter vector has {flat.size} entries, expected {expected}")
        pos = 0
        dt = self.dtype
        for c in range(len(self.cells)):
            for name, shape in self.cfg.layer_shapes():
                size = int(np.prod(shape))
                self.cells[c][name] = flat[pos:pos + size].reshape(shape).astype(dt)
                pos += size
        self.appearance = flat[pos:].reshape(self.appearance.shape).astype(dt)

    def flat_grads(self, grads: FieldGrads, g_appearance: np.ndarray) -> np.ndarray:
        parts = [grads.cells[c][name].ravel() for c in range(len(self.cells)) for name, _ in self.cfg.layer_shapes()]
        parts.append(g_appearance.ravel())
        return np.concatenate(parts)

    # -------------------------------------------------------------- checkpoint

    def save(self, path) -> None:
        """Write ``manifest.txt`` (key=value) and ``params.f32`` into ``path``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        cfg = self.cfg
        lines = {
            "format": "latitude-field-1",
            "depth": cfg.depth,
            "width": cfg.width,
            "pos_bands": cfg.pos_bands,
            "dir_bands": cfg.dir_bands,
            "app_dim": cfg.app_dim,
            "include_raw_input": int(cfg.include_raw_input),
            "density_activation": cfg.density_activation,
            "filter_directions": int(cfg.filter_directions),
            "center": ",".join(repr(float(v)) for v in cfg.center),
            "scale": repr(float(cfg.scale)),
            "n_cells": len(self.cells),
            "centroids": ";".join(f"{float(a)!r},{float(b)!r}" for a, b in self.centroids),
            "n_images": self.appearance.shape[0],
            "param_order": "cell-major; per cell " + ",".join(n for n, _ in cfg.layer_shapes()) + "; then appearance",
        }
        for k, v in self.meta.items():
            lines[f"meta.{k}"] = v
        with open(path / "manifest.txt", "w") as fh:
            for k, v in lines.items():
                fh.write(f"{k}={v}\n")
        self.flat_params().astype("<f4").tofile(path / "params.f32")

    @classmethod
    def load(cls, path) -> RadianceField:
        path = Path(path)
        manifest = path / "manifest.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"field checkpoint not found: {manifest}")
        kv = read_manifest(manifest)
        cfg = FieldConfig(
            depth=int(kv["depth"]),
            width=int(kv["width"]),
            pos_bands=int(kv["pos_bands"]),
            dir_bands=int(kv["dir_bands"]),
            app_dim=int(kv["app_dim"]),
            include_raw_input=bool(int(kv["include_raw_input"])),
            density_activation=kv["density_activation"],
            filter_directions=bool(int(kv["filter_directions"])),
            center=tuple(float(v) for v in kv["center"].split(",")),
            scale=float(kv["scale"]),
        )
        centroids = np.array([[float(a) for a in pair.split(",")] for pair in kv["centroids"].split(";")])
        n_images = int(kv["n_images"])
        cells = [{name: np.zeros(shape, np.float32) for name, shape in cfg.layer_shapes()} for _ in centroids]
        meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
        f = cls(cfg, cells, centroids, np.zeros((n_images, cfg.app_dim), np.float32), meta)
        f.set_flat_params(np.fromfile(path / "params.f32", dtype="<f4"))
        return f


def read_manifest(path) -> dict[str, str]:
    kv = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            kv[k] = v
    return kv


def route(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid in the horizontal plane; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xy = np.atleast_2d(x)[:, :2]
    d2 = ((xy[:, None, :] - np.asarray(centroids)[None, :, :]) ** 2).sum(-1)
    cell = np.argmin(d2, axis=1)  # argmin returns the first minimum
    return int(cell[0]) if single else cell


def grid_centroids(bounds_min, bounds_max, nx: int, ny: int) -> np.ndarray:
    xs = np.linspace(bounds_min[0], bounds_max[0], 2 * nx + 1)[1::2]
    ys = np.linspace(bounds_min[1], bounds_max[1], 2 * ny + 1)[1::2]
    return np.array([[x, y] for y in ys for x in xs])
