"""Absolute pose regression with field-rendered augmentation.

A small convolutional network maps an image to ``(x, y, z, qw, qx, qy, qz)``.
Training mixes real images with virtual views rendered by the radiance field
at poses jittered around the training cameras, each with an appearance
embedding interpolated between two training images.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .geometry import CameraIntrinsics, Pose, canonical_quat, quat_multiply, axis_angle_quat

POSE_DIM = 7


class RegressorError(RuntimeError):
    pass


@dataclass
class AugmentConfig:
    rect_h: float = 3.0  # extent along world x
    rect_w: float = 3.0  # extent along world y
    samples_per_anchor: int = 4
    theta_max: float = math.radians(5.0)
    render_epochs: tuple = (0,)
    render_samples: int = 32

    def __post_init__(self):
        self.render_epochs = tuple(int(e) for e in self.render_epochs)
        if self.rect_h < 0 or self.rect_w < 0:
            raise ValueError("rectangle dimensions must be non-negative")
        if self.theta_max < 0:
            raise ValueError("theta_max must be non-negative")


@dataclass
class RegressorConfig:
    input_size: int = 32
    widths: tuple = (16, 32, 64, 64)
    fc: tuple = (128, 128, 64)  # hidden sizes; the 7-d head is the fourth layer
    epochs: int = 120
    batch_size: int = 16
    lr_start: float = 1e-3
    lr_end: float = 2e-4
    gamma: float = 250.0
    beta: float = 0.8
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.widths = tuple(self.widths)
        self.fc = tuple(self.fc)
        if self.input_size < 2 ** len(self.widths):
            raise ValueError("input too small for the number of stride-2 blocks")


# ------------------------------------------------------------------ augment


def rotation_about(axis: int, angle: float) -> np.ndarray:
    a = np.zeros(3)
    a[axis] = 1.0
    return axis_angle_quat(a, angle)


def sample_virtual_poses(anchors, cfg: AugmentConfig, rng: np.random.Generator) -> list[Pose]:
    """``samples_per_anchor`` jittered copies of every anchor.

    Positions are uniform in a horizontal rectangle centred on the anchor;
    orientations get independent per-axis rotations (camera frame) drawn from
    ``[-theta_max, theta_max]``.
    """
    if len(anchors) == 0:
        raise ValueError("need at least one anchor pose")
    out = []
    half = np.array([cfg.rect_h / 2, cfg.rect_w / 2])
    for anchor in anchors:
        for _ in range(cfg.samples_per_anchor):
            dxy = rng.uniform(-half, half)
            angles = rng.uniform(-cfg.theta_max, cfg.theta_max, size=3)
            q = anchor.rotation
            for axis, ang in enumerate(angles):
                q = quat_multiply(q, rotation_about(axis, ang))
            t = anchor.translation + np.array([dxy[0], dxy[1], 0.0])
            out.append(Pose(canonical_quat(q), t))
    return out


def mix_embeddings(table, i: int, j: int, lam: float) -> np.ndarray:
    table = np.asarray(table)
    return lam * table[i] + (1.0 - lam) * table[j]


def interpolate_embedding(table, rng: np.random.Generator) -> np.ndarray:
    """Random convex combination of two distinct rows of ``table``."""
    table = np.asarray(table)
    if len(table) < 2:
        raise ValueError("need at least two embeddings to interpolate")
    i, j = rng.choice(len(table), size=2, replace=False)
    return mix_embeddings(table, i, j, rng.uniform())


def render_virtual_set(field_, poses, K: CameraIntrinsics, bounds, table, rng, size: int, n_samples: int):
    from .renderer import render_image

    Ks = K.scaled(size, size)
    images = []
    for pose in poses:
        emb = interpolate_embedding(table, rng)
        images.append(render_image(field_, pose, Ks, bounds, n_samples, embedding=emb))
    return np.stack(images)


# ------------------------------------------------------------------ network


class PoseNet(nn.Module):
    def __init__(self, cfg: RegressorConfig):
        super().__init__()
        convs, c_in = [], 3
        for w in cfg.widths:
            convs.append(nn.Conv2d(c_in, w, 3, stride=2, padding=1))
            c_in = w
        self.convs = nn.ModuleList(convs)
        side = cfg.input_size
        for _ in cfg.widths:
            side = (side + 1) // 2
        dims = [c_in * side * side, *cfg.fc, POSE_DIM]
        self.fcs = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for conv in self.convs:
            x = F.relu(conv(x))
        x = x.flatten(1)
        for fc in self.fcs[:-1]:
            x = F.relu(fc(x))
        return self.fcs[-1](x)


def apr_loss_torch(pred, x, q, gamma: float):
    """Mean over the batch of ``|x_hat - x| + gamma |q_hat - q / |q||``."""
    qn = q / q.norm(dim=-1, keepdim=True)
    return ((pred[:, :3] - x).norm(dim=-1) + gamma * (pred[:, 3:] - qn).norm(dim=-1)).mean()


def apr_loss(pred, target: Pose, gamma: float = 250.0) -> float:
    """Position error plus ``gamma`` times the (raw) quaternion error."""
    pred = np.asarray(pred, dtype=np.float64)
    q = np.asarray(target.rotation, dtype=np.float64)
    pos = np.linalg.norm(pred[:3] - target.translation)
    return float(pos + gamma * np.linalg.norm(pred[3:] - q / np.linalg.norm(q)))


def ingest(images, size: int) -> torch.Tensor:
    """``(n, H, W, 3)`` floats in [0, 1] -> ``(n, 3, size, size)`` by area averaging."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="area")
    if t.shape[1:] != (3, size, size):
        raise RegressorError(f"ingest produced shape {tuple(t.shape)}")
    return t


def pose_targets(poses) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.tensor(np.array([p.translation for p in poses]), dtype=torch.float32)
    q = torch.tensor(np.array([canonical_quat(p.rotation) for p in poses]), dtype=torch.float32)
    return x, q


# ------------------------------------------------------------------ model


class Regressor:
    def __init__(self, cfg: RegressorConfig, net: PoseNet | None = None):
        self.cfg = cfg
        self.net = net or PoseNet(cfg)

    @torch.no_grad()
    def predict_raw(self, images) -> np.ndarray:
        self.net.eval()
        return self.net(ingest(images, self.cfg.input_size)).double().numpy()

    def predict_pose(self, image) -> Pose:
        out = self.predict_raw(image)[0]
        q = out[3:] / np.linalg.norm(out[3:])
        return Pose(canonical_quat(q), out[:3])

    def predict_poses(self, images) -> list[Pose]:
        out = self.predict_raw(images)
        return [Pose(canonical_quat(o[3:] / np.linalg.norm(o[3:])), o[:3]) for o in out]

    # checkpoints: manifest.txt + params.f32 (state_dict order, little-endian)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        cfg = asdict(self.cfg)
        aug = cfg.pop("augment")
        lines = [f"{k}={v}" for k, v in cfg.items()]
        if aug is not None:
            lines += [f"augment.{k}={v}" for k, v in aug.items()]
        state = self.net.state_dict()
        lines.append("tensors=" + ";".join(f"{k}:{'x'.join(map(str, v.shape))}" for k, v in state.items()))
        (path / "manifest.txt").write_text("\n".join(lines) + "\n")
        flat = np.concatenate([v.detach().numpy().ravel() for v in state.values()]).astype("<f4")
        flat.tofile(path / "params.f32")

    @classmethod
    def load(cls, path) -> Regressor:
        path = Path(path)
        man = path / "manifest.txt"
        if not man.exists():
            raise FileNotFoundError(f"missing regressor manifest {man}")
        kv = dict(line.split("=", 1) for line in man.read_text().splitlines() if "=" in line)
        aug = {k.split(".", 1)[1]: v for k, v in kv.items() if k.startswith("augment.")}
        cfg = RegressorConfig(
            input_size=int(kv["input_size"]),
            widths=_ints(kv["widths"]),
            fc=_ints(kv["fc"]),
            epochs=int(kv["epochs"]),
            batch_size=int(kv["batch_size"]),
            lr_start=float(kv["lr_start"]),
            lr_end=float(kv["lr_end"]),
            gamma=float(kv["gamma"]),
            beta=float(kv["beta"]),
            seed=int(kv["seed"]),
            augment=AugmentConfig(
                rect_h=float(aug["rect_h"]),
                rect_w=float(aug["rect_w"]),
                samples_per_anchor=int(aug["samples_per_anchor"]),
                theta_max=float(aug["theta_max"]),
                render_epochs=_ints(aug["render_epochs"]),
                render_samples=int(aug["render_samples"]),
            ) if aug else None,
        )
        reg = cls(cfg)
        flat = torch.from_numpy(np.fromfile(path / "params.f32", dtype="<f4").astype(np.float32))
        state, off = {}, 0
        for k, v in reg.net.state_dict().items():
            n = v.numel()
            if off + n > flat.numel():
                raise RegressorError("regressor parameter file is truncated")
            state[k] = flat[off:off + n].reshape(v.shape)
            off += n
        if off != flat.numel():
            raise RegressorError("regressor parameter file has trailing data")
        reg.net.load_state_dict(state)
        return reg


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.strip("()[] ").split(",") if v.strip())


# ------------------------------------------------------------------ training


@dataclass
class RegressorLog:
    epoch_losses: list = field(default_factory=list)  # (epoch, real, synthetic)
    synthetic_peak: int = 0
    renders: int = 0


def train_regressor(dataset, field_, bounds, cfg: RegressorConfig, rng: np.random.Generator | None = None,
                    progress=None) -> tuple[Regressor, RegressorLog]:
    """Minimise ``L_real + beta * L_syn`` with Adam and exponential decay.

    Random streams are split so that the real-image batches do not depend on
    whether augmentation is enabled.
    """
    if cfg.augment is not None and cfg.beta > 0 and field_ is None:
        raise RegressorError("augmentation needs a trained field checkpoint")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, 2**63 - 1, size=4)
    torch.manual_seed(int(seeds[0]))
    order_rng = np.random.default_rng(seeds[1])
    aug_rng = np.random.default_rng(seeds[2])
    syn_rng = np.random.default_rng(seeds[3])

    train = dataset.split("train")
    real_x = ingest(np.stack([dataset.images[i] for i in train]), cfg.input_size)
    real_t, real_q = pose_targets([dataset.frames[i].pose for i in train])

    reg = Regressor(cfg)
    net = reg.net
    # head starts at the mean training pose so the small learning rate is spent on variation
    with torch.no_grad():
        head = net.fcs[-1]
        head.weight.mul_(0.1)
        head.bias.copy_(torch.cat([real_t.mean(0), real_q.mean(0)]))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_start, betas=(0.9, 0.999), eps=1e-8)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    log = RegressorLog()
    use_syn = cfg.augment is not None and field_ is not None
    syn_x = syn_t = syn_q = None
    table = None
    if use_syn:
        seen = sorted({dataset.frames[i].tint for i in train})
        table = field_.appearance[seen]
    step = 0
    for epoch in range(cfg.epochs):
        if use_syn and epoch in cfg.augment.render_epochs:
            syn_x = None  # drop the previous set before rendering the next
            anchors = [dataset.frames[i].pose for i in train]
            poses = sample_virtual_poses(anchors, cfg.augment, aug_rng)
            imgs = render_virtual_set(field_, poses, dataset.intrinsics, bounds, table, aug_rng,
                                      cfg.input_size, cfg.augment.render_samples)
            syn_x = ingest(imgs, cfg.input_size)
            syn_t, syn_q = pose_targets(poses)
            log.synthetic_peak = max(log.synthetic_peak, len(imgs))
            log.renders += len(imgs)
        perm = order_rng.permutation(len(train))
        net.train()
        sums = [0.0, 0.0]
        for b in range(steps_per_epoch):
            lr = cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (step / total)
            for g in opt.param_groups:
                g["lr"] = lr
            idx = torch.from_numpy(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            loss_real = apr_loss_torch(net(real_x[idx]), real_t[idx], real_q[idx], cfg.gamma)
            loss = loss_real
            if syn_x is not None:
                sidx = torch.from_numpy(syn_rng.choice(len(syn_x), size=cfg.batch_size, replace=False))
                loss_syn = apr_loss_torch(net(syn_x[sidx]), syn_t[sidx], syn_q[sidx], cfg.gamma)
                loss = loss_real + cfg.beta * loss_syn
                sums[1] += float(loss_syn.detach())
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums[0] += float(loss_real.detach())
            step += 1
        log.epoch_losses.append((epoch, sums[0] / steps_per_epoch, sums[1] / steps_per_epoch))
        if progress:
            progress(epoch, *log.epoch_losses[-1][1:])
    return reg, log
