"""Synthetic video pose data, heatmap codec, and OKS/AP/PCK evaluation.

The generator renders J distinctly colored Gaussian blob markers moving with
per-joint linear velocity plus jitter over a textured background. With
probability `occlusion_rate` a joint's marker is not rendered for a contiguous
run of non-key frames while the ground truth persists, so temporal cues are
required to localize it. Everything is deterministic under the config seed.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

HEATMAP_STRIDE = 4
DEFAULT_SIGMA = 2.0
OKS_THRESHOLDS = tuple((50 + 5 * i) / 100 for i in range(10))
DEFAULT_K = 0.1


@dataclass(frozen=True)
class DataConfig:
    joints: int = 5
    height: int = 64
    width: int = 48
    t_frames: int = 3
    n_sequences: int = 64
    occlusion_rate: float = 0.3
    seed: int = 0
    sigma: float = DEFAULT_SIGMA
    blob_radius: float = 2.5
    max_speed: float = 3.0
    jitter: float = 0.5

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ValueError("height and width must be divisible by 4")


@dataclass
class VideoSample:
    """One sequence: T+1 frames of a single synthetic instance.

    `visibility` marks joints that exist (always 1 here); `rendered` marks
    whether the marker was actually drawn in a frame. An occluded joint is
    visible-but-not-rendered: it still counts for evaluation.
    """

    frames: np.ndarray  # (T+1, 3, H, W) float32 in [0, 1]
    keypoints: np.ndarray  # (T+1, J, 2) float32, (x, y) pixels
    visibility: np.ndarray  # (T+1, J) uint8
    rendered: np.ndarray  # (T+1, J) bool
    scale: float  # sqrt of mean bounding-box area

    @property
    def t_frames(self) -> int:
        return self.frames.shape[0] - 1


def joint_colors(joints: int) -> np.ndarray:
    return np.array(
        [colorsys.hsv_to_rgb(j / joints, 1.0, 1.0) for j in range(joints)], dtype=np.float32
    )


def _render_frame(rng, cfg: DataConfig, keypoints, rendered_mask, colors, tint):
    h, w = cfg.height, cfg.width
    yy = np.linspace(0.1, 0.3, h, dtype=np.float32)[None, :, None]
    img = np.broadcast_to(yy, (3, h, w)).copy()
    img += tint[:, None, None]
    img += rng.normal(0.0, 0.02, size=(3, h, w)).astype(np.float32)
    gx = np.arange(w, dtype=np.float32)
    gy = np.arange(h, dtype=np.float32)
    r2 = 2.0 * cfg.blob_radius * cfg.blob_radius
    for j in range(cfg.joints):
        if not rendered_mask[j]:
            continue
        cx, cy = keypoints[j]
        blob = np.exp(
            -(((gx[None, :] - cx) ** 2) + ((gy[:, None] - cy) ** 2)) / r2
        ).astype(np.float32)
        img += colors[j][:, None, None] * blob[None]
    return np.clip(img, 0.0, 1.0)


def generate(cfg: DataConfig) -> list[VideoSample]:
    """Render `n_sequences` deterministic sequences of T+1 frames."""
    rng = np.random.default_rng(cfg.seed)
    colors = joint_colors(cfg.joints)
    margin = 4.0
    t_total = cfg.t_frames + 1
    samples = []
    for _ in range(cfg.n_sequences):
        lo = np.array([margin, margin])
        hi = np.array([cfg.width - 1 - margin, cfg.height - 1 - margin])
        # jittered ring layout keeps the instance bounding box a stable
        # fraction of the image, so the OKS scale is well-conditioned
        center = (lo + hi) / 2 + rng.uniform(-3.0, 3.0, size=2)
        radius = rng.uniform(0.28, 0.42) * min(cfg.height, cfg.width)
        angles = (
            2 * np.pi * (np.arange(cfg.joints) / cfg.joints)
            + rng.uniform(0, 2 * np.pi)
            + rng.uniform(-0.35, 0.35, size=cfg.joints)
        )
        aspect = np.array([1.0, rng.uniform(0.7, 1.0)])
        offsets = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1) * aspect[None, :]
        pos = np.clip(center[None, :] + offsets, lo, hi)
        vel = rng.uniform(-cfg.max_speed, cfg.max_speed, size=(cfg.joints, 2))
        tint = rng.uniform(0.0, 0.15, size=3).astype(np.float32)

        keypoints = np.zeros((t_total, cfg.joints, 2), dtype=np.float32)
        for t in range(t_total):
            keypoints[t] = pos
            step = vel + rng.uniform(-cfg.jitter, cfg.jitter, size=(cfg.joints, 2))
            pos = pos + step
            # reflect off the margins, flipping the velocity component
            for axis in range(2):
                below = pos[:, axis] < lo[axis]
                above = pos[:, axis] > hi[axis]
                pos[below, axis] = 2 * lo[axis] - pos[below, axis]
                pos[above, axis] = 2 * hi[axis] - pos[above, axis]
                vel[below | above, axis] *= -1.0

        rendered = np.ones((t_total, cfg.joints), dtype=bool)
        for j in range(cfg.joints):
            if rng.random() < cfg.occlusion_rate and cfg.t_frames >= 1:
                start = int(rng.integers(1, cfg.t_frames + 1))
                length = int(rng.integers(1, cfg.t_frames - start + 2))
                rendered[start : start + length, j] = False

        frames = np.stack(
            [
                _render_frame(rng, cfg, keypoints[t], rendered[t], colors, tint)
                for t in range(t_total)
            ]
        )
        span = keypoints.max(axis=1) - keypoints.min(axis=1)  # (T+1, 2)
        area = np.clip(span[:, 0] * span[:, 1], 64.0, None)
        samples.append(
            VideoSample(
                frames=frames.astype(np.float32),
                keypoints=keypoints,
                visibility=np.ones((t_total, cfg.joints), dtype=np.uint8),
                rendered=rendered,
                scale=float(np.sqrt(area.mean())),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# heatmap codec


def encode(keypoints, visibility, heatmap_size, sigma=DEFAULT_SIGMA):
    """Unit-peak Gaussian heatmaps at 1/4 resolution; invisible joints map to
    zero. `keypoints` is (J, 2) in image pixels, output is (J, h, w)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = heatmap_size
    joints = keypoints.shape[0]
    maps = np.zeros((joints, h, w), dtype=np.float32)
    gx = np.arange(w, dtype=np.float32)[None, :]
    gy = np.arange(h, dtype=np.float32)[:, None]
    for j in range(joints):
        if not visibility[j]:
            continue
        cx = keypoints[j, 0] / HEATMAP_STRIDE
        cy = keypoints[j, 1] / HEATMAP_STRIDE
        maps[j] = np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2.0 * sigma * sigma))
    return maps


def decode(heatmaps):
    """Argmax location refined by a quarter-pixel shift toward the larger
    neighbor per axis, scaled back to image pixels. An all-nonpositive map is
    flagged not-localized via score 0."""
    joints, h, w = heatmaps.shape
    keypoints = np.zeros((joints, 2), dtype=np.float32)
    scores = np.zeros(joints, dtype=np.float32)
    for j in range(joints):
        hm = heatmaps[j]
        idx = int(hm.argmax())
        y, x = divmod(idx, w)
        peak = float(hm[y, x])
        if peak <= 0.0:
            continue
        fx, fy = float(x), float(y)
        if 0 < x < w - 1:
            fx += 0.25 * np.sign(hm[y, x + 1] - hm[y, x - 1])
        if 0 < y < h - 1:
            fy += 0.25 * np.sign(hm[y + 1, x] - hm[y - 1, x])
        keypoints[j] = (fx * HEATMAP_STRIDE, fy * HEATMAP_STRIDE)
        scores[j] = peak
    return keypoints, scores


# ---------------------------------------------------------------------------
# metrics


def oks(pred, gt, visibility, scale, k=DEFAULT_K):
    """Object keypoint similarity:
    sum_i exp(-d_i^2 / (2 s^2 k_i^2)) [v_i > 0] / sum_i [v_i > 0]."""
    visibility = np.asarray(visibility)
    mask = visibility > 0
    if not mask.any():
        raise ValueError("OKS undefined: no visible joints")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    k_arr = np.broadcast_to(np.asarray(k, dtype=np.float64), (gt.shape[0],))
    d2 = ((pred - gt) ** 2).sum(axis=1)
    e = d2[mask] / (2.0 * scale * scale * k_arr[mask] ** 2)
    return float(np.exp(-e).mean())


def average_precision(instances, k=DEFAULT_K, thresholds=OKS_THRESHOLDS):
    """Single-instance AP: an instance counts correct at threshold tau iff its
    OKS >= tau; AP is the mean correct fraction over the threshold sweep.

    `instances` is an iterable of (pred, gt, visibility, scale).
    """
    values = [oks(p, g, v, s, k) for p, g, v, s in instances]
    if not values:
        raise ValueError("no instances to evaluate")
    arr = np.asarray(values)
    return float(np.mean([(arr >= t).mean() for t in thresholds]))


def pck(instances, alpha, extent):
    """Fraction of visible joints with localization error <= alpha * extent."""
    correct = total = 0
    for pred, gt, vis, _scale in instances:
        mask = np.asarray(vis) > 0
        err = np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=1)
        correct += int((err[mask] <= alpha * extent).sum())
        total += int(mask.sum())
    if total == 0:
        raise ValueError("no visible joints")
    return correct / total


# ---------------------------------------------------------------------------
# dataset persistence (format documented in FORMATS.md)

DATASET_VERSION = 1


def save_dataset(root, samples: list[VideoSample], cfg: DataConfig):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        seq_dir = root / f"seq_{i:04d}"
        seq_dir.mkdir(exist_ok=True)
        np.save(seq_dir / "frames.npy", s.frames)
        anno = {
            "keypoints": s.keypoints.tolist(),
            "visibility": s.visibility.tolist(),
            "rendered": s.rendered.tolist(),
            "scale": s.scale,
        }
        (seq_dir / "annotations.json").write_text(json.dumps(anno))
    meta = {"version": DATASET_VERSION, "n_sequences": len(samples), "config": asdict(cfg)}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2))


def load_dataset(root):
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text())
    if meta["version"] != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {meta['version']}")
    cfg = DataConfig(**meta["config"])
    samples = []
    for i in range(meta["n_sequences"]):
        seq_dir = root / f"seq_{i:04d}"
        frames = np.load(seq_dir / "frames.npy")
        anno = json.loads((seq_dir / "annotations.json").read_text())
        samples.append(
            VideoSample(
                frames=frames,
                keypoints=np.array(anno["keypoints"], dtype=np.float32),
                visibility=np.array(anno["visibility"], dtype=np.uint8),
                rendered=np.array(anno["rendered"], dtype=bool),
                scale=float(anno["scale"]),
            )
        )
    return samples, cfg
