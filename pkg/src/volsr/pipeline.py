"""Patch sampling, training pairs, the GAN loop, and sliding-window inference.

Training alternates one discriminator update and one generator update per
step on freshly sampled patch pairs. Gradient isolation between the two
networks is structural: the discriminator phase sees a detached copy of the
super-resolved batch, and the generator phase runs the discriminator on a
detached parameter view, so each backward pass reaches only its own side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import (
    LossReport,
    LossWeights,
    adversarial_losses,
    perceptual_2_5d,
    pixel_loss,
    total_generator_loss,
)
from .models import (
    DiscriminatorConfig,
    FeatureExtractor2D,
    GeneratorConfig,
    discriminator_forward,
    generator_forward,
    init_params,
)
from .nn import (
    AdamConfig,
    ParamStore,
    Tensor,
    adam_state_for,
    adam_step,
    backward,
    no_grad,
)
from .spectral import kspace_degrade
from .volume import Volume, load_volume


class PipelineError(ValueError):
    """Dataset, patch, or window geometry violates a pipeline contract."""


class NonFiniteLossError(RuntimeError):
    """A loss term left the finite range; carries a diagnostic snapshot."""

    def __init__(self, step: int, components: dict, gen_param_norm: float, disc_param_norm: float):
        self.step = step
        self.components = dict(components)
        self.gen_param_norm = gen_param_norm
        self.disc_param_norm = disc_param_norm
        terms = ", ".join(f"{k}={v:.6g}" for k, v in self.components.items())
        super().__init__(
            f"non-finite loss at step {step}: {terms}; "
            f"|gen params|={gen_param_norm:.6g}, |disc params|={disc_param_norm:.6g}"
        )


@dataclass(frozen=True)
class PatchSpec:
    """Geometry and weighting of training patch sampling (HR space)."""

    hr_patch: int = 96
    scale: int = 4
    samples_per_volume: int = 16
    weighting: str = "weighted"

    def __post_init__(self) -> None:
        if self.scale < 1:
            raise PipelineError(f"scale must be >= 1, got {self.scale}")
        if self.hr_patch < 1 or self.hr_patch % (2 * self.scale):
            raise PipelineError(
                f"hr_patch must be a positive multiple of {2 * self.scale}, got {self.hr_patch}"
            )
        if self.samples_per_volume < 1:
            raise PipelineError(
                f"samples_per_volume must be >= 1, got {self.samples_per_volume}"
            )
        if self.weighting not in ("weighted", "uniform"):
            raise PipelineError(f"weighting must be 'weighted' or 'uniform', got {self.weighting!r}")

    @property
    def lr_patch(self) -> int:
        return self.hr_patch // self.scale


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run; fixed seed fixes the run."""

    steps: int
    batch_size: int = 1
    gen_config: GeneratorConfig = GeneratorConfig()
    disc_config: DiscriminatorConfig = DiscriminatorConfig()
    gen_opt: AdamConfig = AdamConfig()
    disc_opt: AdamConfig = AdamConfig()
    weights: LossWeights = LossWeights()
    seed: int = 0
    checkpoint_every: int = 0
    perc_slice_stride: int = 1
    fx_seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise PipelineError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise PipelineError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise PipelineError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.perc_slice_stride < 1:
            raise PipelineError(
                f"perc_slice_stride must be >= 1, got {self.perc_slice_stride}"
            )


@dataclass(frozen=True)
class SlidingWindowSpec:
    """Tiling geometry for full-volume inference; window is HR-space."""

    window: int = 96
    overlap: float = 0.25
    blend: str = "gaussian"

    def __post_init__(self) -> None:
        if self.window < 1:
            raise PipelineError(f"window must be >= 1, got {self.window}")
        if not 0.0 <= self.overlap < 1.0:
            raise PipelineError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.blend not in ("constant", "gaussian"):
            raise PipelineError(f"blend must be 'constant' or 'gaussian', got {self.blend!r}")


def _foreground_mass(data: np.ndarray) -> np.ndarray:
    """Normalized intensities above their 25th percentile, zero elsewhere."""
    lo = float(data.min())
    hi = float(data.max())
    if hi <= lo:
        return np.zeros_like(data)
    norm = (data - lo) / (hi - lo)
    thr = float(np.percentile(norm, 25.0))
    return np.where(norm > thr, norm, 0.0)


def _window_sums(fg: np.ndarray, p: int) -> np.ndarray:
    """Sum of fg over every p^3 window, via a padded 3D integral image."""
    s = np.pad(fg, ((1, 0), (1, 0), (1, 0))).cumsum(0).cumsum(1).cumsum(2)
    d0, d1, d2 = fg.shape
    z0, z1 = slice(0, d0 - p + 1), slice(p, d0 + 1)
    y0, y1 = slice(0, d1 - p + 1), slice(p, d1 + 1)
    x0, x1 = slice(0, d2 - p + 1), slice(p, d2 + 1)
    return (
        s[z1, y1, x1] - s[z0, y1, x1] - s[z1, y0, x1] - s[z1, y1, x0]
        + s[z0, y0, x1] + s[z0, y1, x0] + s[z1, y0, x0] - s[z0, y0, x0]
    )


class _CornerSampler:
    """Precomputed corner distribution for one volume; cheap repeated draws."""

    def __init__(self, hr: Volume, spec: PatchSpec):
        p = spec.hr_patch
        shape = hr.data.shape
        if any(n < p for n in shape):
            raise PipelineError(f"volume shape {shape} smaller than patch {p}^3")
        self.grid = tuple(n - p + 1 for n in shape)
        n_corners = int(np.prod(self.grid))
        cdf = None
        if spec.weighting == "weighted":
            fg = _foreground_mass(hr.data.astype(np.float64))
            w = np.clip(_window_sums(fg, p), 0.0, None).ravel()
            total = w.sum()
            if total > 0:
                cdf = w.cumsum() / total
        if cdf is None:
            # Uniform fallback: featureless volume or explicit uniform mode.
            cdf = np.arange(1, n_corners + 1, dtype=np.float64) / n_corners
        self.cdf = cdf

    def draw(self, rng: np.random.Generator) -> tuple[int, int, int]:
        u = rng.random()
        idx = int(np.searchsorted(self.cdf, u, side="right"))
        idx = min(idx, len(self.cdf) - 1)
        z, y, x = np.unravel_index(idx, self.grid)
        return int(z), int(y), int(x)


def extract_patch(hr: Volume, corner: tuple[int, int, int], size: int) -> Volume:
    z, y, x = corner
    data = hr.data[z : z + size, y : y + size, x : x + size]
    if data.shape != (size, size, size):
        raise PipelineError(f"corner {corner} leaves no room for a {size}^3 patch")
    return Volume(data, hr.spacing, hr.intensity_meta)


def sample_patch_weighted(
    hr: Volume, spec: PatchSpec, rng: np.random.Generator
) -> tuple[tuple[int, int, int], Volume]:
    """Draw a patch corner with probability proportional to the foreground
    mass inside the candidate patch, and return (corner, patch).
    """
    sampler = _CornerSampler(hr, spec)
    corner = sampler.draw(rng)
    return corner, extract_patch(hr, corner, spec.hr_patch)


def make_training_pair(hr_patch: Volume, scale: int) -> tuple[Tensor, Tensor]:
    """Degrade an HR patch to its LR counterpart and normalize both by the
    HR patch's min-max range, so the generator learns an intensity-preserving
    map. Returns ((1,1,d,d,d) LR, (1,1,D,D,D) HR) tensors.
    """
    shape = hr_patch.data.shape
    if scale > 1 and any(n % (2 * scale) for n in shape):
        raise PipelineError(f"patch shape {shape} not divisible by {2 * scale}")
    lr_vol = kspace_degrade(hr_patch, scale)
    hr_data = hr_patch.data.astype(np.float64)
    lr_data = lr_vol.data.astype(np.float64)
    lo = float(hr_data.min())
    hi = float(hr_data.max())
    if hi > lo:
        hr_data = (hr_data - lo) / (hi - lo)
        lr_data = (lr_data - lo) / (hi - lo)
    else:
        hr_data = np.zeros_like(hr_data)
        lr_data = np.zeros_like(lr_data)
    return Tensor(lr_data[None, None]), Tensor(hr_data[None, None])


def _param_norm(store: ParamStore) -> float:
    total = 0.0
    for _, t in store.items():
        total += float(np.sum(t.data * t.data))
    return math.sqrt(total)


def _require_finite(step, components, g_params, d_params) -> None:
    if all(math.isfinite(v) for v in components.values()):
        return
    raise NonFiniteLossError(step, components, _param_norm(g_params), _param_norm(d_params))


def train(
    dataset: list[Volume],
    cfg: TrainConfig,
    spec: PatchSpec,
    fx: FeatureExtractor2D | None = None,
    checkpoint_callback=None,
) -> tuple[ParamStore, ParamStore, list[LossReport]]:
    """Run the alternating GAN loop and return (generator parameters,
    discriminator parameters, per-step loss log).

    Each step samples a fresh batch of patch pairs, updates the
    discriminator on (real HR, detached SR), then updates the generator on
    the weighted pixel + perceptual + adversarial objective against the
    freshly updated, frozen discriminator. The perceptual term is skipped
    (and logged as 0) when lambda2 == 0. ``checkpoint_callback(step,
    gen_params, disc_params)`` fires every ``checkpoint_every`` steps and at
    the final step. Deterministic for a fixed seed on a single thread.
    """
    if not dataset:
        raise PipelineError("dataset is empty")
    if spec.scale != cfg.gen_config.upscale:
        raise PipelineError(
            f"patch scale {spec.scale} != generator upscale {cfg.gen_config.upscale}"
        )
    div = 2**cfg.disc_config.depth
    if spec.hr_patch % div:
        raise PipelineError(
            f"hr_patch {spec.hr_patch} not divisible by 2^depth = {div}"
        )
    rng = np.random.default_rng(cfg.seed)
    g_params = init_params(cfg.gen_config, cfg.seed)
    d_params = init_params(cfg.disc_config, cfg.seed + 1)
    g_state = adam_state_for(g_params)
    d_state = adam_state_for(d_params)
    use_perc = cfg.weights.lambda2 > 0
    if use_perc and fx is None:
        fx = FeatureExtractor2D.create(seed=cfg.fx_seed)

    samplers = [_CornerSampler(v, spec) for v in dataset]
    vol_idx = 0
    drawn = 0

    def next_pair() -> tuple[Tensor, Tensor]:
        nonlocal vol_idx, drawn
        corner = samplers[vol_idx].draw(rng)
        patch = extract_patch(dataset[vol_idx], corner, spec.hr_patch)
        drawn += 1
        if drawn >= spec.samples_per_volume:
            drawn = 0
            vol_idx = (vol_idx + 1) % len(dataset)
        return make_training_pair(patch, spec.scale)

    log: list[LossReport] = []
    for step in range(1, cfg.steps + 1):
        lr_list, hr_list = [], []
        for _ in range(cfg.batch_size):
            lr_one, hr_one = next_pair()
            lr_list.append(lr_one.data)
            hr_list.append(hr_one.data)
        lr_t = Tensor(np.concatenate(lr_list, axis=0))
        hr_t = Tensor(np.concatenate(hr_list, axis=0))

        sr = generator_forward(lr_t, g_params, cfg.gen_config)

        d_on_sr = discriminator_forward(sr.detach(), d_params, cfg.disc_config)
        d_on_hr = discriminator_forward(hr_t, d_params, cfg.disc_config)
        _, disc_loss = adversarial_losses(d_on_sr, d_on_hr)
        disc_val = disc_loss.item()
        _require_finite(step, {"disc": disc_val}, g_params, d_params)
        backward(disc_loss)
        adam_step(d_params, d_state, cfg.disc_opt)

        frozen = d_params.detached()
        d_on_sr_gen = discriminator_forward(sr, frozen, cfg.disc_config)
        gen_adv, _ = adversarial_losses(d_on_sr_gen, Tensor(d_on_hr.data))
        pix = pixel_loss(sr, hr_t)
        perc = (
            perceptual_2_5d(sr, hr_t, fx, cfg.perc_slice_stride)
            if use_perc
            else Tensor(0.0)
        )
        total = total_generator_loss(pix, perc, gen_adv, cfg.weights)
        components = {
            "pixel": pix.item(),
            "perc": perc.item(),
            "adv": gen_adv.item(),
            "gen_total": total.item(),
            "disc": disc_val,
        }
        _require_finite(step, components, g_params, d_params)
        backward(total)
        adam_step(g_params, g_state, cfg.gen_opt)

        log.append(
            LossReport.from_terms(
                components["pixel"],
                components["perc"],
                components["adv"],
                disc_val,
                cfg.weights,
            )
        )
        if checkpoint_callback is not None and (
            (cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0)
            or step == cfg.steps
        ):
            checkpoint_callback(step, g_params, d_params)
    return g_params, d_params, log


def _axis_starts(n: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)  # snap the last tile to the boundary
    return starts


def _blend_weights(window: int, blend: str) -> np.ndarray:
    if blend == "constant":
        return np.ones((window, window, window))
    center = (window - 1) / 2.0
    sigma = window / 8.0
    t = np.arange(window, dtype=np.float64) - center
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return g[:, None, None] * g[None, :, None] * g[None, None, :]


def sliding_window_infer(
    lr: Volume,
    params: ParamStore,
    cfg: GeneratorConfig,
    spec: SlidingWindowSpec,
    return_weights: bool = False,
):
    """Tile LR space, super-resolve each tile, and blend overlaps in HR
    space as a convex combination. Output shape is upscale times LR shape.
    """
    scale = cfg.upscale
    if spec.window % scale:
        raise PipelineError(f"window {spec.window} not divisible by upscale {scale}")
    lr_win = spec.window // scale
    shape = lr.data.shape
    if any(n < lr_win for n in shape):
        raise PipelineError(f"volume shape {shape} smaller than LR window {lr_win}")
    out_spacing = tuple(s / scale for s in lr.spacing)
    data = lr.data.astype(np.float64)

    def forward_tile(tile: np.ndarray) -> np.ndarray:
        return generator_forward(Tensor(tile[None, None]), params, cfg).data[0, 0]

    stride = max(1, int(round(lr_win * (1.0 - spec.overlap))))
    starts = [_axis_starts(n, lr_win, stride) for n in shape]
    with no_grad():
        if all(len(s) == 1 for s in starts):
            # One tile covers the volume; no blending needed.
            out = forward_tile(data)
            weights = np.ones_like(out)
            vol = Volume(out, out_spacing, lr.intensity_meta)
            return (vol, weights) if return_weights else vol
        hr_shape = tuple(n * scale for n in shape)
        acc = np.zeros(hr_shape)
        den = np.zeros(hr_shape)
        tile_w = _blend_weights(lr_win * scale, spec.blend)
        for z0 in starts[0]:
            for y0 in starts[1]:
                for x0 in starts[2]:
                    tile = data[z0 : z0 + lr_win, y0 : y0 + lr_win, x0 : x0 + lr_win]
                    sr_tile = forward_tile(tile)
                    sl = (
                        slice(z0 * scale, (z0 + lr_win) * scale),
                        slice(y0 * scale, (y0 + lr_win) * scale),
                        slice(x0 * scale, (x0 + lr_win) * scale),
                    )
                    acc[sl] += sr_tile * tile_w
                    den[sl] += tile_w
    if den.min() <= 0:
        raise PipelineError("tiling left uncovered voxels; this is a bug")
    out = acc / den
    vol = Volume(out, out_spacing, lr.intensity_meta)
    return (vol, den) if return_weights else vol


def pad_to_multiple(v: Volume, multiple: int, value: float | None = None) -> tuple[Volume, tuple[int, int, int]]:
    """Pad trailing edges so every dim divides by ``multiple``; returns the
    padded volume and the original shape (for cropping after inference).
    The default pad value is the volume minimum (zero in normalized space).
    """
    if multiple < 1:
        raise PipelineError(f"multiple must be >= 1, got {multiple}")
    shape = v.data.shape
    target = tuple(-(-n // multiple) * multiple for n in shape)
    if target == shape:
        return v, shape
    fill = float(v.data.min()) if value is None else float(value)
    pad = [(0, t - n) for n, t in zip(shape, target)]
    data = np.pad(v.data, pad, constant_values=fill)
    return Volume(data, v.spacing, v.intensity_meta), shape


def crop_to_shape(v: Volume, shape: tuple[int, int, int]) -> Volume:
    if any(t > n for t, n in zip(shape, v.data.shape)):
        raise PipelineError(f"cannot crop {v.data.shape} to larger shape {shape}")
    data = v.data[: shape[0], : shape[1], : shape[2]]
    return Volume(data, v.spacing, v.intensity_meta)


def load_dataset_manifest(path) -> list[dict]:
    """Read a dataset manifest: a JSON list whose entries are either VBIN
    path strings or {"path": ..., "clip": [lo, hi]} objects. Relative paths
    resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PipelineError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise PipelineError(f"{path}: manifest must be a non-empty JSON list")
    base = path.parent
    entries = []
    for item in raw:
        if isinstance(item, str):
            entry = {"path": item, "clip": None}
        elif isinstance(item, dict) and "path" in item:
            clip = item.get("clip")
            if clip is not None:
                clip = [float(clip[0]), float(clip[1])]
            entry = {"path": str(item["path"]), "clip": clip}
        else:
            raise PipelineError(f"{path}: bad manifest entry {item!r}")
        p = Path(entry["path"])
        entry["path"] = str(p if p.is_absolute() else base / p)
        entries.append(entry)
    return entries


def save_dataset_manifest(entries: list, path) -> None:
    """Write a manifest; entries are path strings or {"path", "clip"} dicts."""
    out = []
    for e in entries:
        if isinstance(e, str):
            out.append({"path": e})
        elif e.get("clip") is None:
            out.append({"path": e["path"]})
        else:
            out.append({"path": e["path"], "clip": list(e["clip"])})
    Path(path).write_text(json.dumps(out, indent=2) + "\n")


def load_dataset(manifest_path) -> list[Volume]:
    """Load every manifest entry, applying per-volume clip ranges."""
    volumes = []
    for entry in load_dataset_manifest(manifest_path):
        v = load_volume(entry["path"])
        clip = entry["clip"]
        if clip is not None:
            lo, hi = clip
            if lo >= hi:
                raise PipelineError(f"{entry['path']}: clip range ({lo}, {hi}) is empty")
            v = Volume(np.clip(v.data, lo, hi), v.spacing, (lo, hi))
        volumes.append(v)
    return volumes


def split_manifest(entries: list[dict], folds: int, seed: int) -> list[tuple[list[dict], list[dict]]]:
    """Shuffled k-fold partition: fold i yields (train entries, val entries)."""
    n = len(entries)
    if not 2 <= folds <= n:
        raise PipelineError(f"folds must be in 2..{n}, got {folds}")
    order = np.random.default_rng(seed).permutation(n)
    buckets: list[list[int]] = [[] for _ in range(folds)]
    for pos, idx in enumerate(order):
        buckets[pos % folds].append(int(idx))
    out = []
    for i in range(folds):
        val = [entries[j] for j in sorted(buckets[i])]
        train_idx = sorted(j for k, b in enumerate(buckets) if k != i for j in b)
        out.append(([entries[j] for j in train_idx], val))
    return out
