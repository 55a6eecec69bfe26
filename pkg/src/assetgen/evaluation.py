"""Desk-scale metrics and the ablation harness.

The two scores are pretrained-model-free stand-ins: ``alignment_score``
checks that generated colors agree with the asset's canonical color field at
the coordinates the generated point map claims (geometry-texture alignment),
and ``correspondence_count`` counts template patches from the generated
image that match a condition view under normalized cross-correlation
(texture correspondence). Color comparisons are done on shading-normalized
(chromaticity) values because the renderer's headlight term is view
dependent while albedo is not.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import CAPTIONS, compose_scene, gen_asset, generate_dataset, sample_pose, target_camera
from .geometry import RenderOutput, render_viewset
from .model import JointDiT, ModelConfig
from .sampling import SampleConfig, euler_sample, pointmap_to_coords
from .training import TrainConfig, train

ALIGNMENT_COLOR_THRESHOLD = 0.15
NCC_THRESHOLD = 0.8


def _chroma(rgb: np.ndarray) -> np.ndarray:
    """Normalize colors by mean intensity; invariant to scalar shading."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb / (rgb.mean(axis=-1, keepdims=True) + 1e-6)


def alignment_score(gen_rgb: np.ndarray, gen_pm: np.ndarray,
                    viewset: list[RenderOutput],
                    color_threshold: float = ALIGNMENT_COLOR_THRESHOLD) -> float:
    """Fraction of generated foreground pixels whose color matches the
    condition color at the nearest canonical coordinate (brute-force NN)."""
    pixels, coords = pointmap_to_coords(gen_pm)
    if len(coords) == 0:
        raise ValueError("alignment_score: generated point map has no foreground")
    bank_coords, bank_rgb = [], []
    for view in viewset:
        px, cc = pointmap_to_coords(view.pointmap)
        bank_coords.append(cc)
        bank_rgb.append(view.rgb[px[:, 0], px[:, 1]])
    bank_coords = np.concatenate(bank_coords)
    bank_rgb = np.concatenate(bank_rgb)

    gen_colors = _chroma(gen_rgb[pixels[:, 0], pixels[:, 1]])
    bank_chroma = _chroma(bank_rgb)
    matched = 0
    for i in range(0, len(coords), 256):
        chunk = coords[i : i + 256]
        d2 = ((chunk[:, None, :] - bank_coords[None, :, :]) ** 2).sum(axis=2)
        nn = d2.argmin(axis=1)
        diff = gen_colors[i : i + 256] - bank_chroma[nn]
        dist = np.sqrt((diff * diff).mean(axis=1))
        matched += int((dist < color_threshold).sum())
    return matched / len(coords)


def _gray(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64).mean(axis=-1)


def select_probes(image: np.ndarray, k: int, patch: int = 7, seed: int = 0) -> np.ndarray:
    """(k, 2) top-left corners of high-gradient probe patches (deterministic)."""
    g = _gray(image)
    gy, gx = np.gradient(g)
    mag = np.hypot(gy, gx)
    h, w = g.shape
    valid = mag[patch // 2 : h - patch + patch // 2, patch // 2 : w - patch + patch // 2]
    flat = valid.ravel()
    pool = max(k, int(len(flat) * 0.25))
    cand = np.argsort(flat)[::-1][:pool]
    rng = np.random.default_rng([seed, 12])
    chosen = rng.choice(cand, size=k, replace=len(cand) < k)
    vh, vw = valid.shape
    rows, cols = np.unravel_index(chosen, (vh, vw))
    return np.stack([rows, cols], axis=1)


def best_ncc(template: np.ndarray, image_gray: np.ndarray) -> tuple[float, tuple[int, int]]:
    """Exhaustive normalized cross-correlation; returns (best value, location)."""
    ph, pw = template.shape
    t = template - template.mean()
    tn = np.sqrt((t * t).sum())
    windows = np.lib.stride_tricks.sliding_window_view(image_gray, (ph, pw))
    wm = windows.mean(axis=(2, 3), keepdims=True)
    wc = windows - wm
    denom = np.sqrt((wc * wc).sum(axis=(2, 3))) * tn
    num = (wc * t[None, None]).sum(axis=(2, 3))
    ncc = np.where(denom > 1e-9, num / np.maximum(denom, 1e-30), 0.0)
    loc = np.unravel_index(ncc.argmax(), ncc.shape)
    return float(ncc[loc]), (int(loc[0]), int(loc[1]))


def correspondence_count(gen_rgb: np.ndarray, cond_rgb: np.ndarray, probes: int = 64,
                         threshold: float = NCC_THRESHOLD, patch: int = 7,
                         seed: int = 0, probe_locations: np.ndarray | None = None) -> int:
    """Count probe patches from gen_rgb whose best NCC in cond_rgb exceeds
    the threshold. ``probe_locations`` overrides probe selection (used by the
    symmetry test, which fixes probes while swapping images)."""
    gg = _gray(gen_rgb)
    cg = _gray(cond_rgb)
    if probe_locations is None:
        probe_locations = select_probes(gen_rgb, probes, patch, seed)
    count = 0
    for r, c in probe_locations:
        score, _ = best_ncc(gg[r : r + patch, c : c + patch], cg)
        if score > threshold:
            count += 1
    return count


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    variant: str
    rows: list[dict] = field(default_factory=list)

    def aggregates(self) -> dict:
        agg = {}
        keys = [k for k in (self.rows[0] if self.rows else {}) if k != "index"]
        for k in keys:
            vals = [r[k] for r in self.rows if r.get(k) is not None]
            if vals:
                agg[f"mean_{k}"] = float(np.mean(vals))
                agg[f"median_{k}"] = float(np.median(vals))
        return agg

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            keys = list(self.rows[0].keys()) if self.rows else ["index"]
            w.writerow(keys)
            for r in self.rows:
                w.writerow(["" if r.get(k) is None else r.get(k) for k in keys])


def masked_mse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return 0.0
    d = (np.asarray(a, np.float64)[mask] - np.asarray(b, np.float64)[mask])
    return float((d * d).mean())


def evaluate_model(model: JointDiT, asset_seed: int, n_poses: int = 4, seed: int = 0,
                   sample_steps: int = 20, guidance: float = 1.0,
                   image_size: int | None = None, collect_images: bool = False):
    """Sample the model on held-out poses of one asset and score the outputs."""
    size = image_size or model.cfg.image_size
    asset = gen_asset(asset_seed)
    viewset = render_viewset(asset.mesh, model.cfg.n_views, height=size, width=size)
    cam = target_camera(size, size)
    report = EvalReport(variant="")
    images = []
    for e in range(n_poses):
        rng = np.random.default_rng([seed, 8, e])
        caption_id = int(rng.integers(0, len(CAPTIONS)))
        pose = sample_pose(rng)
        gt_rgb, gt_pm, gt_mask = compose_scene(asset.mesh, pose, CAPTIONS[caption_id].style_id, cam)
        scfg = SampleConfig(steps=sample_steps, guidance=guidance, seed=int(1000 * seed + e))
        gen_rgb, gen_pm = euler_sample(model, viewset, caption_id, scfg)
        row = {
            "index": e,
            "rgb_mse": masked_mse(gen_rgb, gt_rgb, gt_mask),
            "pm_mse": None,
            "alignment": None,
            "correspondence": max(
                correspondence_count(gen_rgb, v.rgb, probes=32, seed=seed) for v in viewset),
        }
        if gen_pm is not None:
            row["pm_mse"] = masked_mse(gen_pm, gt_pm, gt_mask)
            try:
                row["alignment"] = alignment_score(gen_rgb, gen_pm, viewset)
            except ValueError:
                row["alignment"] = 0.0  # no generated foreground at all
        report.rows.append(row)
        if collect_images:
            images.append((gt_rgb, gen_rgb, gt_pm, gen_pm))
    return (report, images) if collect_images else report


def contact_sheet(path, image_rows: list[tuple], gap: int = 2):
    """Side-by-side PNG: one row per sample, [gt rgb | gen rgb | gt pm | gen pm]."""
    tiles = []
    for row in image_rows:
        cells = [c for c in row if c is not None]
        h = cells[0].shape[0]
        strip = np.ones((h, (cells[0].shape[1] + gap) * len(cells) - gap, 3), np.float32)
        x = 0
        for c in cells:
            strip[:, x : x + c.shape[1]] = c
            x += c.shape[1] + gap
        tiles.append(strip)
    wmax = max(t.shape[1] for t in tiles)
    canvas = np.ones((sum(t.shape[0] + gap for t in tiles) - gap, wmax, 3), np.float32)
    y = 0
    for t in tiles:
        canvas[y : y + t.shape[0], : t.shape[1]] = t
        y += t.shape[0] + gap
    Image.fromarray(np.clip(np.round(canvas * 255), 0, 255).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

# each variant flips exactly one mechanism relative to the full model
ABLATION_VARIANTS: dict[str, dict] = {
    "full": {},
    "no-shared-pe": {"shared_pe": False},
    "no-text-agnostic": {"text_agnostic": False},
    "no-domain-lora": {"domain_lora": False},
    "no-pointmap": {"pointmap": False},
    "views-4": {"n_views": 4},
    "views-6": {"n_views": 6},
    "views-8": {"n_views": 8},
}


@dataclass
class AblationConfig:
    seed: int = 0
    train_steps: int = 200
    batch_size: int = 2
    lr: float = 1e-3
    dataset_count: int = 4
    eval_poses: int = 2
    sample_steps: int = 10
    image_size: int = 32
    patch: int = 4
    dim: int = 64
    depth: int = 2
    heads: int = 2
    n_views: int = 4


def variant_model_config(variant: str, ab: AblationConfig) -> ModelConfig:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; "
                         f"known: {sorted(ABLATION_VARIANTS)}")
    cfg = ModelConfig(image_size=ab.image_size, patch=ab.patch, dim=ab.dim,
                      depth=ab.depth, heads=ab.heads, n_views=ab.n_views,
                      time_dim=32, domain_dim=32, cond_dim=64)
    return replace(cfg, **ABLATION_VARIANTS[variant])


def run_ablation(variant: str, ab: AblationConfig, out_dir) -> EvalReport:
    """Train one variant with the shared seed/budget and evaluate it."""
    out = Path(out_dir) / variant
    out.mkdir(parents=True, exist_ok=True)
    mcfg = variant_model_config(variant, ab)
    samples = generate_dataset(ab.seed, ab.dataset_count, n_views=mcfg.n_views,
                               poses_per_asset=max(1, ab.dataset_count // 2),
                               height=ab.image_size, width=ab.image_size)
    model = JointDiT(mcfg, seed=ab.seed)
    tcfg = TrainConfig(steps=ab.train_steps, batch_size=ab.batch_size, lr=ab.lr,
                       n_views=mcfg.n_views, seed=ab.seed, checkpoint_every=0)
    train(model, samples, tcfg, out)
    report, images = evaluate_model(model, asset_seed=samples[0].asset_seed,
                                    n_poses=ab.eval_poses, seed=ab.seed,
                                    sample_steps=ab.sample_steps,
                                    image_size=ab.image_size, collect_images=True)
    report.variant = variant
    report.to_csv(out / "report.csv")
    contact_sheet(out / "contact_sheet.png", images)
    return report


def write_comparison(reports: list[EvalReport], path):
    """One row per variant with aggregate metrics; quality orderings across
    variants are recorded here as observations, never asserted."""
    keys = sorted({k for r in reports for k in r.aggregates()})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + keys)
        for r in reports:
            agg = r.aggregates()
            w.writerow([r.variant] + [f"{agg[k]:.6f}" if k in agg else "" for k in keys])
