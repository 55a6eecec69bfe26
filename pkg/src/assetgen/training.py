"""Rectified-flow training with clean conditions at timestep 0.

Flow convention: t=0 is data, t=1 is noise, x_t = (1-t)*x0 + t*eps, and the
regression target is the constant velocity eps - x0. Both target domains
share one t per sample but draw independent noise. Text and reference
conditions are dropped independently with probability p (default 0.1) and
replaced by learned null embeddings, which is what enables classifier-free
guidance at sampling time.

All randomness is derived from (seed, step, index) tuples, so an interrupted
run resumed from a checkpoint replays the exact loss trajectory.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import TrainingSample
from .model import JointDiT, extract_patches


class NumericError(RuntimeError):
    """Raised when training hits a non-finite loss."""


@dataclass
class FlowSample:
    """One linear-interpolation draw shared by both target domains."""

    x0_rgb: np.ndarray
    x0_pm: np.ndarray | None
    eps_rgb: np.ndarray
    eps_pm: np.ndarray | None
    t: float

    @property
    def xt_rgb(self) -> np.ndarray:
        return (1.0 - self.t) * self.x0_rgb + self.t * self.eps_rgb

    @property
    def xt_pm(self) -> np.ndarray | None:
        if self.x0_pm is None:
            return None
        return (1.0 - self.t) * self.x0_pm + self.t * self.eps_pm

    @property
    def velocity_rgb(self) -> np.ndarray:
        return self.eps_rgb - self.x0_rgb

    @property
    def velocity_pm(self) -> np.ndarray | None:
        if self.x0_pm is None:
            return None
        return self.eps_pm - self.x0_pm


@dataclass
class TrainConfig:
    steps: int = 8000
    batch_size: int = 8
    lr: float = 1e-3
    lr_schedule: str = "constant"  # constant | cosine
    dropout_p: float = 0.1
    n_views: int = 4
    seed: int = 0
    base_freeze_step: int = -1  # freeze non-adapter params from this step; -1 = never
    rgb_weight: float = 1.0
    pm_weight: float = 1.0
    checkpoint_every: int = 1000
    debug_checks: bool = False

    def __post_init__(self):
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout probability must lie in [0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(self.steps, 1)))
        return self.lr


def draw_condition_dropout(rng: np.random.Generator, p: float = 0.1) -> tuple[bool, bool]:
    """Two independent Bernoulli(p) draws: (drop text, drop reference views).

    The actual substitution by null embeddings happens in sequence assembly;
    the flags are also logged for rate monitoring.
    """
    return bool(rng.random() < p), bool(rng.random() < p)


def make_flow_sample(x0_rgb: np.ndarray, x0_pm: np.ndarray | None,
                     rng: np.random.Generator, t: float | None = None) -> FlowSample:
    if t is None:
        t = float(rng.uniform(0.0, 1.0))
    eps_rgb = rng.standard_normal(x0_rgb.shape).astype(x0_rgb.dtype)
    eps_pm = None
    if x0_pm is not None:
        eps_pm = rng.standard_normal(x0_pm.shape).astype(x0_pm.dtype)
    return FlowSample(x0_rgb, x0_pm, eps_rgb, eps_pm, t)


def sample_view_patches(sample: TrainingSample, patch: int, n_views: int):
    if len(sample.views) < n_views:
        raise ValueError(f"sample has {len(sample.views)} views, model needs {n_views}")
    return [(extract_patches(v.rgb, patch), extract_patches(v.pointmap, patch))
            for v in sample.views[:n_views]]


def flow_loss(model: JointDiT, sample: TrainingSample, rng: np.random.Generator,
              dropout_p: float = 0.1, rgb_weight: float = 1.0, pm_weight: float = 1.0,
              view_patches=None):
    """One training term: returns (loss tensor, info dict).

    Draws t ~ U[0,1], noises both target domains with that t, assembles the
    sequence with condition timesteps 0, and regresses the predicted
    velocity onto eps - x0 over all target tokens (domains weighted by the
    configured weights, equal by default). ``view_patches`` lets the caller
    reuse patch extraction across steps; the values are identical.
    """
    cfg = model.cfg
    x0_rgb = extract_patches(sample.target_rgb, cfg.patch)
    x0_pm = extract_patches(sample.target_pm, cfg.patch) if cfg.pointmap else None
    flow = make_flow_sample(x0_rgb, x0_pm, rng)
    drop_text, drop_ref = draw_condition_dropout(rng, dropout_p)
    views = view_patches if view_patches is not None else sample_view_patches(
        sample, cfg.patch, cfg.n_views)

    v_rgb, v_pm = model.velocity(flow.xt_rgb, flow.xt_pm, views, sample.caption_id,
                                 flow.t, drop_text=drop_text, drop_reference=drop_ref)
    d_rgb = T.sub(v_rgb, flow.velocity_rgb)
    loss_rgb = T.mean_all(T.mul(d_rgb, d_rgb))
    info = {"t": flow.t, "drop_text": drop_text, "drop_ref": drop_ref,
            "rgb_loss": loss_rgb.item(), "pm_loss": 0.0}
    if v_pm is not None:
        d_pm = T.sub(v_pm, flow.velocity_pm)
        loss_pm = T.mean_all(T.mul(d_pm, d_pm))
        info["pm_loss"] = loss_pm.item()
        wsum = rgb_weight + pm_weight
        loss = T.add(T.mul(loss_rgb, rgb_weight / wsum), T.mul(loss_pm, pm_weight / wsum))
    else:
        loss = loss_rgb
    if not np.isfinite(loss.item()):
        raise NumericError(
            f"non-finite loss (rgb={info['rgb_loss']}, pm={info['pm_loss']}, t={flow.t:.4f})")
    return loss, info


class Adam:
    """Plain Adam over a named parameter dict with a freeze filter."""

    def __init__(self, params: dict[str, T.Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float | None = None, grad_scale: float = 1.0,
             frozen: set[str] | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None or (frozen and name in frozen):
                continue
            g = p.grad * grad_scale
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * (g * g)
            p.data = p.data - lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{n}": a for n, a in self.m.items()}
        out.update({f"opt.v.{n}": a for n, a in self.v.items()})
        out["opt.step"] = np.array([self.step_count], dtype=np.float32)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]):
        for n in self.m:
            if f"opt.m.{n}" in arrays:
                self.m[n] = arrays[f"opt.m.{n}"].astype(self.m[n].dtype)
                self.v[n] = arrays[f"opt.v.{n}"].astype(self.v[n].dtype)
        if "opt.step" in arrays:
            self.step_count = int(arrays["opt.step"][0])


def train(model: JointDiT, samples: list[TrainingSample], tcfg: TrainConfig,
          out_dir, resume: str | None = None) -> Path:
    """Seeded, resumable loop; logs per-step domain-split losses to CSV and
    writes periodic checkpoints. Returns the final checkpoint path."""
    if not samples:
        raise ValueError("training needs a nonempty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    opt = Adam(model.named_parameters(), lr=tcfg.lr)
    start_step = 0
    if resume is not None:
        extra = model.load(resume)
        opt.load_state(extra)
        if "meta.step" in extra:
            start_step = int(extra["meta.step"][0])

    base_names = set(model.named_parameters()) - model.adapter_names()
    view_cache = {i: sample_view_patches(s, model.cfg.patch, model.cfg.n_views)
                  for i, s in enumerate(samples)}
    metrics_path = out / "metrics.csv"
    new_log = start_step == 0 or not metrics_path.exists()
    prev_checks = T.set_finite_checks(tcfg.debug_checks)
    ckpt_path = out / "checkpoint.agt"
    try:
        with open(metrics_path, "w" if new_log else "a", newline="") as fh:
            writer = csv.writer(fh)
            if new_log:
                writer.writerow(["step", "total_loss", "rgb_loss", "pm_loss",
                                 "text_drop_rate", "ref_drop_rate"])
            for step in range(start_step, tcfg.steps):
                pick = np.random.default_rng([tcfg.seed, 4, step])
                idx = pick.integers(0, len(samples), size=tcfg.batch_size)
                opt.zero_grad()
                totals, rgbs, pms, tdrops, rdrops = [], [], [], [], []
                for k, i in enumerate(idx):
                    rng = np.random.default_rng([tcfg.seed, 5, step, k])
                    try:
                        loss, info = flow_loss(model, samples[int(i)], rng, tcfg.dropout_p,
                                               tcfg.rgb_weight, tcfg.pm_weight,
                                               view_patches=view_cache[int(i)])
                    except NumericError as e:
                        raise NumericError(f"step {step}, sample {int(i)}: {e}") from e
                    T.backward(loss)
                    totals.append(loss.item())
                    rgbs.append(info["rgb_loss"])
                    pms.append(info["pm_loss"])
                    tdrops.append(info["drop_text"])
                    rdrops.append(info["drop_ref"])
                frozen = base_names if 0 <= tcfg.base_freeze_step <= step else None
                opt.step(lr=tcfg.lr_at(step), grad_scale=1.0 / tcfg.batch_size, frozen=frozen)
                writer.writerow([step, f"{np.mean(totals):.6f}", f"{np.mean(rgbs):.6f}",
                                 f"{np.mean(pms):.6f}", f"{np.mean(tdrops):.3f}",
                                 f"{np.mean(rdrops):.3f}"])
                if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
                    _save_checkpoint(model, opt, step + 1, ckpt_path)
        _save_checkpoint(model, opt, tcfg.steps, ckpt_path)
    finally:
        T.set_finite_checks(prev_checks)
    return ckpt_path


def _save_checkpoint(model: JointDiT, opt: Adam, step: int, path):
    extra = opt.state_arrays()
    extra["meta.step"] = np.array([step], dtype=np.float32)
    for fname, value in _config_meta(model).items():
        extra[fname] = value
    model.save(path, extra=extra)


def _config_meta(model: JointDiT) -> dict[str, np.ndarray]:
    cfg = model.cfg
    fields = ["image_size", "patch", "dim", "depth", "heads", "mlp_ratio", "time_dim",
              "domain_dim", "cond_dim", "text_len", "n_captions", "n_views",
              "lora_rank", "lora_alpha", "shared_pe", "text_agnostic",
              "domain_lora", "pointmap"]
    return {f"meta.cfg.{f}": np.array([float(getattr(cfg, f))], dtype=np.float32)
            for f in fields}


def load_model(path) -> tuple[JointDiT, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint's embedded config and load weights."""
    from .checkpoint import load_arrays
    from .model import ModelConfig

    arrays = load_arrays(path)
    kwargs = {}
    for name, arr in arrays.items():
        if name.startswith("meta.cfg."):
            f = name[len("meta.cfg."):]
            val = float(arr[0])
            if f == "lora_alpha":
                kwargs[f] = val
            elif f in ("shared_pe", "text_agnostic", "domain_lora", "pointmap"):
                kwargs[f] = bool(val)
            else:
                kwargs[f] = int(val)
    if not kwargs:
        raise ValueError(f"{path}: checkpoint carries no model config records")
    model = JointDiT(ModelConfig(**kwargs))
    extra = model.load(path)
    return model, extra
