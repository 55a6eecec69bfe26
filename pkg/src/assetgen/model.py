"""Joint RGB + point-map diffusion transformer.

The flow state lives in raw patch space (p*p*3 per token). A learned linear
patch embedding lifts patches to model width; a single transformer stack
attends over one unified sequence

    [text | target-rgb | target-pm | view0-rgb | view0-pm | ... ]

with per-token conditioning (timestep + domain switcher), 2D rotary
positions shared across domains, a text-agnostic attention mask, and dual
LoRA adapters routed by token role. The output head reads target tokens
only and predicts per-patch velocity for both domains.

Position layout: target tokens occupy the patch grid (i, j), i row, j col.
Every condition image token stores (i - w', j) where w' is the target grid
width, so all condition views share one grid that is spatially disjoint from
the target grid. Text token k sits at (-1, -1-k): columns are negative there,
which no image token ever uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays

# branch codes
TARGET = 0
CONDITION = 1
# domain codes
RGB = 0
POINTMAP = 1
TEXT = 2

ROTARY_BASE = 10000.0
TIME_SCALE = 1000.0  # timestep in [0,1] scaled before the sinusoid


@dataclass(frozen=True)
class TokenRole:
    branch: int
    domain: int
    view_index: int = -1  # condition image tokens only


@dataclass
class ModelConfig:
    image_size: int = 32
    patch: int = 4
    dim: int = 128
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    time_dim: int = 64
    domain_dim: int = 64
    cond_dim: int = 128
    text_len: int = 8
    n_captions: int = 16
    n_views: int = 4
    lora_rank: int = 16
    lora_alpha: float = 16.0
    # mechanism switches (ablations flip exactly one)
    shared_pe: bool = True
    text_agnostic: bool = True
    domain_lora: bool = True
    pointmap: bool = True

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ValueError("patch size must divide image size")
        if self.dim % self.heads != 0:
            raise ValueError("heads must divide model dim")
        if (self.dim // self.heads) % 4 != 0:
            raise ValueError("head dim must be divisible by 4 for 2D rotary")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def tokens_per_image(self) -> int:
        return self.grid * self.grid


@dataclass
class TokenSequence:
    """Unified token sequence plus per-token role metadata."""

    embeddings: T.Tensor  # (L, dim)
    branch: np.ndarray  # (L,) int8
    domain: np.ndarray  # (L,) int8
    view_index: np.ndarray  # (L,) int16, -1 when absent
    positions: np.ndarray  # (L, 2) int32, signed
    timesteps: np.ndarray  # (L,) float32

    def __len__(self):
        return len(self.branch)

    def role(self, i: int) -> TokenRole:
        return TokenRole(int(self.branch[i]), int(self.domain[i]), int(self.view_index[i]))

    @property
    def target_rows(self) -> np.ndarray:
        return np.nonzero(self.branch == TARGET)[0]


# ---------------------------------------------------------------------------
# patch plumbing (pure array reshapes; the learned projection lives in the model)
# ---------------------------------------------------------------------------


def extract_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """(h, w, 3) -> (h/p * w/p, p*p*3), row-major over the patch grid."""
    h, w, c = image.shape
    if h % patch or w % patch:
        raise ValueError(f"patch {patch} does not divide image {h}x{w}")
    gh, gw = h // patch, w // patch
    x = image.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(gh * gw, patch * patch * c))


def patches_to_image(patches: np.ndarray, grid: int, patch: int) -> np.ndarray:
    """Inverse of extract_patches for a square grid."""
    c = patches.shape[1] // (patch * patch)
    x = patches.reshape(grid, grid, patch, patch, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(grid * patch, grid * patch, c))


def grid_positions(grid: int) -> np.ndarray:
    """Row-major (i, j) integer positions for a square patch grid."""
    i, j = np.mgrid[0:grid, 0:grid]
    return np.stack([i.ravel(), j.ravel()], axis=1).astype(np.int32)


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of per-token timesteps; t=0 rows are all (1, 0)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * TIME_SCALE * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)


def rotary_tables(positions: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin of shape (L, head_dim/2): first half of the pairs rotates by the
    row coordinate, second half by the column coordinate."""
    pairs_per_axis = head_dim // 4
    inv_freq = ROTARY_BASE ** (-np.arange(pairs_per_axis) / pairs_per_axis)
    ang_i = positions[:, 0:1].astype(np.float64) * inv_freq[None, :]
    ang_j = positions[:, 1:2].astype(np.float64) * inv_freq[None, :]
    ang = np.concatenate([ang_i, ang_j], axis=1)
    return np.cos(ang), np.sin(ang)


def assemble_sequence(text_tokens, target_rgb, target_pm, view_tokens, grid: int,
                      t: float, shared_pe: bool = True) -> TokenSequence:
    """Concatenate embedded blocks into the unified sequence with role metadata.

    ``view_tokens`` is a list of (rgb, pm-or-None) tensor pairs, one per view.
    All image blocks must share the same square patch grid. Condition
    timesteps are exactly 0; target tokens carry the sampled t.
    """
    n = grid * grid
    for name, block in [("target_rgb", target_rgb)] + ([("target_pm", target_pm)] if target_pm is not None else []):
        if block.shape[0] != n:
            raise ValueError(f"{name} has {block.shape[0]} tokens, expected {n}")
    gp = grid_positions(grid)
    text_len = text_tokens.shape[0]

    blocks = [text_tokens, target_rgb]
    branch = [np.full(text_len, CONDITION, np.int8), np.full(n, TARGET, np.int8)]
    domain = [np.full(text_len, TEXT, np.int8), np.full(n, RGB, np.int8)]
    view_idx = [np.full(text_len, -1, np.int16), np.full(n, -1, np.int16)]
    text_pos = np.stack([np.full(text_len, -1, np.int32),
                         -1 - np.arange(text_len, dtype=np.int32)], axis=1)
    positions = [text_pos, gp]
    times = [np.zeros(text_len, np.float32), np.full(n, t, np.float32)]

    image_block = 1  # target-rgb occupied block 0 of the natural-order layout
    if target_pm is not None:
        blocks.append(target_pm)
        branch.append(np.full(n, TARGET, np.int8))
        domain.append(np.full(n, POINTMAP, np.int8))
        view_idx.append(np.full(n, -1, np.int16))
        # shared cross-domain positions: identical (i, j) as the rgb block
        positions.append(gp if shared_pe else gp + np.array([image_block * grid, 0], np.int32))
        times.append(np.full(n, t, np.float32))
        image_block += 1

    cond_shift = gp + np.array([-grid, 0], np.int32)  # the unified (i - w', j) grid
    for v, (rgb_tok, pm_tok) in enumerate(view_tokens):
        for dom, tok in ((RGB, rgb_tok), (POINTMAP, pm_tok)):
            if tok is None:
                continue
            if tok.shape[0] != n:
                raise ValueError(f"view {v} block has {tok.shape[0]} tokens, expected {n}")
            blocks.append(tok)
            branch.append(np.full(n, CONDITION, np.int8))
            domain.append(np.full(n, dom, np.int8))
            view_idx.append(np.full(n, v, np.int16))
            positions.append(cond_shift if shared_pe else gp + np.array([image_block * grid, 0], np.int32))
            times.append(np.zeros(n, np.float32))
            image_block += 1

    return TokenSequence(
        embeddings=T.concat(blocks, axis=0),
        branch=np.concatenate(branch),
        domain=np.concatenate(domain),
        view_index=np.concatenate(view_idx),
        positions=np.concatenate(positions),
        timesteps=np.concatenate(times),
    )


def build_attention_mask(seq: TokenSequence, text_agnostic: bool = True) -> np.ndarray:
    """(L, L) boolean; True = query row may attend to key column.

    Entry (q, k) is blocked iff domain(q) = pointmap and domain(k) = text;
    rgb and text queries attend everywhere.
    """
    n = len(seq)
    allowed = np.ones((n, n), dtype=bool)
    if text_agnostic:
        pm_q = seq.domain == POINTMAP
        text_k = seq.domain == TEXT
        allowed[np.ix_(pm_q, text_k)] = False
    return allowed


def route_masks(seq: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    """(reference rows, domain rows): Reference-LoRA fires on condition image
    tokens (never text), Domain-LoRA on every point-map token."""
    ref = (seq.branch == CONDITION) & (seq.domain != TEXT)
    dom = seq.domain == POINTMAP
    return ref, dom


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Linear:
    def __init__(self, params, name, n_in, n_out, rng, init="normal", bias=True):
        if init == "zero":
            w = np.zeros((n_in, n_out))
        elif init == "orthogonal":
            q, _ = np.linalg.qr(rng.normal(size=(n_in, n_out)) if n_in >= n_out
                                else rng.normal(size=(n_out, n_in)))
            w = q if n_in >= n_out else q.T
        else:
            w = rng.normal(0.0, 0.02, size=(n_in, n_out))
        self.w = params.add(f"{name}.w", w)
        self.b = params.add(f"{name}.b", np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.w)
        return T.add(y, self.b) if self.b is not None else y


class LoRALinear:
    """Linear projection with role-routed Reference/Domain low-rank adapters.

    Up matrices start at zero so fresh adapters are an exact no-op; the
    row masks multiply adapter outputs by 0/1, keeping untouched rows
    bit-identical to the base projection.
    """

    def __init__(self, params, name, n_in, n_out, rng, rank, alpha, domain_lora=True, bias=True):
        self.base = Linear(params, name, n_in, n_out, rng, bias=bias)
        self.scaling = alpha / rank
        self.ref_a = params.add(f"{name}.ref_a", rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, rank)))
        self.ref_b = params.add(f"{name}.ref_b", np.zeros((rank, n_out)))
        if domain_lora:
            self.dom_a = params.add(f"{name}.dom_a", rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, rank)))
            self.dom_b = params.add(f"{name}.dom_b", np.zeros((rank, n_out)))
        else:
            self.dom_a = self.dom_b = None

    def __call__(self, x, ref_rows: np.ndarray, dom_rows: np.ndarray):
        out = self.base(x)
        if ref_rows.any():
            delta = T.matmul(T.matmul(x, self.ref_a), self.ref_b)
            gate = ref_rows.astype(x.data.dtype)[:, None] * self.scaling
            out = T.add(out, T.mul(delta, gate))
        if self.dom_a is not None and dom_rows.any():
            delta = T.matmul(T.matmul(x, self.dom_a), self.dom_b)
            gate = dom_rows.astype(x.data.dtype)[:, None] * self.scaling
            out = T.add(out, T.mul(delta, gate))
        return out


class ParamStore:
    """Flat name -> Tensor registry in insertion order."""

    def __init__(self):
        self.params: dict[str, T.Tensor] = {}

    def add(self, name: str, data) -> T.Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        p = T.parameter(np.asarray(data))
        self.params[name] = p
        return p


class Block:
    def __init__(self, params, name, cfg: ModelConfig, rng):
        d = cfg.dim
        lora = dict(rank=cfg.lora_rank, alpha=cfg.lora_alpha, domain_lora=cfg.domain_lora)
        self.norm1 = params.add(f"{name}.norm1.gain", np.ones(d))
        self.wq = LoRALinear(params, f"{name}.attn.wq", d, d, rng, **lora)
        self.wk = LoRALinear(params, f"{name}.attn.wk", d, d, rng, **lora)
        self.wv = LoRALinear(params, f"{name}.attn.wv", d, d, rng, **lora)
        self.wo = LoRALinear(params, f"{name}.attn.wo", d, d, rng, **lora)
        self.norm2 = params.add(f"{name}.norm2.gain", np.ones(d))
        hidden = d * cfg.mlp_ratio
        self.fc1 = LoRALinear(params, f"{name}.mlp.fc1", d, hidden, rng, **lora)
        self.fc2 = LoRALinear(params, f"{name}.mlp.fc2", hidden, d, rng, **lora)
        self.adaln = Linear(params, f"{name}.adaln", cfg.cond_dim, 6 * d, rng, init="zero")
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads

    def __call__(self, x, cond, cos, sin, allowed, ref_rows, dom_rows):
        d = x.shape[1]
        mod = self.adaln(cond)
        s1 = T.slice_lastdim(mod, 0, d)
        b1 = T.slice_lastdim(mod, d, d)
        g1 = T.slice_lastdim(mod, 2 * d, d)
        s2 = T.slice_lastdim(mod, 3 * d, d)
        b2 = T.slice_lastdim(mod, 4 * d, d)
        g2 = T.slice_lastdim(mod, 5 * d, d)

        h = T.add(T.mul(T.rmsnorm(x, self.norm1), T.add(s1, 1.0)), b1)
        q = self.wq(h, ref_rows, dom_rows)
        k = self.wk(h, ref_rows, dom_rows)
        v = self.wv(h, ref_rows, dom_rows)
        L = x.shape[0]
        hd = self.head_dim

        def split_heads(z):
            return T.transpose(T.reshape(z, (L, self.heads, hd)), (1, 0, 2))

        q, k, v = split_heads(q), split_heads(k), split_heads(v)
        q = T.apply_rotary(q, cos[None], sin[None])
        k = T.apply_rotary(k, cos[None], sin[None])
        q = T.mul(q, 1.0 / math.sqrt(hd))  # scale q, not the L x L scores
        o = T.masked_attention(q, k, v, allowed)
        o = T.reshape(T.transpose(o, (1, 0, 2)), (L, d))
        o = self.wo(o, ref_rows, dom_rows)
        x = T.add(x, T.mul(g1, o))

        h2 = T.add(T.mul(T.rmsnorm(x, self.norm2), T.add(s2, 1.0)), b2)
        m = self.fc2(T.silu(self.fc1(h2, ref_rows, dom_rows)), ref_rows, dom_rows)
        return T.add(x, T.mul(g2, m))


class JointDiT:
    """The miniature dual-branch diffusion transformer."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 3])
        ps = ParamStore()
        self.params = ps
        # learned patch projection; orthogonal columns make the tied
        # transpose an exact inverse on patch space
        self.patch_embed = Linear(ps, "patch_embed", cfg.patch_dim, cfg.dim, rng,
                                  init="orthogonal", bias=False)
        self.caption_table = ps.add("caption_table",
                                    rng.normal(0.0, 0.02, (cfg.n_captions * cfg.text_len, cfg.dim)))
        self.null_text = ps.add("null_text", rng.normal(0.0, 0.02, (1, cfg.dim)))
        self.null_ref = ps.add("null_ref", rng.normal(0.0, 0.02, (1, cfg.dim)))
        # domain switcher: one learned embedding per generated domain;
        # text tokens reuse the rgb row
        self.domain_table = ps.add("domain_table", rng.normal(0.0, 0.02, (2, cfg.domain_dim)))
        self.cond_lin1 = Linear(ps, "cond.lin1", cfg.time_dim + cfg.domain_dim, cfg.cond_dim, rng)
        self.cond_lin2 = Linear(ps, "cond.lin2", cfg.cond_dim, cfg.cond_dim, rng)
        self.blocks = [Block(ps, f"blocks.{i}", cfg, rng) for i in range(cfg.depth)]
        self.final_norm = ps.add("final.gain", np.ones(cfg.dim))
        self.final_adaln = Linear(ps, "final.adaln", cfg.cond_dim, 2 * cfg.dim, rng, init="zero")
        self.head = Linear(ps, "head", cfg.dim, cfg.patch_dim, rng, init="zero")

    # -- embedding helpers ---------------------------------------------------

    def embed_patches(self, patches) -> T.Tensor:
        x = patches if isinstance(patches, T.Tensor) else T.tensor(np.asarray(patches))
        return self.patch_embed(x)

    def unembed_tokens(self, tokens: T.Tensor) -> T.Tensor:
        """Tied inverse of the patch projection (exact for orthogonal init)."""
        return T.matmul(tokens, T.transpose(self.patch_embed.w, (1, 0)))

    def caption_tokens(self, caption_id: int) -> T.Tensor:
        rows = caption_id * self.cfg.text_len + np.arange(self.cfg.text_len)
        return T.take_rows(self.caption_table, rows)

    def null_text_tokens(self) -> T.Tensor:
        return T.take_rows(self.null_text, np.zeros(self.cfg.text_len, np.int64))

    def null_view_tokens(self) -> T.Tensor:
        return T.take_rows(self.null_ref, np.zeros(self.cfg.tokens_per_image, np.int64))

    # -- sequence assembly ---------------------------------------------------

    def assemble(self, target_rgb_patches, target_pm_patches, view_patches,
                 caption_id: int, t: float, drop_text: bool = False,
                 drop_reference: bool = False) -> TokenSequence:
        """Embed raw patch blocks and build the unified token sequence.

        ``view_patches`` is a list of (rgb_patches, pm_patches) per view; pm
        entries are ignored when the model runs without a point-map branch.
        Dropped conditions are replaced by the learned null embeddings while
        keeping positions, roles and timesteps intact.
        """
        cfg = self.cfg
        text = self.null_text_tokens() if drop_text else self.caption_tokens(caption_id)
        tgt_rgb = self.embed_patches(target_rgb_patches)
        tgt_pm = self.embed_patches(target_pm_patches) if cfg.pointmap else None
        views = []
        for rgb_p, pm_p in view_patches:
            if drop_reference:
                rgb_tok = self.null_view_tokens()
                pm_tok = self.null_view_tokens() if cfg.pointmap else None
            else:
                rgb_tok = self.embed_patches(rgb_p)
                pm_tok = self.embed_patches(pm_p) if cfg.pointmap else None
            views.append((rgb_tok, pm_tok))
        return assemble_sequence(text, tgt_rgb, tgt_pm, views, cfg.grid, t,
                                 shared_pe=cfg.shared_pe)

    # -- forward -------------------------------------------------------------

    def conditioning(self, seq: TokenSequence) -> T.Tensor:
        """Per-token conditioning vector from timestep features concatenated
        with the domain-switcher embedding (text rides the rgb row)."""
        tfeat = T.tensor(timestep_features(seq.timesteps, self.cfg.time_dim))
        dom_idx = np.where(seq.domain == TEXT, RGB, seq.domain).astype(np.int64)
        demb = T.take_rows(self.domain_table, dom_idx)
        h = T.silu(self.cond_lin1(T.concat([tfeat, demb], axis=-1)))
        return T.silu(self.cond_lin2(h))

    def forward(self, seq: TokenSequence, allowed: np.ndarray | None = None) -> T.Tensor:
        """Velocity prediction for the target rows, shape (n_target, patch_dim)."""
        if allowed is None:
            allowed = build_attention_mask(seq, self.cfg.text_agnostic)
        cond = self.conditioning(seq)
        cos, sin = rotary_tables(seq.positions, self.cfg.dim // self.cfg.heads)
        ref_rows, dom_rows = route_masks(seq)
        x = seq.embeddings
        for block in self.blocks:
            x = block(x, cond, cos, sin, allowed, ref_rows, dom_rows)
        mod = self.final_adaln(cond)
        sf = T.slice_lastdim(mod, 0, self.cfg.dim)
        bf = T.slice_lastdim(mod, self.cfg.dim, self.cfg.dim)
        h = T.add(T.mul(T.rmsnorm(x, self.final_norm), T.add(sf, 1.0)), bf)
        out = self.head(h)
        return T.take_rows(out, seq.target_rows)

    def velocity(self, target_rgb_patches, target_pm_patches, view_patches,
                 caption_id: int, t: float, drop_text=False, drop_reference=False):
        """Returns (v_rgb, v_pm) tensors; v_pm is None without a pm branch."""
        seq = self.assemble(target_rgb_patches, target_pm_patches, view_patches,
                            caption_id, t, drop_text, drop_reference)
        out = self.forward(seq)
        n = self.cfg.tokens_per_image
        if not self.cfg.pointmap:
            return out, None
        v_rgb = T.take_rows(out, np.arange(n))
        v_pm = T.take_rows(out, np.arange(n, 2 * n))
        return v_rgb, v_pm

    # -- parameter plumbing ----------------------------------------------------

    def named_parameters(self) -> dict[str, T.Tensor]:
        return self.params.params

    def adapter_names(self) -> set[str]:
        return {n for n in self.params.params
                if ".ref_a" in n or ".ref_b" in n or ".dom_a" in n or ".dom_b" in n}

    def save(self, path, extra: dict[str, np.ndarray] | None = None):
        arrays = {name: p.data for name, p in self.params.params.items()}
        if extra:
            arrays.update(extra)
        save_arrays(path, arrays)

    def load(self, path) -> dict[str, np.ndarray]:
        """Load parameters in place; returns any extra (non-parameter) records."""
        arrays = load_arrays(path)
        extra = {}
        for name, arr in arrays.items():
            if name in self.params.params:
                p = self.params.params[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"checkpoint shape mismatch for {name}: "
                                     f"{arr.shape} vs {p.data.shape}")
                p.data = arr.astype(T.current_dtype())
            else:
                extra[name] = arr
        return extra


def patchify(model: JointDiT, image: np.ndarray) -> T.Tensor:
    """Learned linear projection of p x p x 3 patches; grid order row-major."""
    return model.embed_patches(extract_patches(image, model.cfg.patch))


def unpatchify(model: JointDiT, tokens: T.Tensor) -> np.ndarray:
    """Tied-inverse reconstruction back to an image (test/inspection path)."""
    patches = model.unembed_tokens(tokens)
    return patches_to_image(patches.data, model.cfg.grid, model.cfg.patch)
