"""Hierarchical shifted-window Transformer over log-Mel spectrogram segments.

Shapes follow a channels-last token grid ``(batch', H, W, C)`` where H is the
frequency extent, W the time extent, and ``batch' = b * N`` folds the N time
segments of every input into the batch axis so they share all weights.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = Dict[str, Tensor]


class ConfigError(ValueError):
    """A model configuration violates a structural invariant."""


@dataclass(frozen=True)
class ModelConfig:
    N: int = 4
    t: int = 4
    e: int = 96
    depths: Tuple[int, ...] = (2, 2, 4, 2)
    heads: Tuple[int, ...] = (3, 6, 12, 24)
    mlp_ratio: int = 4
    k: int = 4
    f: int = 32
    d: int = 128
    c: int = 1
    ln_eps: float = 1e-5
    rel_pos_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(v) for v in self.depths))
        object.__setattr__(self, "heads", tuple(int(v) for v in self.heads))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def seg_width(self) -> int:
        return self.d // self.N

    @property
    def out_dim(self) -> int:
        return self.e * 2 ** (self.num_stages - 1)

    def stage_shape(self, s: int) -> Tuple[int, int, int]:
        """(H, W, C) of the token grid inside 0-based stage ``s``."""
        return self.f >> s, self.seg_width >> s, self.e << s

    def validate(self) -> None:
        if not self.depths or len(self.depths) != len(self.heads):
            raise ConfigError("depths and heads must be non-empty and of equal length")
        if any(dep <= 0 or dep % 2 for dep in self.depths):
            raise ConfigError(f"every stage depth must be a positive even number, got {self.depths}")
        if self.N <= 0 or self.d % self.N:
            raise ConfigError(f"d={self.d} is not divisible by N={self.N}")
        if self.t <= 0 or self.seg_width % self.t:
            raise ConfigError(f"segment width {self.seg_width} is not divisible by t={self.t}")
        merges = 2 ** (self.num_stages - 1)
        if self.f % merges or self.seg_width % merges:
            raise ConfigError(f"f={self.f} and d/N={self.seg_width} must be divisible by {merges}")
        for s, h in enumerate(self.heads):
            if h <= 0 or (self.e << s) % h:
                raise ConfigError(f"stage {s + 1} width {self.e << s} not divisible by {h} heads")
        if self.k < 1 or self.c < 1 or self.mlp_ratio < 1:
            raise ConfigError("k, c and mlp_ratio must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["depths"] = list(self.depths)
        out["heads"] = list(self.heads)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered name -> shape map; the parameter count is a pure function of this."""
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch_embed.weight": (cfg.c, cfg.e),
        "patch_embed.bias": (cfg.e,),
    }
    for s, depth in enumerate(cfg.depths):
        C = cfg.e << s
        hidden = C * cfg.mlp_ratio
        for b in range(depth):
            p = f"stages.{s}.blocks.{b}."
            shapes.update(
                {
                    p + "norm1.weight": (C,),
                    p + "norm1.bias": (C,),
                    p + "attn.qkv.weight": (C, 3 * C),
                    p + "attn.qkv.bias": (3 * C,),
                    p + "attn.proj.weight": (C, C),
                    p + "attn.proj.bias": (C,),
                    p + "norm2.weight": (C,),
                    p + "norm2.bias": (C,),
                    p + "mlp.fc1.weight": (C, hidden),
                    p + "mlp.fc1.bias": (hidden,),
                    p + "mlp.fc2.weight": (hidden, C),
                    p + "mlp.fc2.bias": (C,),
                }
            )
            if cfg.rel_pos_bias:
                H, W, _ = cfg.stage_shape(s)
                t_eff = window_width(cfg, W)
                shapes[p + "attn.rel_bias"] = ((2 * H - 1) * (2 * t_eff - 1), cfg.heads[s])
        if s < cfg.num_stages - 1:
            p = f"stages.{s}.merge."
            shapes[p + "norm.weight"] = (4 * C,)
            shapes[p + "norm.bias"] = (4 * C,)
            shapes[p + "reduction.weight"] = (4 * C, 2 * C)
    shapes["norm.weight"] = (cfg.out_dim,)
    shapes["norm.bias"] = (cfg.out_dim,)
    shapes["head.weight"] = (cfg.out_dim, cfg.k)
    shapes["head.bias"] = (cfg.k,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Truncated-normal(0.02) weights, zero biases, unit/zero LayerNorm."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("rel_bias"):
            value = _trunc_normal(rng, shape)
        elif ".norm" in name or name.startswith("norm."):
            value = np.ones(shape) if name.endswith("weight") else np.zeros(shape)
        elif name.endswith("bias"):
            value = np.zeros(shape)
        else:
            value = _trunc_normal(rng, shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# grid plumbing


def split_segments(x: Tensor, N: int) -> Tensor:
    """``(b, c, f, d) -> (b*N, f, d/N, c)``; segment i holds columns [i*d/N, (i+1)*d/N)."""
    b, c, f, d = x.shape
    if d % N:
        raise ConfigError(f"cannot split {d} frames into {N} equal segments")
    w = d // N
    x = ad.reshape(x, (b, c, f, N, w))
    x = ad.permute(x, (0, 3, 2, 4, 1))
    return ad.reshape(x, (b * N, f, w, c))


def patch_embed(x: Tensor, params: Params, prefix: str = "patch_embed.") -> Tensor:
    """Project every time-frequency bin's channel vector to e dims (1x1 patches)."""
    return ad.linear(x, params[prefix + "weight"], params[prefix + "bias"])


@dataclass(frozen=True)
class WindowLayout:
    batch: int
    H: int
    W: int
    t: int

    @property
    def num_windows(self) -> int:
        return self.W // self.t

    @property
    def tokens(self) -> int:
        return self.H * self.t


def window_partition(grid: Tensor, t_eff: int) -> Tuple[Tensor, WindowLayout]:
    """Split ``(B, H, W, C)`` into full-height windows ``(B*M, H*t_eff, C)``.

    Tokens inside a window are ordered frequency-major, then time.
    """
    B, H, W, C = grid.shape
    if W % t_eff:
        raise ConfigError(f"grid width {W} is not divisible by window width {t_eff}")
    M = W // t_eff
    x = ad.reshape(grid, (B, H, M, t_eff, C))
    x = ad.permute(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (B * M, H * t_eff, C)), WindowLayout(B, H, W, t_eff)


def window_merge(windows: Tensor, layout: WindowLayout) -> Tensor:
    B, H, W, t = layout.batch, layout.H, layout.W, layout.t
    M = layout.num_windows
    if windows.shape[:2] != (B * M, H * t):
        raise ConfigError(f"windows of shape {windows.shape} do not match layout {layout}")
    C = windows.shape[-1]
    x = ad.reshape(windows, (B, M, H, t, C))
    x = ad.permute(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (B, H, W, C))


def cyclic_shift(grid: Tensor, offset: int) -> Tensor:
    """Roll time columns by ``-offset``: column j moves to (j - offset) mod W."""
    if offset == 0:
        return grid
    return ad.roll(grid, -offset, axis=2)


@functools.lru_cache(maxsize=64)
def relative_position_index(H: int, t: int) -> np.ndarray:
    """Flat ``(L*L,)`` index into a ``((2H-1)(2t-1), heads)`` bias table."""
    rows, cols = np.meshgrid(np.arange(H), np.arange(t), indexing="ij")
    rows, cols = rows.reshape(-1), cols.reshape(-1)
    dr = rows[:, None] - rows[None, :] + H - 1
    dc = cols[:, None] - cols[None, :] + t - 1
    index = (dr * (2 * t - 1) + dc).reshape(-1)
    index.setflags(write=False)
    return index


@functools.lru_cache(maxsize=64)
def _shift_mask_array(H: int, W: int, t_eff: int, offset: int) -> np.ndarray:
    if not 0 <= offset < t_eff:
        raise ConfigError(f"shift offset {offset} must lie in [0, {t_eff})")
    M = W // t_eff
    mask = np.zeros((M, H * t_eff, H * t_eff))
    if offset == 0:
        return mask
    # Label each (shifted-frame) time column by its pre-shift region.
    region = np.zeros(W, dtype=int)
    region[W - t_eff : W - offset] = 1
    region[W - offset :] = 2
    for m in range(M):
        cols = region[m * t_eff : (m + 1) * t_eff]
        labels = np.tile(cols, H)  # frequency-major, time-minor token order
        mask[m] = np.where(labels[:, None] == labels[None, :], 0.0, -np.inf)
    mask.setflags(write=False)
    return mask


def build_shift_mask(H: int, W: int, t_eff: int, offset: int) -> np.ndarray:
    """Additive ``(M, H*t_eff, H*t_eff)`` mask of 0 / -inf for shifted windows."""
    return _shift_mask_array(H, W, t_eff, offset)


def window_msa(
    windows: Tensor,
    params: Params,
    prefix: str,
    heads: int,
    mask: Optional[np.ndarray] = None,
    layout: Optional[WindowLayout] = None,
) -> Tensor:
    """Multi-head self-attention restricted to each window.

    A ``<prefix>rel_bias`` entry in ``params`` adds a learned bias indexed by
    the relative (frequency, time) offset of each token pair; ``layout`` is
    then required to recover the window geometry.
    """
    Bw, L, C = windows.shape
    if C % heads:
        raise ConfigError(f"channel count {C} is not divisible by {heads} heads")
    hd = C // heads
    qkv = ad.linear(windows, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = ad.permute(ad.reshape(qkv, (Bw, L, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.matmul(ad.scale(q, hd**-0.5), k.transpose(-2, -1))
    table = params.get(prefix + "rel_bias")
    if table is not None:
        if layout is None:
            raise ConfigError("relative position bias needs the window layout")
        index = relative_position_index(layout.H, layout.t)
        bias = ad.reshape(ad.gather(table, index, axis=0), (L, L, heads))
        scores = ad.add(scores, ad.permute(bias, (2, 0, 1)))
    if mask is not None:
        M = mask.shape[0]
        scores = ad.reshape(scores, (Bw // M, M, heads, L, L))
        attn = ad.softmax(scores, axis=-1, mask=mask[None, :, None])
        attn = ad.reshape(attn, (Bw, heads, L, L))
    else:
        attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(attn, v)  # (Bw, heads, L, hd)
    out = ad.reshape(ad.permute(out, (0, 2, 1, 3)), (Bw, L, C))
    return ad.linear(out, params[prefix + "proj.weight"], params[prefix + "proj.bias"])


def window_width(cfg: ModelConfig, W: int) -> int:
    return min(cfg.t, W)


def swin_block(
    grid: Tensor,
    params: Params,
    prefix: str,
    heads: int,
    t_eff: int,
    shifted: bool,
    eps: float = 1e-5,
    offset: Optional[int] = None,
) -> Tensor:
    """Pre-norm residual block: windowed (optionally shifted) MSA, then MLP.

    Shifted blocks roll by half a window unless ``offset`` is given.
    """
    B, H, W, C = grid.shape
    if not shifted:
        offset = 0
    elif offset is None:
        offset = t_eff // 2
    h = ad.layer_norm(grid, params[prefix + "norm1.weight"], params[prefix + "norm1.bias"], eps)
    h = cyclic_shift(h, offset)
    windows, layout = window_partition(h, t_eff)
    mask = build_shift_mask(H, W, t_eff, offset) if offset else None
    attended = window_msa(windows, params, prefix + "attn.", heads, mask, layout)
    h = window_merge(attended, layout)
    if offset:
        h = cyclic_shift(h, W - offset)
    u = ad.add(grid, h)
    z = ad.layer_norm(u, params[prefix + "norm2.weight"], params[prefix + "norm2.bias"], eps)
    z = ad.linear(z, params[prefix + "mlp.fc1.weight"], params[prefix + "mlp.fc1.bias"])
    z = ad.gelu(z)
    z = ad.linear(z, params[prefix + "mlp.fc2.weight"], params[prefix + "mlp.fc2.bias"])
    return ad.add(u, z)


def parity_gather(grid: Tensor) -> Tensor:
    """``(B, H, W, C) -> (B, H/2, W/2, 4C)``; cell (i, j) stacks sources
    (2i, 2j), (2i+1, 2j), (2i, 2j+1), (2i+1, 2j+1) along channels."""
    B, H, W, C = grid.shape
    if H % 2 or W % 2:
        raise ConfigError(f"patch merging needs even H and W, got {H}x{W}")
    parts = [
        grid[:, 0::2, 0::2, :],
        grid[:, 1::2, 0::2, :],
        grid[:, 0::2, 1::2, :],
        grid[:, 1::2, 1::2, :],
    ]
    return ad.concat(parts, axis=-1)


def patch_merging(grid: Tensor, params: Params, prefix: str, eps: float = 1e-5) -> Tensor:
    """Parity gather, LayerNorm over 4C, bias-free linear 4C -> 2C."""
    x = parity_gather(grid)
    x = ad.layer_norm(x, params[prefix + "norm.weight"], params[prefix + "norm.bias"], eps)
    return ad.linear(x, params[prefix + "reduction.weight"])


# ---------------------------------------------------------------------------
# full network


StageHook = Callable[[int, Tensor], None]


def _check_input(x: Tensor, cfg: ModelConfig) -> None:
    if x.ndim != 4 or x.shape[1:] != (cfg.c, cfg.f, cfg.d):
        raise ConfigError(f"input shape {x.shape} does not match (b, {cfg.c}, {cfg.f}, {cfg.d})")


def encode(x: Tensor, cfg: ModelConfig, params: Params, stage_hook: Optional[StageHook] = None) -> Tensor:
    """Run everything up to the pooled feature ``y`` of shape ``(b, out_dim)``."""
    _check_input(x, cfg)
    b = x.shape[0]
    grid = patch_embed(split_segments(x, cfg.N), params)
    for s, depth in enumerate(cfg.depths):
        t_eff = window_width(cfg, grid.shape[2])
        for i in range(depth):
            grid = swin_block(
                grid,
                params,
                f"stages.{s}.blocks.{i}.",
                cfg.heads[s],
                t_eff,
                shifted=bool(i % 2),
                eps=cfg.ln_eps,
            )
        if stage_hook is not None:
            stage_hook(s, grid)
        if s < cfg.num_stages - 1:
            grid = patch_merging(grid, params, f"stages.{s}.merge.", cfg.ln_eps)
    grid = ad.layer_norm(grid, params["norm.weight"], params["norm.bias"], cfg.ln_eps)
    Bn, H, W, C = grid.shape
    pooled = ad.mean_pool(ad.reshape(grid, (Bn, H * W, C)), axis=1)
    return ad.mean(ad.reshape(pooled, (b, cfg.N, C)), axis=1)


def forward(x: Tensor, cfg: ModelConfig, params: Params, stage_hook: Optional[StageHook] = None) -> Tensor:
    """Logits ``(b, k)`` for a spectrogram batch ``(b, c, f, d)``."""
    y = encode(x, cfg, params, stage_hook)
    return ad.linear(y, params["head.weight"], params["head.bias"])


def predict_proba(x, cfg: ModelConfig, params: Params) -> np.ndarray:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=_param_dtype(params))
    return ad.softmax(forward(x, cfg, params), axis=-1).data


def feature_maps(x, cfg: ModelConfig, params: Params) -> List[np.ndarray]:
    """Per-stage channel-mean maps, each ``(b, N, H_s, W_s)``."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=_param_dtype(params))
    b = x.shape[0]
    maps: List[np.ndarray] = []

    def hook(s: int, grid: Tensor) -> None:
        Bn, H, W, C = grid.shape
        maps.append(grid.data.mean(axis=-1).reshape(b, cfg.N, H, W))

    forward(x, cfg, params, stage_hook=hook)
    return maps


def _param_dtype(params: Params):
    return next(iter(params.values())).dtype
