"""Conditional score network: masked multi-level token embedding, semantic
channel concatenation, dual-path adaptive layer normalisation, and one output
head per residual level.

Everything runs in float64 so finite-difference gradient checks hold at tight
tolerances and checkpoints serialise exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .core import ConditionBundle, ScoreField, TokenGrid
from .diffusion import combine_log_values
from .errors import NumericFaultError, ValidationError
from .schedule import NoiseSchedule

VAR_FLOOR = 1e-5

CHECKPOINT_MAGIC = b"MDNET\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Shape configuration; parameter shapes are a pure function of this."""

    levels: int  # R
    vocab: int  # n
    width: int = 64  # C
    blocks: int = 4  # B
    heads: int = 4
    sem_channels: int = 4
    style_channels: int = 2
    emo_channels: int = 2
    window: int = 4  # U
    time_dim: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValidationError(f"width {self.width} not divisible by heads {self.heads}")
        if self.time_dim % 2 != 0:
            raise ValidationError("time_dim must be even")
        for name in ("levels", "vocab", "width", "blocks", "heads", "window"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")


def _dual_ada_ln_t(h, gamma_ch, beta_ch, gamma_te, window: int):
    if h.shape[-2] != gamma_te.shape[-1] * window:
        raise ValidationError(
            f"{h.shape[-2]} frames incompatible with {gamma_te.shape[-1]} windows of size {window}"
        )
    mu = h.mean(dim=-1, keepdim=True)
    var = ((h - mu) ** 2).mean(dim=-1, keepdim=True)
    normed = (h - mu) / torch.sqrt(torch.clamp(var, min=VAR_FLOOR))
    out = (1.0 + gamma_ch).unsqueeze(-2) * normed + beta_ch.unsqueeze(-2)
    upsampled = torch.repeat_interleave(gamma_te, window, dim=-1)
    return upsampled.unsqueeze(-1) * out


def dual_ada_ln(h, gamma_ch, beta_ch, gamma_te, window: int):
    """Normalise each frame across channels, modulate by (1+gamma_ch, beta_ch),
    then scale frame-wise by gamma_te up-sampled window-wise by ``window``.

    The channel statistics use the population standard deviation with a
    variance floor max(var, 1e-5). Accepts numpy arrays (returned as numpy)
    or torch tensors (kept in the autograd graph).
    """
    if torch.is_tensor(h):
        return _dual_ada_ln_t(h, gamma_ch, beta_ch, gamma_te, window)
    out = _dual_ada_ln_t(
        torch.as_tensor(np.asarray(h, dtype=np.float64)),
        torch.as_tensor(np.asarray(gamma_ch, dtype=np.float64)),
        torch.as_tensor(np.asarray(beta_ch, dtype=np.float64)),
        torch.as_tensor(np.asarray(gamma_te, dtype=np.float64)),
        window,
    )
    return out.numpy()


class SelfAttention(nn.Module):
    """Full bidirectional multi-head self-attention, explicit and float64-safe."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x):
        b, length, width = x.shape
        qkv = self.qkv(x).reshape(b, length, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (b, heads, length, head_dim)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, length, width)
        return self.proj(y)


def _zero_last(module: nn.Sequential) -> nn.Sequential:
    nn.init.zeros_(module[-1].weight)
    nn.init.zeros_(module[-1].bias)
    return module


class DualAdaBlock(nn.Module):
    """Transformer block whose two sub-layers are gated and modulated by the
    channel (global style + time) and temporal (window style + time) paths."""

    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.attn = SelfAttention(width, heads)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(),
            nn.Linear(mlp_ratio * width, width),
        )
        self.ch_mod = _zero_last(nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width)))
        self.te_mod = _zero_last(nn.Sequential(nn.SiLU(), nn.Linear(width, 2)))

    def forward(self, h, cvec, uvec, window: int, bypass_attention: bool = False):
        a1, g1, b1, a2, g2, b2 = self.ch_mod(cvec).chunk(6, dim=-1)
        te = self.te_mod(uvec)
        gte1 = 1.0 + te[..., 0]
        gte2 = 1.0 + te[..., 1]
        if not bypass_attention:
            h = h + a1.unsqueeze(-2) * self.attn(_dual_ada_ln_t(h, g1, b1, gte1, window))
        h = h + a2.unsqueeze(-2) * self.mlp(_dual_ada_ln_t(h, g2, b2, gte2, window))
        return h


class OutputHead(nn.Module):
    """Per-level head: modulated normalisation followed by a linear to n logits."""

    def __init__(self, width: int, vocab: int):
        super().__init__()
        self.ch_mod = _zero_last(nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width)))
        self.te_mod = _zero_last(nn.Sequential(nn.SiLU(), nn.Linear(width, 1)))
        self.linear = nn.Linear(width, vocab)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, h, cvec, uvec, window: int):
        g, b = self.ch_mod(cvec).chunk(2, dim=-1)
        gte = 1.0 + self.te_mod(uvec)[..., 0]
        return self.linear(_dual_ada_ln_t(h, g, b, gte, window))


class ScoreNetwork(nn.Module):
    """Maps (masked grid, conditions, time) to per-level positive score fields."""

    def __init__(self, config: ModelConfig, sched: Optional[NoiseSchedule] = None, seed: Optional[int] = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.config = config
        self.sched = sched if sched is not None else NoiseSchedule()
        c = config.width
        self.token_emb = nn.ModuleList(
            [nn.Embedding(config.vocab + 1, c) for _ in range(config.levels)]
        )
        self.sem_proj = nn.Linear(config.sem_channels, c)
        self.fuse = nn.Linear(2 * c, c)
        self.time_mlp = nn.Sequential(nn.Linear(config.time_dim, c), nn.SiLU(), nn.Linear(c, c))
        self.global_mlp = nn.Sequential(nn.Linear(config.style_channels, c), nn.SiLU(), nn.Linear(c, c))
        self.temporal_mlp = nn.Sequential(nn.Linear(config.emo_channels, c), nn.SiLU(), nn.Linear(c, c))
        self.null_semantic = nn.Parameter(torch.zeros(config.sem_channels))
        self.null_global = nn.Parameter(torch.zeros(config.style_channels))
        self.null_temporal = nn.Parameter(torch.zeros(config.emo_channels))
        self.blocks = nn.ModuleList(
            [DualAdaBlock(c, config.heads, config.mlp_ratio) for _ in range(config.blocks)]
        )
        self.level_heads = nn.ModuleList(
            [OutputHead(c, config.vocab) for _ in range(config.levels)]
        )
        half = config.time_dim // 2
        freqs = torch.exp(torch.linspace(0.0, -math.log(100.0), half, dtype=torch.float64))
        self.register_buffer("time_freqs", freqs, persistent=False)
        self.double()
        self._pos_cache: dict = {}

    def time_features(self, t):
        eps = self.sched.eps
        sbar = -torch.log1p(-(1.0 - eps) * t)
        ang = sbar[:, None] * self.time_freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)

    def _positions(self, length: int):
        pe = self._pos_cache.get(length)
        if pe is None:
            c = self.config.width
            pos = torch.arange(length, dtype=torch.float64)[:, None]
            div = torch.exp(
                torch.arange(0, c, 2, dtype=torch.float64) * (-math.log(10000.0) / c)
            )
            pe = torch.zeros(length, c, dtype=torch.float64)
            pe[:, 0::2] = torch.sin(pos * div)
            pe[:, 1::2] = torch.cos(pos * div)
            self._pos_cache[length] = pe
        return pe

    def logits(
        self,
        tokens,
        t,
        semantic=None,
        global_style=None,
        temporal_style=None,
        bypass_attention: bool = False,
        check_finite: bool = True,
    ):
        """Per-level logits (batch, L, R_active, n); scores are exp(logits).

        ``tokens`` is (batch, L, R_active) with R_active <= levels; grids
        truncated to coarse levels only touch the corresponding embeddings
        and heads. None conditions fall back to the learned null embeddings.
        """
        cfg = self.config
        b, length, r_active = tokens.shape
        if r_active > cfg.levels:
            raise ValidationError(f"grid has {r_active} levels, model supports {cfg.levels}")
        if length % cfg.window != 0:
            raise ValidationError(f"length {length} not divisible by window {cfg.window}")
        n_windows = length // cfg.window

        emb = self.token_emb[0](tokens[:, :, 0])
        for r in range(1, r_active):
            emb = emb + self.token_emb[r](tokens[:, :, r])

        if semantic is None:
            semantic = self.null_semantic.expand(b, length, -1)
        if global_style is None:
            global_style = self.null_global.expand(b, -1)
        if temporal_style is None:
            temporal_style = self.null_temporal.expand(b, n_windows, -1)

        h = self.fuse(torch.cat([emb, self.sem_proj(semantic)], dim=-1))
        h = h + self._positions(length)

        tvec = self.time_mlp(self.time_features(t))
        cvec = tvec + self.global_mlp(global_style)
        uvec = self.temporal_mlp(temporal_style) + tvec.unsqueeze(1)

        for i, block in enumerate(self.blocks):
            h = block(h, cvec, uvec, cfg.window, bypass_attention=bypass_attention)
            if check_finite and not torch.isfinite(h).all():
                raise NumericFaultError(f"non-finite activations in block {i}", block_index=i)
        out = torch.stack(
            [self.level_heads[r](h, cvec, uvec, cfg.window) for r in range(r_active)], dim=2
        )
        if check_finite and not torch.isfinite(out).all():
            raise NumericFaultError(
                "non-finite activations in output heads", block_index=cfg.blocks
            )
        return out

    def condition_tensors(self, cond: Optional[ConditionBundle], batch: int, length: int):
        """Expand a single bundle to batch tensors; None slots stay None."""
        cfg = self.config
        if cond is None:
            return None, None, None
        cond.validate_for(length, cfg.window)
        sem = glob = temp = None
        if cond.semantic is not None:
            if cond.semantic.shape[1] != cfg.sem_channels:
                raise ValidationError("semantic channel size mismatch")
            sem = torch.as_tensor(cond.semantic).expand(batch, -1, -1)
        if cond.global_style is not None:
            if cond.global_style.shape[0] != cfg.style_channels:
                raise ValidationError("global style channel size mismatch")
            glob = torch.as_tensor(cond.global_style).expand(batch, -1)
        if cond.temporal_style is not None:
            if cond.temporal_style.shape[1] != cfg.emo_channels:
                raise ValidationError("temporal style channel size mismatch")
            temp = torch.as_tensor(cond.temporal_style).expand(batch, -1, -1)
        return sem, glob, temp


def embed_masked_grid(xt: TokenGrid, net: ScoreNetwork) -> np.ndarray:
    """Per-frame token embedding: row i is the sum of the level tables at xt[i, :]."""
    tokens = torch.as_tensor(xt.tokens)[None]
    with torch.no_grad():
        emb = net.token_emb[0](tokens[:, :, 0])
        for r in range(1, xt.R):
            emb = emb + net.token_emb[r](tokens[:, :, r])
    return emb[0].numpy()


def score_forward(
    net: ScoreNetwork,
    xt: TokenGrid,
    cond: Optional[ConditionBundle],
    t: float,
    bypass_attention: bool = False,
) -> ScoreField:
    """Evaluate the network on one grid; returns exp(logits) as a ScoreField."""
    sem, glob, temp = net.condition_tensors(cond, 1, xt.L)
    tokens = torch.as_tensor(xt.tokens)[None]
    tt = torch.full((1,), float(t), dtype=torch.float64)
    with torch.no_grad():
        logits = net.logits(tokens, tt, sem, glob, temp, bypass_attention=bypass_attention)
    return ScoreField(torch.exp(logits)[0].numpy(), xt.masked())


def gradient(net: ScoreNetwork, batch, loss_fn) -> dict:
    """Analytic parameter gradients of ``loss_fn(net, batch)`` via reverse mode.

    Parameters disconnected from the loss get exact zeros.
    """
    net.zero_grad(set_to_none=True)
    loss = loss_fn(net, batch)
    if not torch.isfinite(loss):
        raise NumericFaultError("non-finite loss in gradient computation")
    loss.backward()
    grads = {}
    for name, p in net.named_parameters():
        if p.grad is None:
            grads[name] = np.zeros(tuple(p.shape), dtype=np.float64)
        else:
            if not torch.isfinite(p.grad).all():
                raise NumericFaultError(f"non-finite gradient for {name}")
            grads[name] = p.grad.detach().clone().numpy()
    return grads


def check_gradients(
    net: ScoreNetwork,
    batch,
    loss_fn,
    n_coords: int = 200,
    step: float = 1e-4,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Probe random parameter coordinates with central finite differences.

    Returns a report dict with the number of coordinates checked, failures,
    and the worst relative error. ``loss_fn`` must be deterministic.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    analytic = gradient(net, batch, loss_fn)
    params = dict(net.named_parameters())
    names = sorted(params)
    sizes = np.array([params[name].numel() for name in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    coords = rng.choice(total, size=min(n_coords, total), replace=False)

    failures = []
    max_rel = 0.0
    with torch.no_grad():
        for flat_idx in coords:
            which = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            name = names[which]
            local = int(flat_idx - offsets[which])
            p = params[name]
            flat = p.view(-1)
            orig = flat[local].item()
            flat[local] = orig + step
            plus = float(loss_fn(net, batch))
            flat[local] = orig - step
            minus = float(loss_fn(net, batch))
            flat[local] = orig
            fd = (plus - minus) / (2.0 * step)
            an = float(analytic[name].flat[local])
            err = abs(fd - an)
            scale = max(abs(fd), abs(an))
            rel = err / scale if scale > 0 else 0.0
            ok = err <= atol or rel <= rtol
            max_rel = max(max_rel, rel if scale > 0 else 0.0)
            if not ok:
                failures.append({"param": name, "index": local, "analytic": an, "fd": fd})
    return {
        "checked": len(coords),
        "failures": failures,
        "passed": not failures,
        "max_rel_err": max_rel,
    }


class NetworkScorer:
    """Adapter turning a ScoreNetwork into a sampler score function.

    With ``guidance`` None the network is evaluated once on the bundle as
    given. With a ``{slot: weight}`` dict, the unconditional field and one
    single-slot conditional field per weighted slot are combined in log
    space; clamp events accumulate in ``clamp_events``.
    """

    SLOTS = ("semantic", "global_style", "temporal_style")

    def __init__(self, net: ScoreNetwork, guidance: Optional[dict] = None):
        if guidance:
            unknown = set(guidance) - set(self.SLOTS)
            if unknown:
                raise ValidationError(f"unknown guidance slots: {sorted(unknown)}")
        self.net = net
        self.guidance = dict(guidance) if guidance else None
        self.clamp_events = 0

    def __call__(self, xt: TokenGrid, cond: Optional[ConditionBundle], t: float) -> ScoreField:
        values = self.scores_batch(xt.tokens[None], cond, t)[0]
        return ScoreField(values, xt.masked())

    def _field_values(self, tokens_t, tt, cond: Optional[ConditionBundle]) -> np.ndarray:
        sem, glob, temp = self.net.condition_tensors(cond, tokens_t.shape[0], tokens_t.shape[1])
        with torch.no_grad():
            logits = self.net.logits(tokens_t, tt, sem, glob, temp)
        return torch.exp(logits).numpy()

    def scores_batch(self, tokens: np.ndarray, cond: Optional[ConditionBundle], t: float) -> np.ndarray:
        tokens_t = torch.as_tensor(tokens)
        tt = torch.full((tokens.shape[0],), float(t), dtype=torch.float64)
        if not self.guidance or cond is None:
            return self._field_values(tokens_t, tt, cond)
        weighted = []
        for slot, weight in self.guidance.items():
            if getattr(cond, slot) is None:
                continue
            solo = ConditionBundle(**{slot: getattr(cond, slot)})
            weighted.append((self._field_values(tokens_t, tt, solo), float(weight)))
        uncond = self._field_values(tokens_t, tt, None)
        values, clamps = combine_log_values(uncond, weighted)
        self.clamp_events += clamps
        return values
