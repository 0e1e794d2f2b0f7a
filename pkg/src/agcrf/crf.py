"""Attention-gated CRF over latent multi-scale features.

A set of scales holds observed features f_s and latent means h_s that all
share one spatial grid. Inference alternates gate estimation with latent
mean updates:

    message    m_(e->r) = L_(e->r) (*) h_e
    gate       alpha_(e->r) = sigma(sign * (h_r . m_(e->r)
                                 + l_em (*) x_e + l_rc (*) x_r))
    update     h_r <- f_r + (1/a_r) sum_e alpha_(e->r) . m_(e->r)

where (*) is a padded 3x3 convolution and x is the latent mean in the
fully-latent variant ("flag") or the observed features in the
partially-latent one ("plag"). In network mode the 1/a_r division is
replaced by a learned 1x1 convolution on the gated message sum, and the
gate map carries one channel per receiver feature channel instead of a
single channel.

Receivers are updated in ascending scale order within a sweep, each seeing
the latest values of the others, which is the usual coordinate-ascent
schedule. The message tied to the linear kernels is dropped from the
update by default; the linear kernels still drive the gates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tt
from .tensor import Tensor, concat_channels, conv2d

__all__ = [
    "KSIZE",
    "AgcrfConfig",
    "ScaleSet",
    "GateMap",
    "KernelBank",
    "CondKernelHeads",
    "AgcrfParams",
    "InferenceDiverged",
    "ordered_pairs",
    "predict_kernels",
    "message",
    "attention",
    "mean_field_step",
    "infer",
    "energy",
    "init_shared_bank",
    "init_cond_heads",
]

KSIZE = 3  # pairwise kernels are 3x3, stride 1, pad 1
_PAD = KSIZE // 2
_ALPHA_LO = np.nextafter(0.0, 1.0)
_ALPHA_HI = np.nextafter(1.0, 0.0)
DIVERGENCE_LIMIT = 1e12


class InferenceDiverged(RuntimeError):
    pass


@dataclass
class AgcrfConfig:
    """Variant switches for one fusion module.

    attention_sign selects sigma(+M) (the network convention, default) or
    sigma(-M); both are exposed because the two readings coexist. T is the
    number of gate/update alternations.
    """

    variant: str = "flag"  # flag | plag
    conditional_kernels: bool = False
    iterations: int = 1
    attention_sign: float = 1.0
    include_linear_message: bool = False
    attention_mode: str = "per-channel"  # per-channel | scalar
    update: str = "network"  # network | exact
    damping: float = 1.0
    force_attention_one: bool = False  # plain-CRF ablation: gates pinned to 1

    def __post_init__(self):
        if self.variant not in ("flag", "plag"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.attention_sign not in (1.0, -1.0, 1, -1):
            raise ValueError("attention_sign must be +1 or -1")
        if self.attention_mode not in ("per-channel", "scalar"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        if self.update not in ("network", "exact"):
            raise ValueError(f"unknown update mode {self.update!r}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must be in (0, 1]")


@dataclass
class ScaleSet:
    """Observed features, latent means and (exact mode) unary weights."""

    f: list  # per scale Tensor (C_s, H, W) or (B, C_s, H, W)
    h: list
    a: list | None = None  # per scale (1, H, W), strictly positive

    def __post_init__(self):
        grids = {t.data.shape[-2:] for t in self.f + self.h}
        if len(grids) != 1:
            raise ValueError(f"scales disagree on the spatial grid: {sorted(grids)}")
        if self.a is not None:
            for s, a_s in enumerate(self.a):
                if np.any(a_s.data <= 0):
                    raise ValueError(f"unary weight a[{s}] must be strictly positive")

    @property
    def num_scales(self):
        return len(self.f)

    def channels(self, s):
        return self.f[s].data.shape[-3]


@dataclass
class GateMap:
    """Expected gate openings per ordered (emitter, receiver) pair."""

    alpha: dict  # (e, r) -> Tensor, 1 or C_r channels
    mode: str  # scalar | per-channel


@dataclass
class KernelBank:
    """Pairwise and linear kernels per ordered (emitter, receiver) pair.

    L[(e,r)]:    (C_r, C_e, 3, 3) message kernel
    l_em[(e,r)]: (C_att, C_e, 3, 3), applied to emitter-side features
    l_rc[(e,r)]: (C_att, C_r, 3, 3), applied to receiver-side features
    """

    L: dict
    l_em: dict = field(default_factory=dict)
    l_rc: dict = field(default_factory=dict)
    mode: str = "shared"  # shared | conditional

    def __post_init__(self):
        for name, table in (("L", self.L), ("l_em", self.l_em), ("l_rc", self.l_rc)):
            for pair, kern in table.items():
                if kern.data.shape[-2:] != (KSIZE, KSIZE):
                    raise ValueError(f"{name}{pair} must be {KSIZE}x{KSIZE}, got {kern.data.shape}")


@dataclass
class CondKernelHeads:
    """Linear predictors mapping features to kernel entries.

    Each W_* is a 1x1 convolution over channels whose output map is
    averaged over the grid and reshaped into a kernel; each b_* is the
    kernel-shaped bias. With all W_* zero the predicted bank equals the
    biases exactly.
    """

    W_L: dict  # (e, r) -> (C_r*C_e*9, C_e + C_r, 1, 1)
    b_L: dict  # (e, r) -> (C_r, C_e, 3, 3)
    W_lem: dict
    b_lem: dict
    W_lrc: dict
    b_lrc: dict


@dataclass
class AgcrfParams:
    """Everything trainable in one fusion module."""

    bank: KernelBank | None = None
    heads: CondKernelHeads | None = None
    a_conv: dict | None = None  # network mode: scale -> (C_s, C_s, 1, 1)


def ordered_pairs(num_scales):
    return [(e, r) for r in range(num_scales) for e in range(num_scales) if e != r]


def _att_channels(cfg, c_r):
    return 1 if cfg.attention_mode == "scalar" else c_r


def predict_kernels(heads, scales, cfg):
    """Predict the kernel bank from the current latent means.

    The 1x1 heads act per pixel on concat(h_e, h_r) (or the single-side
    map for the linear kernels); the per-pixel predictions are averaged
    over the grid so every pair still carries one shared 3x3 kernel.
    """
    bank_l, bank_em, bank_rc = {}, {}, {}
    for e, r in ordered_pairs(scales.num_scales):
        c_e, c_r = scales.channels(e), scales.channels(r)
        c_att = _att_channels(cfg, c_r)
        cat = concat_channels([scales.h[e], scales.h[r]])
        vec = tt.spatial_mean(conv2d(cat, heads.W_L[(e, r)]))
        if vec.data.ndim == 2:  # batched input: kernels are pooled over the batch too
            vec = tt.mean_axis0(vec)
        bank_l[(e, r)] = tt.reshape(vec, (c_r, c_e, KSIZE, KSIZE)) + heads.b_L[(e, r)]

        vem = tt.spatial_mean(conv2d(scales.h[e], heads.W_lem[(e, r)]))
        if vem.data.ndim == 2:
            vem = tt.mean_axis0(vem)
        bank_em[(e, r)] = tt.reshape(vem, (c_att, c_e, KSIZE, KSIZE)) + heads.b_lem[(e, r)]

        vrc = tt.spatial_mean(conv2d(scales.h[r], heads.W_lrc[(e, r)]))
        if vrc.data.ndim == 2:
            vrc = tt.mean_axis0(vrc)
        bank_rc[(e, r)] = tt.reshape(vrc, (c_att, c_r, KSIZE, KSIZE)) + heads.b_lrc[(e, r)]
    return KernelBank(L=bank_l, l_em=bank_em, l_rc=bank_rc, mode="conditional")


def message(e, r, bank, scales):
    """Quadratic-term message from scale e to scale r."""
    return conv2d(scales.h[e], bank.L[(e, r)], stride=1, pad=_PAD)


def attention(e, r, bank, scales, cfg, msg=None):
    """Expected gate map for the (e -> r) coupling, strictly inside (0, 1)."""
    if msg is None:
        msg = message(e, r, bank, scales)
    if cfg.variant == "plag":
        x_e, x_r = scales.f[e], scales.f[r]
    else:
        x_e, x_r = scales.h[e], scales.h[r]
    pre = scales.h[r] * msg
    if cfg.attention_mode == "scalar":
        pre = tt.channel_sum(pre)
    pre = pre + conv2d(x_e, bank.l_em[(e, r)], pad=_PAD) + conv2d(x_r, bank.l_rc[(e, r)], pad=_PAD)
    if cfg.attention_sign < 0:
        pre = -pre
    return tt.clip(tt.sigmoid(pre), _ALPHA_LO, _ALPHA_HI)


def _linear_message(e, r, bank, scales):
    """Stencil sums of the receiver-side linear kernel (boundary aware)."""
    kern = bank.l_rc[(e, r)]
    if kern.data.shape[0] != 1:
        raise ValueError("the linear message is defined for scalar attention kernels only")
    h, w = scales.f[r].data.shape[-2:]
    ones = Tensor(np.ones((1, h, w)))
    swapped = tt.reshape(kern, (kern.data.shape[1], 1, KSIZE, KSIZE))
    return conv2d(ones, swapped, pad=_PAD)


def mean_field_step(scales, bank, gates, cfg, a_conv=None):
    """One ascending-order sweep of latent mean updates; returns a new ScaleSet."""
    new_h = list(scales.h)
    work = ScaleSet(scales.f, new_h, scales.a)
    for r in range(scales.num_scales):
        total = None
        for e in range(scales.num_scales):
            if e == r:
                continue
            msg = message(e, r, bank, work)
            if cfg.include_linear_message:
                msg = msg + _linear_message(e, r, bank, work)
            gated = gates.alpha[(e, r)] * msg
            total = gated if total is None else total + gated
        if total is None:
            updated = scales.f[r]
        elif cfg.update == "network":
            updated = scales.f[r] + conv2d(total, a_conv[r])
        else:
            if scales.a is None:
                raise ValueError("exact update mode needs the per-scale unary weights a")
            updated = scales.f[r] + total / scales.a[r]
        if cfg.damping < 1.0:
            updated = tt.scale(work.h[r], 1.0 - cfg.damping) + tt.scale(updated, cfg.damping)
        if np.abs(updated.data).max() > DIVERGENCE_LIMIT:
            raise InferenceDiverged(
                "latent mean magnitude exceeded 1e12; the update iteration contracts only "
                "when the gated coupling operator has spectral radius < 1 (shrink the "
                "pairwise kernels or enable damping)"
            )
        new_h[r] = updated
        work = ScaleSet(scales.f, new_h, scales.a)
    return work


def _fixed_gates(scales, cfg):
    ones = {}
    for e, r in ordered_pairs(scales.num_scales):
        c = _att_channels(cfg, scales.channels(r))
        h, w = scales.f[r].data.shape[-2:]
        ones[(e, r)] = Tensor(np.ones((c, h, w)))
    return GateMap(alpha=ones, mode=cfg.attention_mode)


def infer(scales, params, cfg):
    """Run T alternations of gate estimation and mean updates.

    Latent means start at the observed features. Returns the refined
    ScaleSet and the last gate map; all operations are recorded on the
    active tape, so losses on the output differentiate end to end.
    """
    work = ScaleSet(scales.f, list(scales.f), scales.a)
    gates = None
    for _ in range(cfg.iterations):
        if cfg.conditional_kernels:
            if params.heads is None:
                raise ValueError("conditional_kernels is set but no heads were given")
            bank = predict_kernels(params.heads, work, cfg)
        else:
            bank = params.bank
        if cfg.force_attention_one:
            gates = _fixed_gates(work, cfg)
        else:
            gates = GateMap(
                alpha={(e, r): attention(e, r, bank, work, cfg) for e, r in ordered_pairs(work.num_scales)},
                mode=cfg.attention_mode,
            )
        work = mean_field_step(work, bank, gates, cfg, a_conv=params.a_conv)
    return work, gates


def run_fixed_gate_iteration(scales, bank, gates, cfg, max_steps=200, tol=1e-12):
    """Iterate mean_field_step with frozen gates until the sweep stalls."""
    work = ScaleSet(scales.f, list(scales.f), scales.a)
    for _ in range(max_steps):
        nxt = mean_field_step(work, bank, gates, cfg)
        delta = max(np.abs(n.data - o.data).max() for n, o in zip(nxt.h, work.h))
        work = nxt
        if delta < tol:
            break
    return work


def energy(scales, gates, bank):
    """Gated energy of a joint (latent, gate) assignment, scalar kernels only.

    E = -sum_s sum_i (a/2)||h - f||^2 + sum_(e,r) sum_i g * [h_r . (L (*) h_e)
        + l_em (*) h_e + l_rc (*) h_r](i). The constant corner of the
    augmented kernel block is dropped (no gate-side unary), so zero kernels
    give exactly the unary energy.
    """
    if scales.a is None:
        raise ValueError("energy needs the per-scale unary weights a")
    total = 0.0
    for s in range(scales.num_scales):
        d = scales.h[s].data - scales.f[s].data
        total -= 0.5 * float((scales.a[s].data * d * d).sum())
    for (e, r), kern in bank.L.items():
        quad = tt.channel_sum(scales.h[r] * conv2d(scales.h[e], kern, pad=_PAD)).data
        g = gates[(e, r)]
        term = quad
        if bank.l_em:
            term = term + conv2d(scales.h[e], bank.l_em[(e, r)], pad=_PAD).data
        if bank.l_rc:
            term = term + conv2d(scales.h[r], bank.l_rc[(e, r)], pad=_PAD).data
        total += float((g * term[0]).sum())
    return total


# -- initializers ------------------------------------------------------------


def _uniform(rng, shape, fan_in):
    r = 1.0 / np.sqrt(fan_in)
    return tt.parameter(rng.uniform(-r, r, size=shape))


def init_shared_bank(channels, cfg, rng):
    """Shared-parameter kernel bank for the given per-scale channel counts."""
    bank_l, bank_em, bank_rc = {}, {}, {}
    for e, r in ordered_pairs(len(channels)):
        c_e, c_r = channels[e], channels[r]
        c_att = _att_channels(cfg, c_r)
        bank_l[(e, r)] = _uniform(rng, (c_r, c_e, KSIZE, KSIZE), c_e * KSIZE * KSIZE)
        bank_em[(e, r)] = _uniform(rng, (c_att, c_e, KSIZE, KSIZE), c_e * KSIZE * KSIZE)
        bank_rc[(e, r)] = _uniform(rng, (c_att, c_r, KSIZE, KSIZE), c_r * KSIZE * KSIZE)
    return KernelBank(L=bank_l, l_em=bank_em, l_rc=bank_rc, mode="shared")


def init_cond_heads(channels, cfg, rng):
    """Conditional-kernel heads; biases start at a shared-bank init."""
    seed_bank = init_shared_bank(channels, cfg, rng)
    w_l, b_l, w_em, b_em, w_rc, b_rc = {}, {}, {}, {}, {}, {}
    for e, r in ordered_pairs(len(channels)):
        c_e, c_r = channels[e], channels[r]
        c_att = _att_channels(cfg, c_r)
        w_l[(e, r)] = _uniform(rng, (c_r * c_e * KSIZE * KSIZE, c_e + c_r, 1, 1), c_e + c_r)
        b_l[(e, r)] = seed_bank.L[(e, r)]
        w_em[(e, r)] = _uniform(rng, (c_att * c_e * KSIZE * KSIZE, c_e, 1, 1), c_e)
        b_em[(e, r)] = seed_bank.l_em[(e, r)]
        w_rc[(e, r)] = _uniform(rng, (c_att * c_r * KSIZE * KSIZE, c_r, 1, 1), c_r)
        b_rc[(e, r)] = seed_bank.l_rc[(e, r)]
    return CondKernelHeads(W_L=w_l, b_L=b_l, W_lem=w_em, b_lem=b_em, W_lrc=w_rc, b_lrc=b_rc)


def init_a_conv(channels, rng):
    return {s: _uniform(rng, (c, c, 1, 1), c) for s, c in enumerate(channels)}


def clone_config(cfg, **overrides):
    return replace(cfg, **overrides)
