"""Two-level multi-scale prediction network around the gated-CRF fusion.

A small trainable front-end CNN produces one tap per block. Each tap is
decomposed three ways (deconvolution up, convolution same-size, max-pool
down) and re-aligned, giving an in-layer scale triplet that level-1 fusion
refines. The refined layer outputs, aligned to the largest resolution, are
fused again at level 2. One 1x1-conv prediction head hangs off every
level-1 output plus the level-2 output (deep supervision, L+1 heads), and
the final prediction is the plain arithmetic mean of the head outputs.

Presets reproduce the ablation family: ``baseline`` concatenates raw taps
straight into a single head, ``no_agcrf`` keeps the hierarchy but fuses by
concat+conv, ``crf`` pins all gates to 1, ``plag``/``flag`` select the
gate-feature source, ``flag_ck`` adds conditional kernels, and
``no_deep_sup`` trains on the final head only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tt
from .agtio import load_checkpoint, save_checkpoint
from .crf import AgcrfConfig, AgcrfParams, CondKernelHeads, KernelBank, ScaleSet, infer, ordered_pairs
from .losses import softmax_probs
from .synth import SynthRng
from .tensor import Tensor, concat_channels, conv2d, deconv2d, maxpool2d, relu

__all__ = ["HierarchySpec", "FusionNet", "PRESETS", "preset_spec", "ForwardResult"]

PRESETS = ("baseline", "no_agcrf", "crf", "no_deep_sup", "plag", "flag", "flag_ck")

_TASK_OUT = {"contour": 1, "depth": 1, "seg": None}  # None: num_classes


@dataclass
class HierarchySpec:
    """Architecture and variant switches for one network."""

    task: str = "contour"
    preset: str = "flag"
    height: int = 32
    width: int = 32
    in_channels: int = 3
    blocks: tuple = ((16, 3), (32, 3), (64, 3))  # (channels, kernel) per front-end block
    stem_pool: int = 0  # extra 2x pools before the first block
    dcm_channels: int = 8
    num_classes: int = 4
    level1: AgcrfConfig = field(default_factory=AgcrfConfig)
    level2: AgcrfConfig = field(default_factory=AgcrfConfig)

    def __post_init__(self):
        if self.task not in ("contour", "depth", "seg"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        h = self.height >> self.stem_pool
        for i in range(len(self.blocks)):
            h //= 2
            if h < 2 or h % 2 != 0 and i + 1 < len(self.blocks):
                raise ValueError("input too small for this block stack")

    @property
    def out_channels(self):
        return self.num_classes if self.task == "seg" else 1

    @property
    def num_layers(self):
        return len(self.blocks)

    @property
    def fusion(self):
        if self.preset == "baseline":
            return "baseline"
        if self.preset == "no_agcrf":
            return "concat"
        return "agcrf"

    @property
    def deep_supervision(self):
        return self.preset != "no_deep_sup" and self.fusion != "baseline"

    def tap_sizes(self):
        """(channels, height) of every front-end tap."""
        h = self.height >> self.stem_pool
        out = []
        for channels, _ in self.blocks:
            h //= 2
            out.append((channels, h))
        return out


def preset_spec(preset, task="contour", **overrides):
    """HierarchySpec for one ablation row; presets differ only in the
    fusion/variant dimension."""
    variant = "plag" if preset == "plag" else "flag"
    level1 = AgcrfConfig(
        variant=variant,
        conditional_kernels=preset == "flag_ck",
        force_attention_one=preset == "crf",
    )
    return HierarchySpec(
        task=task,
        preset=preset,
        level1=level1,
        level2=replace(level1),
        **overrides,
    )


@dataclass
class ForwardResult:
    raw: list  # per-head pre-activation maps at input resolution
    act: list  # per-head task-activated maps (numpy for seg/depth reuse raw)
    average: np.ndarray  # arithmetic mean of the activated maps


class FusionNet:
    """Parameter container plus forward pass for one HierarchySpec."""

    def __init__(self, spec):
        self.spec = spec
        self.params = {}
        self._crf1 = []
        self._crf2 = None

    # -- construction -------------------------------------------------------

    def _mk(self, rng, name, shape, fan_in):
        r = 1.0 / np.sqrt(fan_in)
        t = tt.parameter(rng.uniform(-r, r, size=shape), name=name)
        self.params[name] = t
        return t

    def _mk_zero(self, name, shape):
        t = tt.parameter(np.zeros(shape), name=name)
        self.params[name] = t
        return t

    def _build_crf(self, rng, prefix, channels, cfg):
        k = 3
        pairs = ordered_pairs(len(channels))
        if cfg.conditional_kernels:
            w_l, b_l, w_em, b_em, w_rc, b_rc = {}, {}, {}, {}, {}, {}
            for e, r in pairs:
                c_e, c_r = channels[e], channels[r]
                c_att = 1 if cfg.attention_mode == "scalar" else c_r
                w_l[(e, r)] = self._mk(rng, f"{prefix}.WL.{e}.{r}", (c_r * c_e * k * k, c_e + c_r, 1, 1), c_e + c_r)
                b_l[(e, r)] = self._mk(rng, f"{prefix}.bL.{e}.{r}", (c_r, c_e, k, k), c_e * k * k)
                w_em[(e, r)] = self._mk(rng, f"{prefix}.Wlem.{e}.{r}", (c_att * c_e * k * k, c_e, 1, 1), c_e)
                b_em[(e, r)] = self._mk(rng, f"{prefix}.blem.{e}.{r}", (c_att, c_e, k, k), c_e * k * k)
                w_rc[(e, r)] = self._mk(rng, f"{prefix}.Wlrc.{e}.{r}", (c_att * c_r * k * k, c_r, 1, 1), c_r)
                b_rc[(e, r)] = self._mk(rng, f"{prefix}.blrc.{e}.{r}", (c_att, c_r, k, k), c_r * k * k)
            heads = CondKernelHeads(W_L=w_l, b_L=b_l, W_lem=w_em, b_lem=b_em, W_lrc=w_rc, b_lrc=b_rc)
            bank = None
        else:
            bank_l, bank_em, bank_rc = {}, {}, {}
            for e, r in pairs:
                c_e, c_r = channels[e], channels[r]
                c_att = 1 if cfg.attention_mode == "scalar" else c_r
                bank_l[(e, r)] = self._mk(rng, f"{prefix}.L.{e}.{r}", (c_r, c_e, k, k), c_e * k * k)
                if not cfg.force_attention_one:
                    bank_em[(e, r)] = self._mk(rng, f"{prefix}.lem.{e}.{r}", (c_att, c_e, k, k), c_e * k * k)
                    bank_rc[(e, r)] = self._mk(rng, f"{prefix}.lrc.{e}.{r}", (c_att, c_r, k, k), c_r * k * k)
            bank = KernelBank(L=bank_l, l_em=bank_em, l_rc=bank_rc, mode="shared")
            heads = None
        a_conv = {
            s: self._mk(rng, f"{prefix}.a.{s}", (c, c, 1, 1), c) for s, c in enumerate(channels)
        }
        return AgcrfParams(bank=bank, heads=heads, a_conv=a_conv)

    def build(self, seed=0):
        """Create all parameters (uniform [-1/sqrt(fan_in), +] from the seed)."""
        spec = self.spec
        self.params = {}
        rng = SynthRng(seed)
        c_in = spec.in_channels
        for i, (c_out, k) in enumerate(spec.blocks):
            self._mk(rng, f"fe.{i}.w", (c_out, c_in, k, k), c_in * k * k)
            self._mk_zero(f"fe.{i}.b", (c_out, 1, 1))
            c_in = c_out

        taps = spec.tap_sizes()
        dcm = spec.dcm_channels
        out_ch = spec.out_channels

        if spec.fusion == "baseline":
            for l, (c_l, _) in enumerate(taps):
                factor = 2**l
                if factor == 1:
                    self._mk(rng, f"base.{l}.w", (dcm, c_l, 1, 1), c_l)
                else:
                    self._mk(rng, f"base.{l}.w", (c_l, dcm, factor, factor), c_l * factor * factor)
            self._mk(rng, "headF.w", (out_ch, dcm * len(taps), 1, 1), dcm * len(taps))
            self._mk_zero("headF.b", (out_ch, 1, 1))
            up = (spec.height >> spec.stem_pool) // (taps[0][1])
            if up > 1:
                self._mk(rng, "headF.up", (out_ch, out_ch, up * 2**spec.stem_pool, up * 2**spec.stem_pool), out_ch)
            elif spec.stem_pool:
                self._mk(rng, "headF.up", (out_ch, out_ch, 2**spec.stem_pool, 2**spec.stem_pool), out_ch)
            return self

        self._crf1 = []
        for l, (c_l, _) in enumerate(taps):
            self._mk(rng, f"dcm.{l}.d.w", (c_l, dcm, 4, 4), c_l * 16)
            self._mk_zero(f"dcm.{l}.d.b", (dcm, 1, 1))
            self._mk(rng, f"dcm.{l}.c.w", (dcm, c_l, 3, 3), c_l * 9)
            self._mk_zero(f"dcm.{l}.c.b", (dcm, 1, 1))
            self._mk(rng, f"dcm.{l}.cup.w", (dcm, dcm, 2, 2), dcm * 4)
            self._mk(rng, f"dcm.{l}.mup.w", (c_l, dcm, 4, 4), c_l * 16)
            self._mk_zero(f"dcm.{l}.m.b", (dcm, 1, 1))
            if spec.fusion == "agcrf":
                self._crf1.append(self._build_crf(rng, f"crf1.{l}", [dcm] * 3, spec.level1))
            self._mk(rng, f"fuse1.{l}.w", (dcm, dcm * 3, 3, 3), dcm * 27)
            self._mk_zero(f"fuse1.{l}.b", (dcm, 1, 1))

        n_layers = len(taps)
        for l in range(n_layers):
            self._mk(rng, f"head{l}.w", (out_ch, dcm, 1, 1), dcm)
            self._mk_zero(f"head{l}.b", (out_ch, 1, 1))
            factor = 2**l * 2**spec.stem_pool
            if factor > 1:
                self._mk(rng, f"head{l}.up", (out_ch, out_ch, factor, factor), out_ch)

        if n_layers > 1:
            for l in range(1, n_layers):
                factor = 2**l
                self._mk(rng, f"align2.{l}.w", (dcm, dcm, factor, factor), dcm * factor * factor)
            if spec.fusion == "agcrf":
                self._crf2 = self._build_crf(rng, "crf2", [dcm] * n_layers, spec.level2)
            self._mk(rng, "fuse2.w", (dcm, dcm * n_layers, 3, 3), dcm * 9 * n_layers)
            self._mk_zero("fuse2.b", (dcm, 1, 1))
            self._mk(rng, "headF.w", (out_ch, dcm, 1, 1), dcm)
            self._mk_zero("headF.b", (out_ch, 1, 1))
            if spec.stem_pool:
                f = 2**spec.stem_pool
                self._mk(rng, "headF.up", (out_ch, out_ch, f, f), out_ch)
        return self

    def num_parameters(self):
        return sum(t.data.size for t in self.params.values())

    # -- persistence ---------------------------------------------------------

    def save(self, dirpath):
        save_checkpoint(dirpath, {name: t.data for name, t in self.params.items()})

    def load(self, dirpath):
        stored = load_checkpoint(dirpath)
        missing = set(self.params) ^ set(stored)
        if missing:
            raise ValueError(f"checkpoint does not match architecture; differing keys: {sorted(missing)}")
        for name, arr in stored.items():
            if self.params[name].data.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {self.params[name].data.shape}")
            self.params[name].data = arr.copy()
        return self

    # -- forward -------------------------------------------------------------

    def _taps(self, image):
        x = image if isinstance(image, Tensor) else Tensor(image)
        for _ in range(self.spec.stem_pool):
            x, _ = maxpool2d(x, 2, 2)
        taps = []
        for i, (_, k) in enumerate(self.spec.blocks):
            x = relu(conv2d(x, self.params[f"fe.{i}.w"], pad=k // 2) + self.params[f"fe.{i}.b"])
            x, _ = maxpool2d(x, 2, 2)
            taps.append(x)
        return taps

    def decompose(self, tap, l):
        """Three-way transform of one tap, all aligned to twice its size."""
        p = self.params
        f_d = relu(deconv2d(tap, p[f"dcm.{l}.d.w"], stride=2, pad=1) + p[f"dcm.{l}.d.b"])
        f_c = relu(conv2d(tap, p[f"dcm.{l}.c.w"], pad=1) + p[f"dcm.{l}.c.b"])
        f_c = deconv2d(f_c, p[f"dcm.{l}.cup.w"], stride=2)
        pooled, _ = maxpool2d(tap, 2, 2)
        f_m = relu(deconv2d(pooled, p[f"dcm.{l}.mup.w"], stride=4) + p[f"dcm.{l}.m.b"])
        return f_d, f_c, f_m

    def _fuse(self, feats, crf_params, cfg, conv_name):
        if self.spec.fusion == "agcrf":
            scales = ScaleSet(f=list(feats), h=list(feats))
            refined, _ = infer(scales, crf_params, cfg)
            cat = concat_channels(refined.h)
        else:
            cat = concat_channels(list(feats))
        p = self.params
        return relu(conv2d(cat, p[f"{conv_name}.w"], pad=1) + p[f"{conv_name}.b"])

    def _head(self, feat, name):
        p = self.params
        raw = conv2d(feat, p[f"{name}.w"]) + p[f"{name}.b"]
        if f"{name}.up" in p:
            kern = p[f"{name}.up"]
            raw = deconv2d(raw, kern, stride=kern.data.shape[2])
        return raw

    def forward(self, image):
        spec = self.spec
        taps = self._taps(image)
        if spec.fusion == "baseline":
            aligned = []
            for l, tap in enumerate(taps):
                kern = self.params[f"base.{l}.w"]
                if l == 0:
                    aligned.append(conv2d(tap, kern))
                else:
                    aligned.append(deconv2d(tap, kern, stride=2**l))
            feats = concat_channels(aligned)
            raw = [self._head(feats, "headF")]
        else:
            outputs = []
            for l in range(spec.num_layers):
                feats = self.decompose(taps[l], l)
                crf = self._crf1[l] if spec.fusion == "agcrf" else None
                outputs.append(self._fuse(feats, crf, spec.level1, f"fuse1.{l}"))
            raw = [self._head(o, f"head{l}") for l, o in enumerate(outputs)]
            if spec.num_layers > 1:
                aligned = [outputs[0]]
                for l in range(1, spec.num_layers):
                    kern = self.params[f"align2.{l}.w"]
                    aligned.append(deconv2d(outputs[l], kern, stride=2**l))
                final = self._fuse(aligned, self._crf2, spec.level2, "fuse2")
                raw.append(self._head(final, "headF"))

        if spec.task == "contour":
            act = [tt.sigmoid(r) for r in raw]
            avg = np.mean([a.data for a in act], axis=0)
        elif spec.task == "seg":
            act = [softmax_probs(r.data) for r in raw]
            avg = np.mean(act, axis=0)
        else:
            act = raw
            avg = np.mean([r.data for r in raw], axis=0)
        return ForwardResult(raw=raw, act=act, average=avg)
