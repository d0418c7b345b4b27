"""Generator (encoder + progressive warping modules + synthesis) and multi-scale patch discriminator."""

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from . import tensor_core as tc
from .guidance import (COMBINED, GEOM_DISP, GUIDANCE_KINDS, NEURAL_CODES, NMFC, NeuralCodes,
                       displacement_attributes, render_attributes)
from .rasterizer import interpolate

ARCHITECTURES = ("pwm", "single-scale")


class ConfigurationError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    resolution: int = 64
    pyramid_levels: int = 5
    base_channels: int = 32
    max_channels: int = 256
    spade_hidden: int = 64
    guidance_kind: str = NEURAL_CODES
    code_dim: int = 16
    architecture: str = "pwm"

    def validate(self):
        if self.pyramid_levels < 2:
            raise ConfigurationError("pyramid_levels must be >= 2")
        if self.resolution % (2 ** (self.pyramid_levels - 1)):
            raise ConfigurationError(
                f"resolution {self.resolution} is not divisible by 2^(L-1) = {2 ** (self.pyramid_levels - 1)}")
        if self.guidance_kind not in GUIDANCE_KINDS:
            raise ConfigurationError(f"unknown guidance kind {self.guidance_kind!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        return self

    @property
    def uses_displacement(self):
        return self.guidance_kind in (GEOM_DISP, COMBINED)

    @property
    def uses_codes(self):
        return self.guidance_kind in (NEURAL_CODES, COMBINED)

    @property
    def guidance_channels(self):
        return {GEOM_DISP: 2, NEURAL_CODES: self.code_dim, NMFC: 3, COMBINED: 2 + self.code_dim}[self.guidance_kind]

    @property
    def encoder_in_channels(self):
        return {GEOM_DISP: 3, NEURAL_CODES: 3 + self.code_dim, NMFC: 6, COMBINED: 3 + self.code_dim}[self.guidance_kind]

    def channels(self, level):
        """Feature width at pyramid level ``level`` (1 = coarsest, L = full resolution)."""
        return min(self.base_channels * 2 ** (self.pyramid_levels - level), self.max_channels)

    def size(self, level):
        return self.resolution // 2 ** (self.pyramid_levels - level)

    def to_dict(self):
        return asdict(self)


def level_guidance(guidance, size, displacement_channels):
    """Resize a full-resolution guidance map to ``size``; displacement channels are rescaled."""
    if displacement_channels:
        disp = tc.resize_displacement(guidance[:, :2], size, size)
        rest = guidance[:, 2:]
        if rest.shape[1] == 0:
            return disp
        return tc.concat_channels(disp, tc.resize_bilinear(rest, size, size))
    return tc.resize_bilinear(guidance, size, size)


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        L = cfg.pyramid_levels
        self.stem = tc.SNConv2d(cfg.encoder_in_channels, cfg.channels(L), 3, padding=1)
        self.down = nn.ModuleList(
            tc.SNConv2d(cfg.channels(l + 1), cfg.channels(l), 3, stride=2, padding=1)
            for l in range(L - 1, 0, -1))

    def forward(self, x):
        """Returns shortcut features ordered coarsest (level 1) to finest (level L)."""
        if x.shape[2] != self.cfg.resolution or x.shape[3] != self.cfg.resolution:
            raise ConfigurationError(f"encoder expects {self.cfg.resolution}x{self.cfg.resolution} input")
        feats = [tc.leaky_relu(self.stem(x))]
        for conv in self.down:
            feats.append(tc.leaky_relu(conv(feats[-1])))
        return feats[::-1]


def scaled_displacement(head_out, gain):
    """Head output times a learnable gain measured in widths of the current level.

    The gain starts at zero (identity warp).  Scaling by the level width lets
    one optimizer step move the field by a similar fraction of the image at
    every level; a bare scalar would need thousands of steps to reach
    pixel-sized displacements.
    """
    return head_out * (gain * head_out.shape[-1])


def pwm_initial(f_s1, guidance_1, displacement_channels):
    """Level-1 module: warp by the geometric field and concat, or pass through."""
    if displacement_channels:
        warped = tc.grid_warp(f_s1, guidance_1[:, :2])
        return tc.concat_channels(warped, f_s1)
    return f_s1


class PWMStep(nn.Module):
    """SPADE-modulated displacement prediction at level l, then shortcut warping at level l+1."""

    def __init__(self, in_channels, level_channels, next_channels, guidance_channels, spade_hidden):
        super().__init__()
        self.spade = tc.SPADE(in_channels, guidance_channels, spade_hidden)
        self.conv_h = tc.SNConv2d(in_channels, level_channels, 3, padding=1)
        self.disp_head = tc.SNConv2d(level_channels, 2, 3, padding=1)
        # zero gain: the module starts out as the identity warp
        self.disp_gain = nn.Parameter(torch.zeros(1))
        self.conv_up = tc.SNConv2d(level_channels, next_channels, 3, padding=1)
        self.fuse = tc.SNConv2d(2 * next_channels, next_channels, 3, padding=1)

    def predict(self, f_r, guidance):
        h = tc.leaky_relu(self.conv_h(self.spade(f_r, guidance)))
        return h, scaled_displacement(self.disp_head(h), self.disp_gain)

    def forward(self, f_r, f_s_next, guidance):
        h, disp = self.predict(f_r, guidance)
        disp_up = tc.upsample_displacement(disp)
        warped = tc.grid_warp(f_s_next, disp_up)
        size = f_s_next.shape[2]
        up = tc.leaky_relu(self.conv_up(tc.resize_bilinear(h, size, size)))
        f_r_next = tc.leaky_relu(self.fuse(tc.concat_channels(warped, up)))
        return disp, disp_up, f_r_next


class Generator(nn.Module):
    """Encoder, L-1 progressive warping modules and a tanh synthesis layer."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg.validate()
        L = cfg.pyramid_levels
        self.encoder = Encoder(cfg)
        first = cfg.channels(1) * (2 if cfg.uses_displacement else 1)
        steps = []
        for l in range(1, L):
            in_ch = first if l == 1 else cfg.channels(l)
            steps.append(PWMStep(in_ch, cfg.channels(l), cfg.channels(l + 1), cfg.guidance_channels, cfg.spade_hidden))
        self.steps = nn.ModuleList(steps)
        self.to_rgb = tc.SNConv2d(cfg.channels(L), 3, 3, padding=1)

    def forward(self, encoder_input, guidance, return_state=False):
        cfg = self.cfg
        f_s = self.encoder(encoder_input)
        disp_ch = cfg.uses_displacement
        f_r = pwm_initial(f_s[0], level_guidance(guidance, cfg.size(1), disp_ch), disp_ch)
        state = {"F_s": f_s, "F_r": [f_r], "D": []}
        disp_up = None
        for l, step in enumerate(self.steps, start=1):
            g = level_guidance(guidance, cfg.size(l), disp_ch)
            disp, disp_up, f_r = step(f_r, f_s[l], g)
            state["D"].append(disp)
            state["F_r"].append(f_r)
        out = tc.tanh(self.to_rgb(f_r))
        if return_state:
            return out, disp_up, state
        return out, disp_up


class SingleScaleGenerator(nn.Module):
    """Ablation: one displacement prediction at the coarsest level and a single full-resolution warp."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg.validate()
        L = cfg.pyramid_levels
        self.encoder = Encoder(cfg)
        first = cfg.channels(1) * (2 if cfg.uses_displacement else 1)
        self.spade = tc.SPADE(first, cfg.guidance_channels, cfg.spade_hidden)
        self.conv_h = tc.SNConv2d(first, cfg.channels(1), 3, padding=1)
        self.disp_head = tc.SNConv2d(cfg.channels(1), 2, 3, padding=1)
        self.disp_gain = nn.Parameter(torch.zeros(1))
        self.up_spade = nn.ModuleList(
            tc.SPADE(cfg.channels(l), cfg.guidance_channels, cfg.spade_hidden) for l in range(1, L))
        self.up_conv = nn.ModuleList(
            tc.SNConv2d(cfg.channels(l), cfg.channels(l + 1), 3, padding=1) for l in range(1, L))
        self.fuse = tc.SNConv2d(2 * cfg.channels(L), cfg.channels(L), 3, padding=1)
        self.to_rgb = tc.SNConv2d(cfg.channels(L), 3, 3, padding=1)

    def forward(self, encoder_input, guidance, return_state=False):
        cfg = self.cfg
        L = cfg.pyramid_levels
        f_s = self.encoder(encoder_input)
        disp_ch = cfg.uses_displacement
        g1 = level_guidance(guidance, cfg.size(1), disp_ch)
        f_r = pwm_initial(f_s[0], g1, disp_ch)
        h = tc.leaky_relu(self.conv_h(self.spade(f_r, g1)))
        disp = scaled_displacement(self.disp_head(h), self.disp_gain)
        disp_full = tc.resize_displacement(disp, cfg.resolution, cfg.resolution)
        x = h
        for l, (spade, conv) in enumerate(zip(self.up_spade, self.up_conv), start=1):
            x = spade(x, level_guidance(guidance, cfg.size(l), disp_ch))
            size = cfg.size(l + 1)
            x = tc.leaky_relu(conv(tc.resize_bilinear(x, size, size)))
        warped = tc.grid_warp(f_s[L - 1], disp_full)
        x = tc.leaky_relu(self.fuse(tc.concat_channels(warped, x)))
        out = tc.tanh(self.to_rgb(x))
        if return_state:
            return out, disp_full, {"F_s": f_s, "D": [disp]}
        return out, disp_full


def build_generator(cfg):
    return (Generator if cfg.architecture == "pwm" else SingleScaleGenerator)(cfg)


class FaceAnimator(nn.Module):
    """Generator plus the guidance inputs it needs (learnable codes, NMFC template).

    ``forward`` takes source images and the per-sample :class:`FrameGeometry`
    of the source and driving meshes and returns ``(I_o, D_full)``.
    """

    def __init__(self, cfg, n_vertices, normalized_template=None, seed=0):
        super().__init__()
        self.cfg = cfg.validate()
        gen = torch.Generator().manual_seed(seed)
        self.codes = NeuralCodes(n_vertices, cfg.code_dim, generator=gen) if cfg.uses_codes else None
        if cfg.guidance_kind == NMFC:
            if normalized_template is None:
                raise ConfigurationError("nmfc guidance needs the asset's normalized template")
            self.register_buffer("nmfc_template", torch.as_tensor(np.asarray(normalized_template), dtype=torch.float32))
        else:
            self.nmfc_template = None
        self.generator = build_generator(cfg)

    def _render(self, attributes, geometry):
        if isinstance(attributes, torch.Tensor) and attributes.requires_grad:
            return render_attributes(attributes, geometry.cache)
        attrs = attributes.detach().cpu().numpy() if isinstance(attributes, torch.Tensor) else attributes
        return torch.as_tensor(interpolate(geometry.cache, attrs))

    def guidance_inputs(self, geoms_s, geoms_d, dtype=torch.float32):
        """Build ``(encoder_extra or None, guidance)`` batches for the configured guidance kind."""
        kind = self.cfg.guidance_kind
        extra, guide = [], []
        for gs, gd in zip(geoms_s, geoms_d):
            parts = []
            if kind in (GEOM_DISP, COMBINED):
                parts.append(torch.as_tensor(interpolate(gd.cache, displacement_attributes(gs, gd)), dtype=dtype))
            if kind in (NEURAL_CODES, COMBINED):
                parts.append(self._render(self.codes.codes, gd).to(dtype))
                extra.append(self._render(self.codes.codes, gs).to(dtype))
            if kind == NMFC:
                parts.append(self._render(self.nmfc_template, gd).to(dtype))
                extra.append(self._render(self.nmfc_template, gs).to(dtype))
            guide.append(torch.cat(parts, dim=0))
        guidance = torch.stack(guide)
        return (torch.stack(extra) if extra else None), guidance

    def forward(self, source, geoms_s, geoms_d, return_state=False):
        extra, guidance = self.guidance_inputs(geoms_s, geoms_d, dtype=source.dtype)
        enc_in = source if extra is None else tc.concat_channels(source, extra)
        return self.generator(enc_in, guidance, return_state=return_state)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

class PatchDiscriminator(nn.Module):
    def __init__(self, channels=32, max_channels=256, n_layers=4):
        super().__init__()
        widths = [3] + [min(channels * 2 ** i, max_channels) for i in range(n_layers - 1)] + [1]
        self.convs = nn.ModuleList(
            tc.SNConv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(n_layers))

    def forward(self, x):
        feats = []
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = tc.leaky_relu(x)
            feats.append(x)
        return feats


class MultiScaleDiscriminator(nn.Module):
    """Patch discriminators on the image at full, half and quarter resolution."""

    def __init__(self, n_scales=3, channels=32, max_channels=256):
        super().__init__()
        self.scales = nn.ModuleList(PatchDiscriminator(channels, max_channels) for _ in range(n_scales))

    def forward(self, image):
        """Returns a list over scales of ``(logits, features)``; features has one entry per conv layer."""
        out = []
        x = image
        for i, disc in enumerate(self.scales):
            if i:
                x = tc.avg_pool2d(x, 2)
            feats = disc(x)
            out.append((feats[-1], feats))
        return out
