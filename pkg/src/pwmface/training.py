"""Losses, learning-rate schedule, checkpoints and the adversarial training loop."""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import yaml

from . import archive
from . import tensor_core as tc
from .network import FaceAnimator, GeneratorConfig, MultiScaleDiscriminator

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pwmface-checkpoint"
CHECKPOINT_VERSION = 1
BASE_LR = 2e-4
LR_DECAY = 0.1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class LossWeights:
    perceptual: float = 10.0
    adversarial: float = 1.0
    feature_matching: float = 10.0
    warp: float = 1.0

    def validate(self):
        vals = asdict(self).values()
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ValueError("loss weights must be non-negative with at least one positive")
        return self


# ---------------------------------------------------------------------------
# perceptual feature extractors
# ---------------------------------------------------------------------------

class IdentityExtractor(nn.Module):
    """Returns the image itself as the only feature map."""

    def forward(self, x):
        return [x]


class RandomConvExtractor(nn.Module):
    """Frozen, seeded 5-block conv pyramid standing in for VGG-19.

    Each block is a 3x3 convolution with He-scaled random weights and a
    leaky ReLU; blocks after the first start with a 2x average pool.  The
    outputs of all five convolutions are returned.
    """

    def __init__(self, seed=0, widths=(8, 16, 32, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        ins = (3,) + tuple(widths[:-1])
        self.weights = nn.ParameterList()
        for cin, cout in zip(ins, widths):
            w = torch.randn(cout, cin, 3, 3, generator=gen) * (2.0 / (cin * 9)) ** 0.5
            self.weights.append(nn.Parameter(w, requires_grad=False))

    def forward(self, x):
        feats = []
        for i, w in enumerate(self.weights):
            if i and min(x.shape[2:]) >= 2:
                x = tc.avg_pool2d(x, 2)
            x = tc.leaky_relu(tc.conv2d(x, w.to(x.dtype), padding=1))
            feats.append(x)
        return feats


def build_extractor(kind, seed=0):
    if kind == "identity":
        return IdentityExtractor()
    if kind == "random-conv":
        return RandomConvExtractor(seed)
    raise ValueError(f"unknown feature extractor {kind!r}")


def image_pyramid(image, n_scales=3):
    out = [image]
    for _ in range(n_scales - 1):
        out.append(tc.avg_pool2d(out[-1], 2))
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def perceptual_loss(target, output, extractor, n_scales=3):
    """Sum over image scales and extractor layers of mean absolute feature differences."""
    if target.shape != output.shape:
        raise ValueError("perceptual loss needs images of identical shape")
    total = output.new_zeros(())
    for t, o in zip(image_pyramid(target, n_scales), image_pyramid(output, n_scales)):
        for ft, fo in zip(extractor(t), extractor(o)):
            total = total + (ft - fo).abs().mean()
    return total


def hinge_g_loss(fake_logits):
    return -sum(f.mean() for f in fake_logits)


def hinge_d_loss(real_logits, fake_logits):
    total = 0.0
    for r, f in zip(real_logits, fake_logits):
        total = total + torch.relu(1 - r).mean() + torch.relu(1 + f).mean()
    return total


def feature_matching_loss(real_features, fake_features):
    """Mean L1 between discriminator activations, summed over scales and layers.

    Real-image features are detached so only the generated side receives gradient.
    """
    if len(real_features) != len(fake_features):
        raise ValueError("feature lists cover different numbers of scales")
    total = 0.0
    for rs, fs in zip(real_features, fake_features):
        if len(rs) != len(fs):
            raise ValueError("feature lists have different numbers of layers")
        for r, f in zip(rs, fs):
            if r.shape != f.shape:
                raise ValueError(f"feature shape mismatch {tuple(r.shape)} vs {tuple(f.shape)}")
            total = total + (r.detach() - f).abs().mean()
    return total


def _split(disc_out):
    return [o[0] for o in disc_out], [o[1] for o in disc_out]


def image_losses(target, output, extractor, discriminator, real_features=None):
    """Perceptual, generator hinge and feature-matching terms for one generated image."""
    if real_features is None:
        with torch.no_grad():
            real_features = _split(discriminator(target))[1]
    fake_logits, fake_features = _split(discriminator(output))
    return {
        "perceptual": perceptual_loss(target, output, extractor),
        "adversarial": hinge_g_loss(fake_logits),
        "feature_matching": feature_matching_loss(real_features, fake_features),
    }


def warping_constraint(source, disp_full, target, extractor, discriminator, real_features=None):
    """Warp the source image by the final displacement and score it against the target."""
    warped = tc.grid_warp(source, disp_full)
    losses = image_losses(target, warped, extractor, discriminator, real_features)
    losses["warped"] = warped
    return losses


def weighted_total(terms, weights):
    return (weights.perceptual * terms["perceptual"] + weights.adversarial * terms["adversarial"]
            + weights.feature_matching * terms["feature_matching"])


def learning_rate(iteration, total_iterations, base=BASE_LR, milestones=(0.3, 0.6), decay=LR_DECAY):
    """Step schedule: ``base`` decayed by ``decay`` at each milestone fraction of the run."""
    lr = base
    for m in milestones:
        if iteration >= int(round(m * total_iterations)):
            lr *= decay
    return lr


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 2000
    batch_size: int = 4
    lr: float = BASE_LR
    milestones: tuple = (0.3, 0.6)
    disc_channels: int = 32
    extractor: str = "random-conv"
    seed: int = 0
    data_dir: str = "data"
    output_dir: str = "runs/default"
    checkpoint_every: int = 500
    log_every: int = 1
    holdout_identities: int = 4

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        gen = GeneratorConfig(**d.pop("generator", {}))
        w = LossWeights(**d.pop("weights", {}))
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        return cls(generator=gen, weights=w, **d)

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    def validate(self):
        self.generator.validate()
        self.weights.validate()
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        return self


def set_by_path(d, dotted, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def load_config(path=None, overrides=()):
    """Read a YAML config and apply ``key.sub=value`` overrides (values parsed as YAML)."""
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} must look like key=value")
        set_by_path(raw, key.strip(), yaml.safe_load(value))
    return TrainConfig.from_dict(raw).validate()


def save_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg, animator, discriminator=None, opt_g=None, opt_d=None, iteration=0, extra_meta=None):
    arrays = {}
    for name, t in animator.state_dict().items():
        arrays[f"gen.{name}"] = t.detach().cpu().numpy()
    if discriminator is not None:
        for name, t in discriminator.state_dict().items():
            arrays[f"disc.{name}"] = t.detach().cpu().numpy()
    if opt_g is not None:
        arrays.update(opt_g.state_arrays("opt_g"))
    if opt_d is not None:
        arrays.update(opt_d.state_arrays("opt_d"))
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "config": cfg.to_dict(), "iteration": int(iteration)}
    meta.update(extra_meta or {})
    archive.save(path, arrays, meta)


def load_checkpoint(path, n_vertices=None, normalized_template=None):
    """Rebuild ``(cfg, animator, discriminator, arrays, meta)`` from a checkpoint file."""
    arrays, meta = archive.load(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    cfg = TrainConfig.from_dict(meta["config"]).validate()
    if n_vertices is None:
        key = "gen.codes.codes" if "gen.codes.codes" in arrays else "gen.nmfc_template"
        n_vertices = arrays[key].shape[0] if key in arrays else 1
    animator = FaceAnimator(cfg.generator, n_vertices, normalized_template)
    _load_module(animator, arrays, "gen.")
    disc = MultiScaleDiscriminator(channels=cfg.disc_channels)
    if any(k.startswith("disc.") for k in arrays):
        _load_module(disc, arrays, "disc.")
    return cfg, animator, disc, arrays, meta


def _load_module(module, arrays, prefix):
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint/config mismatch: missing {missing[:5]}")
    new_state = {}
    for k, t in state.items():
        a = arrays[prefix + k]
        if tuple(a.shape) != tuple(t.shape):
            raise CheckpointError(f"checkpoint/config mismatch for {k}: {a.shape} vs {tuple(t.shape)}")
        new_state[k] = torch.as_tensor(a, dtype=t.dtype)
    module.load_state_dict(new_state)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class Trainer:
    """Owns the animator, discriminator, extractor and both optimizers for one run."""

    def __init__(self, cfg, n_vertices, normalized_template=None):
        self.cfg = cfg.validate()
        torch.manual_seed(cfg.seed)
        self.animator = FaceAnimator(cfg.generator, n_vertices, normalized_template, seed=cfg.seed)
        self.discriminator = MultiScaleDiscriminator(channels=cfg.disc_channels)
        self.extractor = build_extractor(cfg.extractor, seed=cfg.seed + 1)
        self.opt_g = tc.Adam(self.animator.parameters(), lr=cfg.lr)
        self.opt_d = tc.Adam(self.discriminator.parameters(), lr=cfg.lr)
        self.weights = cfg.weights
        self.iteration = 0

    def set_lr(self):
        lr = learning_rate(self.iteration, self.cfg.iterations, self.cfg.lr, self.cfg.milestones)
        self.opt_g.lr = self.opt_d.lr = lr
        return lr

    def generator_losses(self, batch, output, disp_full):
        w = self.weights
        with torch.no_grad():
            real_features = _split(self.discriminator(batch.target))[1]
        terms = image_losses(batch.target, output, self.extractor, self.discriminator, real_features)
        warp_terms = warping_constraint(batch.source, disp_full, batch.target, self.extractor,
                                        self.discriminator, real_features)
        total = weighted_total(terms, w) + w.warp * weighted_total(warp_terms, w)
        return total, terms, warp_terms

    def train_step(self, batch):
        lr = self.set_lr()
        self.animator.train()
        self.discriminator.train()
        try:
            output, disp_full = self.animator(batch.source, batch.geoms_s, batch.geoms_d)
        except tc.NonFiniteError as exc:
            raise TrainingDivergedError(f"non-finite activations at iteration {self.iteration}: {exc}") from exc

        real_logits, _ = _split(self.discriminator(batch.target))
        fake_logits, _ = _split(self.discriminator(output.detach()))
        loss_d = hinge_d_loss(real_logits, fake_logits)
        self.opt_d.zero_grad()
        loss_d.backward()
        self.opt_d.step()

        total, terms, warp_terms = self.generator_losses(batch, output, disp_full)
        self.opt_g.zero_grad()
        self.discriminator.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()

        report = {
            "iteration": self.iteration,
            "lr": lr,
            "loss_g": total.item(),
            "loss_d": loss_d.item(),
            "perceptual": terms["perceptual"].item(),
            "adversarial": terms["adversarial"].item(),
            "feature_matching": terms["feature_matching"].item(),
            "warp_perceptual": warp_terms["perceptual"].item(),
            "warp_adversarial": warp_terms["adversarial"].item(),
            "warp_feature_matching": warp_terms["feature_matching"].item(),
        }
        if not all(np.isfinite(v) for v in report.values()):
            raise TrainingDivergedError(f"non-finite loss at iteration {self.iteration}: {report}")
        self.iteration += 1
        return report

    def fit(self, dataset, iterations=None, log_path=None, checkpoint_dir=None, progress=None):
        """Run ``iterations`` steps (default: the configured total) and return the loss reports."""
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        n = cfg.iterations if iterations is None else iterations
        reports = []
        log_file = open(log_path, "a") if log_path else None
        try:
            for _ in range(n):
                batch = dataset.sample_batch(rng, cfg.batch_size)
                try:
                    report = self.train_step(batch)
                except TrainingDivergedError:
                    if checkpoint_dir is not None:
                        dump = Path(checkpoint_dir) / f"diverged_{self.iteration:06d}.pwma"
                        self.save(dump)
                        log.error("training diverged; state dumped to %s", dump)
                    raise
                reports.append(report)
                if log_file and report["iteration"] % cfg.log_every == 0:
                    log_file.write(json.dumps(report, sort_keys=True) + "\n")
                    log_file.flush()
                if progress is not None:
                    progress(report)
                if checkpoint_dir is not None and cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
                    self.save(Path(checkpoint_dir) / f"checkpoint_{self.iteration:06d}.pwma")
        finally:
            if log_file:
                log_file.close()
        return reports

    def save(self, path):
        save_checkpoint(path, self.cfg, self.animator, self.discriminator, self.opt_g, self.opt_d, self.iteration)

