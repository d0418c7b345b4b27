"""scikit-learn style front end: ``FaceReenactor().fit(dataset).predict(...)``."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .pipeline import AnimatorPredictor, build_geometries, edit, evaluate, run_animator
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint
from .validation import check_dataset, check_face_params, check_images


class FaceReenactor(BaseEstimator):
    """Geometry-guided face reenactment model.

    Parameters mirror :class:`~pwmface.training.TrainConfig`; ``fit`` trains
    on the training identities of a :class:`~pwmface.data.SyntheticDataset`
    and ``predict`` animates source images with driving face parameters.
    """

    def __init__(self, guidance_kind="neural-codes", architecture="pwm", pyramid_levels=5,
                 base_channels=32, spade_hidden=64, code_dim=16, iterations=2000, batch_size=4,
                 lr=2e-4, perceptual_weight=10.0, adversarial_weight=1.0, feature_matching_weight=10.0,
                 warp_weight=1.0, disc_channels=32, extractor="random-conv", seed=0, log_path=None):
        self.guidance_kind = guidance_kind
        self.architecture = architecture
        self.pyramid_levels = pyramid_levels
        self.base_channels = base_channels
        self.spade_hidden = spade_hidden
        self.code_dim = code_dim
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.perceptual_weight = perceptual_weight
        self.adversarial_weight = adversarial_weight
        self.feature_matching_weight = feature_matching_weight
        self.warp_weight = warp_weight
        self.disc_channels = disc_channels
        self.extractor = extractor
        self.seed = seed
        self.log_path = log_path

    def _config(self, resolution):
        return TrainConfig.from_dict({
            "generator": {
                "resolution": resolution,
                "pyramid_levels": self.pyramid_levels,
                "base_channels": self.base_channels,
                "spade_hidden": self.spade_hidden,
                "guidance_kind": self.guidance_kind,
                "code_dim": self.code_dim,
                "architecture": self.architecture,
            },
            "weights": {
                "perceptual": self.perceptual_weight,
                "adversarial": self.adversarial_weight,
                "feature_matching": self.feature_matching_weight,
                "warp": self.warp_weight,
            },
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "disc_channels": self.disc_channels,
            "extractor": self.extractor,
            "seed": self.seed,
        }).validate()

    def fit(self, X, y=None):
        dataset = check_dataset(X)
        cfg = self._config(dataset.resolution)
        trainer = Trainer(cfg, dataset.asset.n_vertices, dataset.asset.normalized_template)
        self.history_ = trainer.fit(dataset, log_path=self.log_path)
        self.trainer_ = trainer
        self.animator_ = trainer.animator
        self.asset_ = dataset.asset
        self.config_ = cfg
        return self

    def predict(self, source_images, source_params, driving_params, mode="same"):
        """Reenacted images, ``B x 3 x H x W`` float32 array in [-1, 1]."""
        check_is_fitted(self, "animator_")
        res = self.animator_.cfg.resolution
        sources = check_images(source_images, res, "source_images")
        ps = check_face_params(source_params, self.asset_, sources.shape[0], "source_params")
        pd = check_face_params(driving_params, self.asset_, sources.shape[0], "driving_params")
        geoms_s, geoms_d = [], []
        for a, b in zip(ps, pd):
            gs, gd, _ = build_geometries(self.asset_, a, b, res, mode)
            geoms_s.append(gs)
            geoms_d.append(gd)
        return run_animator(self.animator_, sources, geoms_s, geoms_d).numpy()

    def edit(self, source_image, source_params, overrides):
        check_is_fitted(self, "animator_")
        src = check_images(source_image, self.animator_.cfg.resolution, "source_image")[0]
        (ps,) = check_face_params(source_params, self.asset_, 1, "source_params")
        return np.stack([img.numpy() for img in edit(self.animator_, self.asset_, src, ps, overrides)])

    def evaluate(self, X, protocol="same", n_pairs=16, seed=0):
        check_is_fitted(self, "animator_")
        return evaluate(AnimatorPredictor(self.animator_, self.asset_), check_dataset(X), protocol, n_pairs, seed)

    def score(self, X, y=None):
        """Mean SSIM of same-identity reconstructions on held-out identities."""
        return self.evaluate(X, "same").ssim

    def save(self, path):
        check_is_fitted(self, "animator_")
        trainer = getattr(self, "trainer_", None)
        save_checkpoint(path, self.config_, self.animator_,
                        trainer.discriminator if trainer else None,
                        trainer.opt_g if trainer else None,
                        trainer.opt_d if trainer else None,
                        trainer.iteration if trainer else 0)

    @classmethod
    def load(cls, path, asset):
        cfg, animator, _, _, _ = load_checkpoint(path, asset.n_vertices, asset.normalized_template)
        g, w = cfg.generator, cfg.weights
        est = cls(guidance_kind=g.guidance_kind, architecture=g.architecture, pyramid_levels=g.pyramid_levels,
                  base_channels=g.base_channels, spade_hidden=g.spade_hidden, code_dim=g.code_dim,
                  iterations=cfg.iterations, batch_size=cfg.batch_size, lr=cfg.lr,
                  perceptual_weight=w.perceptual, adversarial_weight=w.adversarial,
                  feature_matching_weight=w.feature_matching, warp_weight=w.warp,
                  disc_channels=cfg.disc_channels, extractor=cfg.extractor, seed=cfg.seed)
        est.animator_ = animator
        est.asset_ = asset
        est.config_ = cfg
        return est
