"""Estimator-style wrappers over the decode and distillation pipelines.

These follow the scikit-learn parameter conventions (constructor stores
hyperparameters verbatim, ``fit`` does the work, fitted state lives in
trailing-underscore attributes, ``get_params``/``set_params`` enable
grid-style sweeps) without claiming full scikit-learn compatibility:
inputs are shape specs and volumes, not feature matrices.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator

from .akvs import AkvsConfig, hierarchical_decode_akvs
from .field import ShapeSpec, build_surface_latents, parse_shape
from .hierdec import DecodeConfig, dense_decode, hierarchical_decode
from .surface import Mesh, marching_cubes


class VolumeDecoder(BaseEstimator):
    """Decode a shape spec into a tSDF volume with the chosen strategy.

    ``fit`` builds the latent token set for the shape; ``transform``
    (and ``fit_transform``) runs the decode and stores the run report in
    ``report_``.
    """

    def __init__(self, mode: str = "hier", target_res: int = 256,
                 base_res: int = 64, eta: float = 0.95, gamma: float = 0.0,
                 dilation_radius: int = 1, tokens: int = 1024,
                 subvolumes: int = 16, top_k: int = 512, seed: int = 0):
        self.mode = mode
        self.target_res = target_res
        self.base_res = base_res
        self.eta = eta
        self.gamma = gamma
        self.dilation_radius = dilation_radius
        self.tokens = tokens
        self.subvolumes = subvolumes
        self.top_k = top_k
        self.seed = seed

    def _config(self) -> DecodeConfig:
        return DecodeConfig(target_res=self.target_res,
                            base_res=self.base_res, eta=self.eta,
                            gamma=self.gamma,
                            dilation_radius=self.dilation_radius,
                            akvs=AkvsConfig(r=self.subvolumes, K=self.top_k))

    def fit(self, shape: ShapeSpec | str, y=None) -> "VolumeDecoder":
        if self.mode not in ("dense", "hier", "hier+akvs"):
            raise ValueError(f"unknown mode {self.mode!r}")
        spec = parse_shape(shape) if isinstance(shape, str) else shape
        self.shape_ = spec
        self.latents_ = build_surface_latents(spec, self.tokens, self.seed)
        return self

    def transform(self, shape=None) -> np.ndarray:
        if shape is not None:
            self.fit(shape)
        if not hasattr(self, "latents_"):
            raise RuntimeError("fit must be called before transform")
        cfg = self._config()
        if self.mode == "dense":
            volume, report = dense_decode(self.latents_, cfg.target_res)
        elif self.mode == "hier":
            volume, report = hierarchical_decode(self.latents_, cfg)
        else:
            volume, report = hierarchical_decode_akvs(self.latents_, cfg,
                                                      seed=self.seed)
        self.report_ = report
        return volume

    def fit_transform(self, shape, y=None) -> np.ndarray:
        return self.fit(shape).transform()


class SurfaceExtractor(BaseEstimator):
    """Turn a tSDF volume into a triangle mesh at the configured level."""

    def __init__(self, gamma: float = 0.0,
                 bbox_min=(-1.0,) * 3, bbox_max=(1.0,) * 3):
        self.gamma = gamma
        self.bbox_min = bbox_min
        self.bbox_max = bbox_max

    def fit(self, volume=None, y=None) -> "SurfaceExtractor":
        return self

    def transform(self, volume, mask=None) -> Mesh:
        return marching_cubes(volume, self.bbox_min, self.bbox_max,
                              gamma=self.gamma, mask=mask)

    def fit_transform(self, volume, y=None) -> Mesh:
        return self.transform(volume)


class FlowDistiller(BaseEstimator):
    """Train the staged few-step sampler on a toy 2D distribution.

    ``fit`` runs teacher training, guidance distillation, multi-phase
    consistency distillation, and the single-phase finetune; ``sample``
    draws from the few-step student.  Adversarial finetuning is opt-in
    via ``adversarial=True``.
    """

    def __init__(self, dist: str = "gmm8", seed: int = 0, phases: int = 5,
                 adversarial: bool = False, overrides: dict | None = None):
        self.dist = dist
        self.seed = seed
        self.phases = phases
        self.adversarial = adversarial
        self.overrides = overrides

    def _config(self):
        from .distill import DistillConfig

        overrides = self.overrides or {}
        allowed = {f.name for f in dataclasses.fields(DistillConfig)}
        unknown = sorted(set(overrides) - allowed)
        if unknown:
            raise ValueError(f"unknown distillation parameter {unknown[0]!r}")
        return DistillConfig(dist=self.dist, seed=self.seed,
                             phases=self.phases, **overrides)

    def fit(self, X=None, y=None) -> "FlowDistiller":
        from .distill import adversarial_finetune, distill_pipeline

        cfg = self._config()
        result = distill_pipeline(cfg)
        self.teacher_ = result["teacher"]
        self.student_ = result["student"]
        if self.adversarial:
            self.student_ = adversarial_finetune(self.student_, self.teacher_,
                                                 cfg)
        return self

    def sample(self, n: int, seed: int, nfe: int | None = None) -> np.ndarray:
        from .distill import sample_student

        if not hasattr(self, "student_"):
            raise RuntimeError("fit must be called before sample")
        cfg = self._config()
        samples, _ = sample_student(self.student_, n, seed,
                                    nfe=nfe or self.phases, w=cfg.w_const)
        return samples

    def score(self, X=None, y=None, n: int = 1024, seed: int = 0) -> float:
        """Negative energy distance of few-step samples to fresh data."""
        from .distill import energy_distance, sample_toy_data

        data, _ = sample_toy_data(self.dist, n, seed=seed + 1)
        return -energy_distance(self.sample(n, seed), data)
