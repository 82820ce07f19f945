"""Estimator-style wrappers around the synchronisation and registration stages.

They follow the scikit-learn conventions: constructor arguments are stored
unchanged, ``fit`` does the work and sets trailing-underscore attributes.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import pipeline
from .config import PipelineConfig
from .geometry import TriMesh
from .registration import RegistrationParams, foot_dimensions, register_template
from .sync import merge_at_timestamp


class HierarchicalSynchronizer(BaseEstimator):
    """Learned multi-camera synchronisation onto the first camera's timeline.

    ``fit(graphs)`` trains the first-stage model (unless ``base_model`` is
    given) and folds the remaining cameras in id order.
    """

    def __init__(self, config: PipelineConfig | None = None, base_model=None, n_reference: int | None = None):
        self.config = config
        self.base_model = base_model
        self.n_reference = n_reference

    def fit(self, graphs: dict, y=None):
        cfg = self.config or PipelineConfig()
        model, curve = self.base_model, None
        if model is None:
            model, curve = pipeline.train_base_model(graphs, cfg)
        self.hierarchy_ = pipeline.synchronise(graphs, cfg, model, n_reference=self.n_reference)
        self.base_model_ = model
        self.loss_curve_ = curve
        self.mappings_ = self.hierarchy_.mappings
        return self

    def transform(self, frames: dict) -> list:
        """Merged cloud per reference frame under the fitted mappings."""
        return pipeline.merged_sequence(frames, self.mappings_)

    def merged_at(self, frames: dict, r: int):
        return merge_at_timestamp(frames, self.mappings_, r)


class TemplateRegistrar(BaseEstimator):
    """Non-rigid registration of a template mesh to one target cloud."""

    def __init__(self, template: TriMesh, params: RegistrationParams | None = None):
        self.template = template
        self.params = params

    def fit(self, X, y=None):
        self.result_ = register_template(self.template, np.asarray(X, dtype=float), self.params)
        self.mesh_ = self.result_.mesh
        self.dimensions_ = foot_dimensions(self.mesh_)
        return self

    def transform(self, X=None) -> np.ndarray:
        return self.mesh_.vertices

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X).transform()
