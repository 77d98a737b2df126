"""Estimator-style facade over train/encode/decode.

`FlowImageCodec` follows the fit/transform parameter conventions
(`get_params`/`set_params`, constructor arguments stored verbatim) so it
clones and composes with scikit-learn style tooling, while delegating
all real work to the package modules.
"""

from __future__ import annotations

import numpy as np

from .codec import P_THRESH_DEFAULT, decode_image, encode_image
from .entropy import QuantSpec
from .flow import FlowConfig, FlowModel
from .training import TrainConfig, finetune_deltas, train


class NotFittedError(RuntimeError):
    pass


def check_images(images) -> list[np.ndarray]:
    """Validate a corpus: a non-empty sequence of (C,H,W) float arrays on
    a common channel count, values inside [0, 255]."""
    images = [np.asarray(img, dtype=np.float64) for img in images]
    if not images:
        raise ValueError("expected at least one image")
    channels = images[0].shape[0]
    for i, img in enumerate(images):
        if img.ndim != 3:
            raise ValueError(f"image {i} must be (channels, height, width), got {img.shape}")
        if img.shape[0] != channels:
            raise ValueError(f"image {i} has {img.shape[0]} channels, expected {channels}")
        if not np.all(np.isfinite(img)):
            raise ValueError(f"image {i} contains non-finite values")
        if img.min() < 0 or img.max() > 255:
            raise ValueError(f"image {i} values outside [0, 255]")
    return images


class FlowImageCodec:
    """Trainable lossy codec with an estimator-shaped surface.

    fit(images) trains the bijective transform and entropy models;
    encode/decode move single images to bitstream bytes and back.
    """

    def __init__(self, flow_steps: int = 2, blocks: int = 1, hidden: int = 16,
                 lambda_rd: float = 1.0, train_steps: int = 500, batch_size: int = 8,
                 patch: int = 32, seed: int = 0, delta: float = 1.0,
                 p_thresh: float = P_THRESH_DEFAULT):
        self.flow_steps = flow_steps
        self.blocks = blocks
        self.hidden = hidden
        self.lambda_rd = lambda_rd
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.patch = patch
        self.seed = seed
        self.delta = delta
        self.p_thresh = p_thresh
        self.model_: FlowModel | None = None

    # -- sklearn-style parameter plumbing ---------------------------------

    _param_names = ("flow_steps", "blocks", "hidden", "lambda_rd", "train_steps",
                    "batch_size", "patch", "seed", "delta", "p_thresh")

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params) -> "FlowImageCodec":
        for name, value in params.items():
            if name not in self._param_names:
                raise ValueError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    # -- estimator surface --------------------------------------------------

    def fit(self, images, y=None) -> "FlowImageCodec":
        corpus = check_images(images)
        self.model_ = FlowModel(FlowConfig(
            in_channels=corpus[0].shape[0], steps=self.flow_steps,
            blocks=self.blocks, hidden=self.hidden, seed=self.seed,
        ))
        cfg = TrainConfig(lambda_rd=self.lambda_rd, steps=self.train_steps,
                          batch_size=self.batch_size, patch=self.patch,
                          seed=self.seed)
        train(self.model_, corpus, cfg)
        return self

    def _require_fitted(self) -> FlowModel:
        if self.model_ is None:
            raise NotFittedError("call fit() or load_model() first")
        return self.model_

    def quant_spec(self) -> QuantSpec:
        return QuantSpec.uniform(self.delta, self._require_fitted().base_channels)

    def encode(self, image, levels: float = 3.0, spec: QuantSpec | None = None) -> bytes:
        model = self._require_fitted()
        (image,) = check_images([image])
        return encode_image(model, image, spec or self.quant_spec(),
                            levels=levels, p_thresh=self.p_thresh)

    def decode(self, blob: bytes, levels: float | None = None) -> np.ndarray:
        return decode_image(self._require_fitted(), blob, levels=levels)

    def tune_steps(self, images, lambda_rd: float, steps: int = 120) -> QuantSpec:
        return finetune_deltas(self._require_fitted(), check_images(images),
                               lambda_rd, steps=steps, seed=self.seed)

    # -- persistence ---------------------------------------------------------

    def save_model(self, path) -> "FlowImageCodec":
        self._require_fitted().save(path)
        return self

    def load_model(self, path) -> "FlowImageCodec":
        self.model_ = FlowModel.load(path)
        return self
