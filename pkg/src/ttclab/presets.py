"""Builders that turn a flat config into models, and the pinned acceptance setup."""

from __future__ import annotations

import functools

from .config import DEFAULTS, section
from .data import Dataset
from .harness import DataConfig
from .model import AdversarialTraining, Architecture, DualEncoder, TrainConfig, finetune_tecoa, train_clean

# the desk-scale run the directional checks are pinned to
PINNED = dict(DEFAULTS)
PINNED_TECOA_LR = 0.01


def data_config(cfg: dict) -> DataConfig:
    return DataConfig(**section(cfg, "data"))


def architecture(cfg: dict, ds: Dataset) -> Architecture:
    m = section(cfg, "model")
    C, W, H = ds.image_shape
    return Architecture(C, W, H, m["hidden"], m["embed_dim"], ds.n_classes, depth=m["depth"])


def init_model(cfg: dict, ds: Dataset) -> DualEncoder:
    m = section(cfg, "model")
    model = DualEncoder.init(architecture(cfg, ds), seed=m["seed"], logit_scale=m["logit_scale"])
    model.activation = m["activation"]
    return model


def train_config(cfg: dict) -> TrainConfig:
    t = section(cfg, "train")
    return TrainConfig(learning_rate=t["learning_rate"], epochs=t["epochs"], batch_size=t["batch_size"],
                       seed=t["seed"])


def tecoa_config(cfg: dict) -> TrainConfig:
    t = section(cfg, "tecoa")
    adv = AdversarialTraining(steps=t["steps"], epsilon=t["epsilon"], alpha=t["alpha"])
    return TrainConfig(learning_rate=t["learning_rate"], epochs=t["epochs"], batch_size=t["batch_size"],
                       seed=t["seed"], adversarial=adv)


def train_from_config(cfg: dict):
    ds = data_config(cfg).load("train")
    return train_clean(init_model(cfg, ds), ds.images, ds.labels, train_config(cfg)), ds


@functools.lru_cache(maxsize=1)
def _pinned() -> DualEncoder:
    result, _ = train_from_config(PINNED)
    return result.model


def pinned_model() -> DualEncoder:
    """The pinned clean-trained model (trained once per process, returned as a copy)."""
    return _pinned().copy()


@functools.lru_cache(maxsize=1)
def _pinned_tecoa() -> DualEncoder:
    cfg = dict(PINNED, **{"tecoa.learning_rate": PINNED_TECOA_LR})
    ds = data_config(cfg).load("train")
    return finetune_tecoa(_pinned(), ds.images, ds.labels, tecoa_config(cfg)).model


def pinned_tecoa_model() -> DualEncoder:
    return _pinned_tecoa().copy()


def pinned_test_set() -> Dataset:
    return data_config(PINNED).load("test")
