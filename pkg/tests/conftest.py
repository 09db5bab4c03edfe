import numpy as np
import pytest

from croprot.data import Dataset, SyntheticConfig, generate_synthetic
from croprot.model import CropModel, ModelDims


def tiny_dims(num_classes=4, variant_descriptor=8):
    return ModelDims(
        channels=3,
        sample_pixels=4,
        d1=4,
        d2=8,
        heads=2,
        d_k=4,
        out_hidden=8,
        descriptor=variant_descriptor,
        num_classes=num_classes,
        head_hidden=6,
    )


def small_dims(num_classes=8):
    return ModelDims(
        channels=4,
        sample_pixels=8,
        d1=16,
        d2=32,
        heads=4,
        d_k=8,
        out_hidden=32,
        descriptor=32,
        num_classes=num_classes,
        head_hidden=32,
    )


@pytest.fixture(scope="session")
def small_dataset():
    cfg = SyntheticConfig(parcels=60, seed=7)
    return Dataset(parcels=generate_synthetic(cfg), num_classes=cfg.num_classes), cfg


@pytest.fixture
def tiny_model():
    return CropModel(tiny_dims(), "single", seed=2)
