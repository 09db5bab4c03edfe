"""Classification heads mapping year descriptors (and label history) to
class scores.

Five variants: "single" ignores history, "dec" consumes the sum of the
previous two one-hot declarations, "dec-concat" their concatenation,
"dec-one-year" only the last declaration, and "obs" the average of the
previous two year descriptors.  Missing history years are zero-padded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError

VARIANTS = ("single", "dec", "dec-concat", "dec-one-year", "obs")


@dataclass
class LabelHistory:
    """One-hot (or zero, for padded years) vectors for years i-1 and i-2."""

    prev1: np.ndarray
    prev2: np.ndarray

    @classmethod
    def from_labels(cls, prev1, prev2, num_classes):
        def onehot(label):
            v = np.zeros(num_classes, dtype=np.float32)
            if label is not None:
                v[label] = 1.0
            return v

        return cls(prev1=onehot(prev1), prev2=onehot(prev2))


def history_feature_dec(h: LabelHistory) -> np.ndarray:
    """Sum of the two one-hot declarations; order-free."""
    return h.prev1 + h.prev2


def history_feature_concat(h: LabelHistory) -> np.ndarray:
    """[prev1 || prev2]; order preserved."""
    return np.concatenate([h.prev1, h.prev2])


def history_feature_one_year(h: LabelHistory) -> np.ndarray:
    """Only the last declaration."""
    return h.prev1.copy()


def obs_feature(e_prev1, e_prev2, year_index, descriptor_dim):
    """Average of the previous two year descriptors, with mirror padding at
    year 2 and zero padding at year 1.  The inputs are plain arrays: no
    gradient flows into previous years."""
    if year_index == 1:
        return np.zeros(descriptor_dim, dtype=np.float32)
    if year_index == 2:
        if e_prev1 is None:
            raise ContractError("obs_feature: year 2 requires the year-1 descriptor")
        return np.asarray(e_prev1, dtype=np.float32).copy()
    if e_prev1 is None or e_prev2 is None:
        raise ContractError("obs_feature: years > 2 require both past descriptors")
    return ((np.asarray(e_prev1) + np.asarray(e_prev2)) / 2).astype(np.float32)


def feature_dim(variant, num_classes, descriptor_dim):
    if variant == "single":
        return 0
    if variant in ("dec", "dec-one-year"):
        return num_classes
    if variant == "dec-concat":
        return 2 * num_classes
    if variant == "obs":
        return descriptor_dim
    raise ConfigError(f"unknown head variant {variant!r}")


def history_feature(variant, h: LabelHistory):
    if variant == "dec":
        return history_feature_dec(h)
    if variant == "dec-concat":
        return history_feature_concat(h)
    if variant == "dec-one-year":
        return history_feature_one_year(h)
    raise ConfigError(f"variant {variant!r} takes no label history")


class HeadWeights:
    """Two-layer decoder MLP: (descriptor + feature) -> hidden -> L."""

    def __init__(self, variant, num_classes, descriptor_dim, hidden, rng, dtype=np.float32):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown head variant {variant!r}")
        self.variant = variant
        self.num_classes = num_classes
        self.input_dim = descriptor_dim + feature_dim(variant, num_classes, descriptor_dim)
        lim1 = 1.0 / math.sqrt(self.input_dim)
        lim2 = 1.0 / math.sqrt(hidden)
        self.w1 = ad.parameter(rng.uniform(-lim1, lim1, (self.input_dim, hidden)), None, dtype=dtype)
        self.b1 = ad.parameter(rng.uniform(-lim1, lim1, hidden), None, dtype=dtype)
        self.w2 = ad.parameter(rng.uniform(-lim2, lim2, (hidden, num_classes)), None, dtype=dtype)
        self.b2 = ad.parameter(rng.uniform(-lim2, lim2, num_classes), None, dtype=dtype)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


def decode(e, head: HeadWeights, feature=None):
    """Map descriptors (B, D) or (D,) plus the variant's feature to logits.

    `feature` is a (B, F) or (F,) constant array; None for "single"."""
    x = e if isinstance(e, ad.Tensor) else ad.Tensor(e, dtype=head.w1.data.dtype)
    single_input = x.data.ndim == 1
    if x.data.ndim == 1:
        x = ad.reshape(x, (1, x.data.shape[0]))
    if head.variant == "single":
        if feature is not None and np.asarray(feature).size:
            raise ContractError("single head takes no feature input")
    else:
        if feature is None:
            raise ContractError(f"{head.variant} head requires a feature input")
        f = np.asarray(feature, dtype=head.w1.data.dtype)
        if f.ndim == 1:
            f = f[None, :]
        if f.shape != (x.data.shape[0], head.input_dim - x.data.shape[1]):
            raise ContractError(
                f"feature shape {f.shape} incompatible with variant {head.variant}"
            )
        x = ad.concat([x, ad.Tensor(f)], axis=1)
    if x.data.shape[1] != head.input_dim:
        raise ContractError(
            f"decoder input dim {x.data.shape[1]} != expected {head.input_dim}"
        )
    h = ad.relu(ad.add_bias(ad.matmul(x, head.w1), head.b1))
    z = ad.add_bias(ad.matmul(h, head.w2), head.b2)
    if single_input:
        return ad.reshape(z, (head.num_classes,))
    return z
