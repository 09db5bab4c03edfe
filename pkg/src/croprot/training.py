"""Loss, Adam optimizer, cross-validated training loops, batched inference."""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import analytics, autodiff as ad, heads
from .data import sample_pixels
from .encoders import encode_batch
from .errors import ContractError
from .model import CropModel, ModelDims


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    variant: str = "single"
    protocol: str = "mixed"  # "mixed" | "specialized"
    protocol_year: int | None = None  # 1-based, for "specialized"

    def validate(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ContractError("learning rate must be positive")
        if self.protocol not in ("mixed", "specialized"):
            raise ContractError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "specialized" and self.protocol_year is None:
            raise ContractError("specialized protocol needs a year")


@dataclass
class PredictionRecord:
    parcel_id: int
    year_index: int
    logits: np.ndarray
    true_label: int
    posterior: np.ndarray | None = None

    @property
    def predicted(self):
        # np.argmax breaks ties toward the lowest class index
        return int(np.argmax(self.logits))

    @property
    def confidence(self):
        p = self.posterior
        if p is None:
            raise ContractError("record has no calibrated posterior")
        return float(p[self.predicted])

    def to_dict(self):
        d = {
            "parcel_id": self.parcel_id,
            "year_index": self.year_index,
            "logits": [float(v) for v in self.logits],
            "true_label": self.true_label,
        }
        if self.posterior is not None:
            d["posterior"] = [float(v) for v in self.posterior]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            parcel_id=d["parcel_id"],
            year_index=d["year_index"],
            logits=np.asarray(d["logits"], dtype=np.float32),
            true_label=d["true_label"],
            posterior=(
                np.asarray(d["posterior"], dtype=np.float32)
                if "posterior" in d
                else None
            ),
        )


# ---------------------------------------------------------------------------
# loss and optimizer


def cross_entropy(z, label):
    """Mean negative log-likelihood; z is (L,) with an int label, or (B, L)
    with a label sequence."""
    t = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
    if t.data.ndim == 1:
        t = ad.reshape(t, (1, t.data.shape[0]))
        labels = np.asarray([label], dtype=np.int64)
    else:
        labels = np.asarray(label, dtype=np.int64)
    logp = ad.log_softmax(t, axis=-1)
    return ad.scale(ad.mean_all(ad.pick(logp, labels)), -1.0)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One Adam update with bias correction; mutates params and state."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.data.dtype)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data = p.data - p.data.dtype.type(cfg.learning_rate) * mhat / (
            np.sqrt(vhat) + cfg.adam_eps
        )


# ---------------------------------------------------------------------------
# batched forward


def ground_truth_history(parcel, year_index, num_classes):
    labels = parcel.labels
    prev1 = labels[year_index - 2] if year_index >= 2 else None
    prev2 = labels[year_index - 3] if year_index >= 3 else None
    return heads.LabelHistory.from_labels(prev1, prev2, num_classes)


def _encode_items(model, items, draws):
    """Inference-mode descriptors for (parcel, year) items with given pixel
    draws; returns a (B, descriptor) array."""
    pixels = np.stack(draws)
    days = np.stack([p.samples[y - 1].days for p, y in items])
    return np.array(encode_batch(pixels, days, model.pse, model.ltae).data)


def _obs_features(model, items, rng):
    """Detached average-of-past-descriptors features for "obs" batches."""
    dims = model.dims
    need = []
    for parcel, year in items:
        for back in (1, 2):
            if year - back >= 1:
                need.append((parcel, year - back))
    feats = np.zeros((len(items), dims.descriptor), dtype=np.float32)
    if need:
        by_key = {}
        groups = defaultdict(list)
        for parcel, y in need:
            groups[(y, parcel.samples[y - 1].pixels.shape[2])].append((parcel, y))
        for group in groups.values():
            draws = [
                sample_pixels(p.samples[y - 1], dims.sample_pixels, rng)
                for p, y in group
            ]
            enc = _encode_items(model, group, draws)
            for (p, y), e in zip(group, enc):
                by_key[(p.parcel_id, y)] = e
        for j, (parcel, year) in enumerate(items):
            e1 = by_key.get((parcel.parcel_id, year - 1))
            e2 = by_key.get((parcel.parcel_id, year - 2))
            feats[j] = heads.obs_feature(e1, e2, year, dims.descriptor)
    return feats


def _batch_features(model, items, rng, histories=None):
    variant = model.variant
    if variant == "single":
        return None
    if variant == "obs":
        return _obs_features(model, items, rng)
    rows = []
    for parcel, year in items:
        if histories is not None:
            key = (parcel.parcel_id, year)
            if key not in histories:
                if year > 1:
                    raise ContractError(
                        f"missing label history for parcel {parcel.parcel_id}, "
                        f"year {year}"
                    )
                h = heads.LabelHistory.from_labels(None, None, model.dims.num_classes)
            else:
                h = histories[key]
        else:
            h = ground_truth_history(parcel, year, model.dims.num_classes)
        rows.append(heads.history_feature(variant, h))
    return np.stack(rows)


def batch_logits(model, items, draws, rng, histories=None):
    """Forward pass for a same-year batch; returns the logits Tensor."""
    pixels = np.stack(draws)
    days = np.stack([p.samples[y - 1].days for p, y in items])
    features = _batch_features(model, items, rng, histories)
    e = encode_batch(pixels, days, model.pse, model.ltae)
    return heads.decode(e, model.head, features)


# ---------------------------------------------------------------------------
# training


def _training_items(parcels, cfg: TrainConfig, num_years):
    if cfg.protocol == "specialized":
        years = [cfg.protocol_year]
    else:
        years = range(1, num_years + 1)
    return [(p, y) for p in parcels for y in years]


def _epoch_batches(items, batch_size, rng):
    buckets = defaultdict(list)
    for it in items:
        parcel, year = it
        buckets[(year, parcel.samples[year - 1].pixels.shape[2])].append(it)
    batches = []
    for key in sorted(buckets, key=str):
        group = buckets[key]
        order = rng.permutation(len(group))
        group = [group[i] for i in order]
        for i in range(0, len(group), batch_size):
            batches.append(group[i : i + batch_size])
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


@dataclass
class FoldResult:
    fold: int
    model: CropModel
    val_records: list
    test_records: list
    best_epoch: int
    epoch_log: list  # (epoch, mean train loss, val mIoU)


@dataclass
class TrainResult:
    folds: list

    @property
    def test_records(self):
        return [r for f in self.folds for r in f.test_records]


def train_single_split(dataset, train_parcels, val_parcels, cfg, dims, fold=0):
    """Train one model on the given split; selects the best epoch by
    validation mIoU."""
    cfg.validate()
    if not train_parcels:
        raise ContractError("empty training split")
    model = CropModel(dims, cfg.variant, seed=cfg.seed + fold)
    params = model.parameters()
    state = AdamState()
    items = _training_items(train_parcels, cfg, dataset.num_years)
    if not items:
        raise ContractError("no training samples under this protocol")
    best = (-1.0, 0, model.state_arrays())
    epoch_log = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, fold, epoch, 0xE9])
        )
        losses = []
        for batch in _epoch_batches(items, cfg.batch_size, rng):
            draws = [
                sample_pixels(p.samples[y - 1], dims.sample_pixels, rng)
                for p, y in batch
            ]
            labels = np.asarray([p.labels[y - 1] for p, y in batch], dtype=np.int64)
            with ad.recording(params) as tape:
                z = batch_logits(model, batch, draws, rng)
                loss = cross_entropy(z, labels)
                grads_map = ad.backward(tape, loss, params=params)
            optimizer_step(params, [grads_map[p] for p in params], state, cfg)
            losses.append(float(loss.data))
        if val_parcels:
            val_records = predict(model, val_parcels, seed=cfg.seed)
            miou = analytics.metrics(analytics.confusion(val_records, dims.num_classes))[2]
            if miou > best[0]:
                best = (miou, epoch, model.state_arrays())
        else:
            # no validation split: keep the final epoch
            miou = 0.0
            best = (miou, epoch, model.state_arrays())
        epoch_log.append((epoch, float(np.mean(losses)), miou))
    model.load_state_arrays(best[2])
    return model, best[1], epoch_log


def train(dataset, folds, cfg: TrainConfig, dims: ModelDims, folds_to_run=None):
    """5-fold style rotation: test fold f, validation fold (f+1) % k, train
    on the rest; mixed protocol pools every parcel-year of the train folds."""
    cfg.validate()
    by_fold = defaultdict(list)
    for p in dataset.parcels:
        by_fold[folds.folds[p.parcel_id]].append(p)
    results = []
    for f in folds_to_run if folds_to_run is not None else range(folds.k):
        val_f = (f + 1) % folds.k
        train_parcels = [
            p
            for ff in range(folds.k)
            if ff not in (f, val_f)
            for p in by_fold[ff]
        ]
        model, best_epoch, epoch_log = train_single_split(
            dataset, train_parcels, by_fold[val_f], cfg, dims, fold=f
        )
        val_records = predict(model, by_fold[val_f], seed=cfg.seed)
        test_records = predict(model, by_fold[f], seed=cfg.seed)
        results.append(
            FoldResult(
                fold=f,
                model=model,
                val_records=val_records,
                test_records=test_records,
                best_epoch=best_epoch,
                epoch_log=epoch_log,
            )
        )
    return TrainResult(folds=results)


# ---------------------------------------------------------------------------
# inference


def predict(model, parcels, years=None, seed=0, histories=None, batch_size=256):
    """One PredictionRecord per requested parcel-year; pixel draws are fixed
    by (seed, parcel, year), so repeated calls are identical.

    Label-history variants consume ground-truth declarations of previous
    years unless explicit `histories` (keyed by (parcel_id, year)) are
    given."""
    if not parcels:
        return []
    num_years = len(parcels[0].samples)
    wanted = list(years) if years is not None else list(range(1, num_years + 1))
    items = [(p, y) for p in parcels for y in wanted]
    buckets = defaultdict(list)
    for it in items:
        parcel, year = it
        buckets[(year, parcel.samples[year - 1].pixels.shape[2])].append(it)
    records = []
    feature_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0B5]))
    for key in sorted(buckets, key=str):
        group = buckets[key]
        for i in range(0, len(group), batch_size):
            batch = group[i : i + batch_size]
            draws = []
            for p, y in batch:
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, p.parcel_id, y])
                )
                draws.append(
                    sample_pixels(p.samples[y - 1], model.dims.sample_pixels, rng)
                )
            z = batch_logits(model, batch, draws, feature_rng, histories)
            for (p, y), logits in zip(batch, np.asarray(z.data)):
                records.append(
                    PredictionRecord(
                        parcel_id=p.parcel_id,
                        year_index=y,
                        logits=np.array(logits),
                        true_label=p.labels[y - 1],
                    )
                )
    return records


def throughput(model, parcels, seed=0):
    """Parcel-years per second for batched inference."""
    t0 = time.perf_counter()
    records = predict(model, parcels, seed=seed)
    dt = time.perf_counter() - t0
    return len(records) / dt, records
