"""Model variants, the two training stages, and inference.

Five variants form the ablation ladder:

  single          classify the current segment's pooled features alone
  single_with_age the same, with the subject's normalized age appended
                  (the deliberately age-biased baseline)
  anchor          classify the variation embedding [E(current), E(anchor)]
  anchor_vm       anchor, with the encoder pre-trained by variation modeling
  anchor_vm_abm   anchor_vm, fine-tuned with the adversarial age estimator
                  behind a gradient reversal layer

Training is two-stage: `pretrain_vm` fits the encoder with a triplet loss
over noise-conditioned segment pairs, `finetune` trains encoder plus heads
with BCE (and, for the adversarial variant, BCE + MSE through the GRL, a
single backward pass realizing the min-max). At inference only the current
segment and the subject's anchor segment are needed; age is consumed only
by the single_with_age baseline.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor
from .data import Dataset, NoiseLevel, Segment, NoQuietSegment, sample_triplets, select_anchor
from .seeding import STREAM_INIT, STREAM_SAMPLING, STREAM_TRAIN, substream

__all__ = [
    "VariantInputMismatch",
    "NoValidTriplets",
    "EmptyDataset",
    "MissingAnchors",
    "ModelVariant",
    "VARIANT_LADDER",
    "PretrainConfig",
    "FinetuneConfig",
    "ModelBundle",
    "encode_segment",
    "encode_variation",
    "pretrain_vm",
    "finetune",
    "predict",
    "predict_batch",
    "anchors_by_subject",
    "training_instances",
    "save_bundle",
    "load_bundle",
]

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1


class VariantInputMismatch(ValueError):
    """predict() received inputs that do not fit the bundle's variant."""


class NoValidTriplets(ValueError):
    """No subject in the dataset yields a triplet under the noise filter."""


class EmptyDataset(ValueError):
    """Training requires a non-empty dataset."""


class MissingAnchors(LookupError):
    """Every subject lacks an anchor segment."""


class ModelVariant(Enum):
    SINGLE = "single"
    SINGLE_WITH_AGE = "single_with_age"
    ANCHOR = "anchor"
    ANCHOR_VM = "anchor_vm"
    ANCHOR_VM_ABM = "anchor_vm_abm"

    @property
    def uses_anchor(self) -> bool:
        return self in (ModelVariant.ANCHOR, ModelVariant.ANCHOR_VM, ModelVariant.ANCHOR_VM_ABM)

    @property
    def uses_age_input(self) -> bool:
        return self is ModelVariant.SINGLE_WITH_AGE

    @property
    def uses_age_adversary(self) -> bool:
        return self is ModelVariant.ANCHOR_VM_ABM

    @property
    def uses_pretraining(self) -> bool:
        return self in (ModelVariant.ANCHOR_VM, ModelVariant.ANCHOR_VM_ABM)


# Ablation ladder in reporting order.
VARIANT_LADDER = (
    ModelVariant.SINGLE,
    ModelVariant.SINGLE_WITH_AGE,
    ModelVariant.ANCHOR,
    ModelVariant.ANCHOR_VM,
    ModelVariant.ANCHOR_VM_ABM,
)


@dataclass
class PretrainConfig:
    epochs: int = 15
    lr: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    noise_filter: frozenset = frozenset({NoiseLevel.DB75})
    triplets_per_subject_per_epoch: int = 4
    hidden_dim: int = 32
    weight_decay: float = 0.01

    def validate(self) -> None:
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs, lr and batch_size must be positive")
        if not self.noise_filter:
            raise ValueError("noise_filter must not be empty")


@dataclass
class FinetuneConfig:
    epochs: int = 15
    lr: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    hidden_dim: int = 32
    weight_decay: float = 0.01

    def validate(self) -> None:
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs, lr and batch_size must be positive")


@dataclass
class ModelBundle:
    """Everything needed for inference: encoder, heads, and normalization."""

    variant: ModelVariant
    encoder: nn.GruParams
    hl_head: nn.MlpParams
    age_head: nn.MlpParams | None
    age_norm: tuple[float, float]  # (mean, std) of training-set subject ages

    def __post_init__(self) -> None:
        h = self.encoder.hidden_dim
        expected = {
            ModelVariant.SINGLE: h,
            ModelVariant.SINGLE_WITH_AGE: h + 1,
            ModelVariant.ANCHOR: 2 * h,
            ModelVariant.ANCHOR_VM: 2 * h,
            ModelVariant.ANCHOR_VM_ABM: 2 * h,
        }[self.variant]
        if self.hl_head.input_dim != expected:
            raise ad.ShapeMismatch(
                f"{self.variant.value} expects head input {expected}, "
                f"got {self.hl_head.input_dim}"
            )
        if self.variant.uses_age_adversary:
            if self.age_head is None or self.age_head.input_dim != 2 * h:
                raise ad.ShapeMismatch("adversarial variant needs a 2H age head")
        elif self.age_head is not None:
            raise ad.ShapeMismatch("age head is only part of the adversarial variant")
        if not self.age_norm[1] > 0:
            raise ValueError("age_norm std must be positive")

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"encoder.{n}", a) for n, a in self.encoder.named_arrays()]
        out += [(f"hl_head.{n}", a) for n, a in self.hl_head.named_arrays()]
        if self.age_head is not None:
            out += [(f"age_head.{n}", a) for n, a in self.age_head.named_arrays()]
        return out

    def normalize_age(self, age: float) -> float:
        mean, std = self.age_norm
        return (age - mean) / std


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


def encode_segment(segment: Segment, encoder, tape: Tape | None = None) -> Tensor:
    """f = avg_pool(gru_forward(frames)) with h0 = 0; one H-vector."""
    states = nn.gru_forward(segment.frames, encoder, tape=tape)
    return nn.avg_pool(states)


def encode_variation(s1: Segment, s2: Segment, encoder, tape: Tape | None = None) -> Tensor:
    """v = concat(E(s1), E(s2)): first H entries from s1, last H from s2."""
    if s1.frames.shape[1] != s2.frames.shape[1]:
        raise ad.ShapeMismatch("segments have different feature dims")
    if tape is None:
        tape = Tape()
    bound = encoder.bind(tape) if isinstance(encoder, nn.GruParams) else encoder
    f1 = encode_segment(s1, bound, tape=tape)
    f2 = encode_segment(s2, bound, tape=tape)
    return ad.concat_last([f1, f2])


def _pad_batch(segments: Sequence[Segment]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([s.frames.shape[0] for s in segments])
    t_max = int(lengths.max())
    d = segments[0].frames.shape[1]
    padded = np.zeros((len(segments), t_max, d))
    for i, s in enumerate(segments):
        padded[i, : lengths[i]] = s.frames
    return padded, lengths


def _encode_batch(tape: Tape, bound: nn.GruTensors, segments: Sequence[Segment]) -> Tensor:
    padded, lengths = _pad_batch(segments)
    return nn.gru_encode_pooled(tape, bound, padded, lengths)


# ---------------------------------------------------------------------------
# Stage one: variation-modeling pre-training
# ---------------------------------------------------------------------------


def pretrain_vm(
    dataset: Dataset,
    config: PretrainConfig,
    encoder: nn.GruParams | None = None,
) -> tuple[nn.GruParams, list[float]]:
    """Triplet-loss pre-training of the encoder on noise-conditioned pairs.

    Per epoch and subject, triplets (s_n, s_q1, s_q2) are sampled with s_n a
    noisy segment from the configured filter and s_q1, s_q2 quiet segments.
    The loss pulls v_a = V(s_n, s_q1) toward v_p = V(s_n, s_q2) and pushes it
    from v_n = V(s_q1, s_q2). Returns the trained encoder and the per-epoch
    mean loss. Only segments of the given dataset are touched, so the caller
    controls fold hygiene by passing the training folds.
    """
    config.validate()
    by_subject = dataset.segments_by_subject()
    eligible = []
    for subject_id in sorted(by_subject):
        segs = by_subject[subject_id]
        quiet = sum(1 for s in segs if s.noise_level.is_quiet)
        noisy = sum(1 for s in segs if s.noise_level in config.noise_filter)
        if quiet >= 2 and noisy >= 1:
            eligible.append(subject_id)
    if not eligible:
        raise NoValidTriplets(
            f"no subject has a valid triplet under filter "
            f"{sorted(l.value for l in config.noise_filter)}"
        )

    if encoder is None:
        encoder = nn.init_gru_params(
            dataset.manifest.feature_dim, config.hidden_dim,
            substream(config.seed, STREAM_INIT, 0),
        )
    else:
        encoder = encoder.copy()
    params = [a for _, a in encoder.named_arrays()]
    state = nn.AdamWState.for_params(params, lr=config.lr, weight_decay=config.weight_decay)
    sampling_rng = substream(config.seed, STREAM_SAMPLING, 0)
    order_rng = substream(config.seed, STREAM_TRAIN, 0)

    trace = []
    for _ in range(config.epochs):
        triplets = []
        for subject_id in eligible:
            triplets.extend(sample_triplets(
                by_subject[subject_id], config.noise_filter,
                config.triplets_per_subject_per_epoch, sampling_rng,
            ))
        order = order_rng.permutation(len(triplets))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [triplets[i] for i in order[start : start + config.batch_size]]
            b = len(batch)
            segs = [t.s_n for t in batch] + [t.s_q1 for t in batch] + [t.s_q2 for t in batch]
            tape = Tape()
            bound = encoder.bind(tape)
            pooled = _encode_batch(tape, bound, segs)
            e_n = ad.take_rows(pooled, 0, b)
            e_q1 = ad.take_rows(pooled, b, 2 * b)
            e_q2 = ad.take_rows(pooled, 2 * b, 3 * b)
            v_a = ad.concat_last([e_n, e_q1])
            v_p = ad.concat_last([e_n, e_q2])
            v_n = ad.concat_last([e_q1, e_q2])
            loss = ad.mean_over_axis(nn.triplet_loss(v_a, v_p, v_n), 0)
            if not np.isfinite(loss.data):
                raise ad.NonFinite("pre-training loss diverged")
            tape.backward(loss)
            nn.adamw_step(params, [t.grad for t in bound], state)
            total += float(loss.data) * b
            seen += b
        trace.append(total / seen)
    return encoder, trace


# ---------------------------------------------------------------------------
# Stage two: fine-tuning
# ---------------------------------------------------------------------------


def anchors_by_subject(dataset: Dataset) -> tuple[dict[str, Segment], list[str]]:
    """Each subject's anchor segment, plus the subjects that lack one."""
    anchors: dict[str, Segment] = {}
    missing: list[str] = []
    for subject_id, segs in dataset.segments_by_subject().items():
        try:
            anchors[subject_id] = select_anchor(segs)
        except NoQuietSegment:
            missing.append(subject_id)
    return anchors, missing


def training_instances(dataset: Dataset, variant: ModelVariant) -> tuple[list[Segment], list[str]]:
    """The (current segment) instances a variant trains and is evaluated on.

    All variants use non-anchor segments, which keeps evaluation sets
    identical across the ladder. Anchor variants additionally skip subjects
    without an anchor (logged); the single variants keep such subjects.
    """
    anchors, missing = anchors_by_subject(dataset)
    instances = []
    for subject_id, segs in dataset.segments_by_subject().items():
        if variant.uses_anchor and subject_id in set(missing):
            continue
        anchor = anchors.get(subject_id)
        for seg in segs:
            if anchor is not None and seg is anchor:
                continue
            instances.append(seg)
    if variant.uses_anchor and missing:
        logger.info("skipping %d anchor-less subjects: %s", len(missing), missing)
    return instances, missing


def _age_stats(dataset: Dataset) -> tuple[float, float]:
    ages = np.array([dataset.subjects[s].age for s in dataset.subject_ids()], dtype=np.float64)
    mean = float(ages.mean())
    std = float(ages.std(ddof=1)) if len(ages) > 1 else 0.0
    if std == 0.0:
        std = 1.0  # degenerate training set; keep normalization well-defined
    return mean, std


def finetune(
    dataset: Dataset,
    encoder: nn.GruParams | None,
    variant: ModelVariant,
    config: FinetuneConfig,
) -> tuple[ModelBundle, dict[str, list[float]]]:
    """Train encoder and heads for hearing-loss classification.

    `encoder` is a pre-trained GruParams (copied, not mutated) or None for a
    fresh initialization. For the adversarial variant the total loss is
    mean BCE + mean MSE on normalized age, with the gradient reversal layer
    flipping the age gradient into the encoder; one optimizer covers all
    trainable parameters in a single backward pass per batch.
    """
    config.validate()
    if not dataset.segments:
        raise EmptyDataset("no segments to fine-tune on")
    instances, missing = training_instances(dataset, variant)
    if variant.uses_anchor and not instances:
        raise MissingAnchors("every subject lacks an anchor segment")
    anchors, _ = anchors_by_subject(dataset)

    d = dataset.manifest.feature_dim
    init_rng = substream(config.seed, STREAM_INIT, 1)
    if encoder is None:
        encoder = nn.init_gru_params(d, config.hidden_dim, init_rng)
    else:
        encoder = encoder.copy()
    h = encoder.hidden_dim
    if variant.uses_anchor:
        head_in = 2 * h
    elif variant.uses_age_input:
        head_in = h + 1
    else:
        head_in = h
    hl_head = nn.init_mlp_params([head_in, h, 1], init_rng)
    age_head = nn.init_mlp_params([2 * h, h, 1], init_rng) if variant.uses_age_adversary else None
    age_norm = _age_stats(dataset)

    bundle = ModelBundle(variant, encoder, hl_head, age_head, age_norm)
    params = [a for _, a in bundle.named_arrays()]
    state = nn.AdamWState.for_params(params, lr=config.lr, weight_decay=config.weight_decay)
    order_rng = substream(config.seed, STREAM_TRAIN, 1)

    labels_all = np.array(
        [dataset.subjects[seg.subject_id].hearing_status for seg in instances], dtype=np.float64
    )
    ages_all = np.array(
        [bundle.normalize_age(dataset.subjects[seg.subject_id].age) for seg in instances]
    )

    traces: dict[str, list[float]] = {"total": [], "bce": []}
    if variant.uses_age_adversary:
        traces["mse"] = []
    for _ in range(config.epochs):
        order = order_rng.permutation(len(instances))
        sums = {k: 0.0 for k in traces}
        seen = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = [instances[i] for i in idx]
            b = len(batch)
            tape = Tape()
            bound_enc = encoder.bind(tape)
            bound_hl = hl_head.bind(tape)

            if variant.uses_anchor:
                segs = batch + [anchors[seg.subject_id] for seg in batch]
                pooled = _encode_batch(tape, bound_enc, segs)
                features = ad.concat_last([ad.take_rows(pooled, 0, b), ad.take_rows(pooled, b, 2 * b)])
            else:
                features = _encode_batch(tape, bound_enc, batch)
                if variant.uses_age_input:
                    age_col = tape.tensor(ages_all[idx].reshape(b, 1))
                    features = ad.concat_last([features, age_col])

            logits = ad.reshape(mlp_logits(features, bound_hl), (b,))
            bce = ad.mean_over_axis(nn.bce_with_logits(logits, labels_all[idx]), 0)
            sums["bce"] += float(bce.data) * b
            if variant.uses_age_adversary:
                bound_age = age_head.bind(tape)
                a_hat = ad.reshape(mlp_logits(nn.grl_apply(features), bound_age), (b,))
                mse = ad.mean_over_axis(nn.mse_loss(a_hat, ages_all[idx]), 0)
                loss = ad.add(bce, mse)
                sums["mse"] += float(mse.data) * b
            else:
                loss = bce
            if not np.isfinite(loss.data):
                raise ad.NonFinite("fine-tuning loss diverged")
            tape.backward(loss)
            grads = [t.grad for t in bound_enc] + [g for w, bias, _ in bound_hl for g in (w.grad, bias.grad)]
            if variant.uses_age_adversary:
                grads += [g for w, bias, _ in bound_age for g in (w.grad, bias.grad)]
            nn.adamw_step(params, grads, state)
            sums["total"] += float(loss.data) * b
            seen += b
        for k in traces:
            traces[k].append(sums[k] / seen)
    return bundle, traces


def mlp_logits(x: Tensor, bound_layers) -> Tensor:
    """mlp_forward over already-bound layers (helper for training loops)."""
    return nn.mlp_forward(x, bound_layers, tape=x.tape)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _check_inputs(variant: ModelVariant, anchor, age) -> None:
    if variant.uses_anchor and anchor is None:
        raise VariantInputMismatch(f"{variant.value} requires an anchor segment")
    if not variant.uses_anchor and anchor is not None:
        raise VariantInputMismatch(f"{variant.value} does not take an anchor")
    if variant.uses_age_input and age is None:
        raise VariantInputMismatch("single_with_age requires the subject's age")
    if not variant.uses_age_input and age is not None:
        raise VariantInputMismatch(f"{variant.value} does not take an age")


def predict(
    bundle: ModelBundle,
    current: Segment,
    anchor: Segment | None = None,
    age: float | None = None,
) -> float:
    """Probability of hearing loss for one segment; caller thresholds at 0.5."""
    _check_inputs(bundle.variant, anchor, age)
    return float(predict_batch(bundle, [current], [anchor] if anchor is not None else None,
                               [age] if age is not None else None)[0])


def predict_batch(
    bundle: ModelBundle,
    currents: Sequence[Segment],
    anchors: Sequence[Segment] | None = None,
    ages: Sequence[float] | None = None,
) -> np.ndarray:
    """Vectorized predict over many segments (one shared forward pass)."""
    variant = bundle.variant
    _check_inputs(variant, None if anchors is None else anchors[0],
                  None if ages is None else ages[0])
    b = len(currents)
    tape = Tape()
    bound_enc = bundle.encoder.bind(tape, trainable=False)
    if variant.uses_anchor:
        pooled = _encode_batch(tape, bound_enc, list(currents) + list(anchors))
        features = ad.concat_last([ad.take_rows(pooled, 0, b), ad.take_rows(pooled, b, 2 * b)])
    else:
        features = _encode_batch(tape, bound_enc, currents)
        if variant.uses_age_input:
            col = np.array([bundle.normalize_age(a) for a in ages]).reshape(b, 1)
            features = ad.concat_last([features, tape.tensor(col)])
    logits = mlp_logits(features, bundle.hl_head.bind(tape, trainable=False))
    probs = expit(logits.data.reshape(-1))
    tape.release()
    return probs


def variation_embeddings(bundle: ModelBundle, currents: Sequence[Segment],
                         anchors: Sequence[Segment]) -> np.ndarray:
    """V(current, anchor) rows for an anchor-variant bundle."""
    if not bundle.variant.uses_anchor:
        raise VariantInputMismatch("embeddings require an anchor-based variant")
    b = len(currents)
    tape = Tape()
    bound = bundle.encoder.bind(tape, trainable=False)
    pooled = _encode_batch(tape, bound, list(currents) + list(anchors))
    emb = np.concatenate([pooled.data[:b], pooled.data[b:]], axis=1)
    tape.release()
    return emb


# ---------------------------------------------------------------------------
# Bundle serialization
# ---------------------------------------------------------------------------


def _mlp_to_dict(mlp: nn.MlpParams) -> list[dict]:
    return [
        {"weight": l.weight.tolist(), "bias": l.bias.tolist(), "activation": l.activation}
        for l in mlp.layers
    ]


def _mlp_from_dict(raw: list[dict]) -> nn.MlpParams:
    return nn.MlpParams([
        nn.MlpLayer(np.asarray(l["weight"], dtype=np.float64),
                    np.asarray(l["bias"], dtype=np.float64),
                    l["activation"])
        for l in raw
    ])


def save_bundle(bundle: ModelBundle, path) -> None:
    payload = {
        "bundle_version": BUNDLE_VERSION,
        "variant": bundle.variant.value,
        "input_dim": bundle.encoder.input_dim,
        "hidden_dim": bundle.encoder.hidden_dim,
        "age_norm": list(bundle.age_norm),
        "encoder": {n: a.tolist() for n, a in bundle.encoder.named_arrays()},
        "hl_head": _mlp_to_dict(bundle.hl_head),
        "age_head": None if bundle.age_head is None else _mlp_to_dict(bundle.age_head),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_bundle(path) -> ModelBundle:
    raw = json.loads(Path(path).read_text())
    if raw.get("bundle_version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {raw.get('bundle_version')}")
    gru_names = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")
    encoder = nn.GruParams(**{
        name: np.asarray(raw["encoder"][name], dtype=np.float64) for name in gru_names
    })
    return ModelBundle(
        variant=ModelVariant(raw["variant"]),
        encoder=encoder,
        hl_head=_mlp_from_dict(raw["hl_head"]),
        age_head=None if raw["age_head"] is None else _mlp_from_dict(raw["age_head"]),
        age_norm=tuple(raw["age_norm"]),
    )
