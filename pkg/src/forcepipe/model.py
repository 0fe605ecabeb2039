"""Deep multimodal CNN: per-modality base learners, fusion and regression head.

Architectures follow the published hyper-parameter tables:

* intra-subject: EMG learners 2 blocks of 16/16 filters (3x3 conv, 3x3 pool),
  IMU learner 32/64 filters (2x2 conv, 2x2 pool), one FC layer of 128;
* inter-subject: 64/128 filters for every learner (the dynamic IMU learner
  adds a third 128 block), no batch normalization, FC 128-256 (isotonic),
  128-128 (isokinetic) or 128-256-256 (dynamic).

Each conv block is conv -> [batchnorm] -> ReLU -> maxpool; dropout follows
the last block of every learner. Inputs carry a singleton channel axis.
"""

from __future__ import annotations

import enum
import json
import logging
from pathlib import Path
from dataclasses import dataclass, field, replace

import numpy as np

from forcepipe.dataset import Condition
from forcepipe.dsp import SegmentSpec
from forcepipe.errors import DivergedLoss, EmptySet, MissingModel, ShapeMismatch, UnsupportedCombination
from forcepipe.nn import checkpoint
from forcepipe.nn import (
    Adam,
    BatchNorm2D,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2D,
    ReLU,
    Sequential,
    mse_loss,
)

log = logging.getLogger(__name__)


class Scheme(str, enum.Enum):
    INTRA = "intra"
    INTER = "inter"


class Fusion(str, enum.Enum):
    FEATURE = "feature"
    INPUT = "input"
    SCORE = "score"


class Modality(str, enum.Enum):
    EMG_TIME = "emg_time"
    EMG_FREQ = "emg_freq"
    IMU = "imu"


ALL_MODALITIES = (Modality.EMG_TIME, Modality.EMG_FREQ, Modality.IMU)
IMU_SENSORS = {"acc": (0, 1, 2), "gyro": (3, 4, 5), "mag": (6, 7, 8)}
FUSED_KEY = "fused"
INFER_BUDGET_BYTES = 256 * 2**20


def parse_choice(enum_cls, value, what):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(str(value).lower())
    except ValueError:
        raise UnsupportedCombination(f"unknown {what} {value!r}") from None


@dataclass(frozen=True)
class ConvBlockSpec:
    n_filters: int
    filter_size: int
    pool_size: int
    use_batchnorm: bool = True


@dataclass(frozen=True)
class BaseLearnerSpec:
    modality: str
    blocks: tuple[ConvBlockSpec, ...]
    dropout: float = 0.5


@dataclass(frozen=True)
class HeadSpec:
    fc_sizes: tuple[int, ...]


def _scaled(n: int, width: float) -> int:
    return max(1, int(round(n * width)))


def learner_spec(scheme, condition, modality, width: float = 1.0) -> BaseLearnerSpec:
    scheme = parse_choice(Scheme, scheme, "scheme")
    condition = Condition.parse(condition)
    modality = parse_choice(Modality, modality, "modality")
    bn = scheme is Scheme.INTRA
    if modality is Modality.IMU:
        size = 2
        if scheme is Scheme.INTRA:
            filters = (32, 64)
        elif condition is Condition.DYNAMIC:
            filters = (64, 128, 128)
        else:
            filters = (64, 128)
    else:
        size = 3
        filters = (16, 16) if scheme is Scheme.INTRA else (64, 128)
    blocks = tuple(ConvBlockSpec(_scaled(f, width), size, size, bn) for f in filters)
    return BaseLearnerSpec(modality.value, blocks)


def input_level_spec(scheme, width: float = 1.0) -> BaseLearnerSpec:
    bn = parse_choice(Scheme, scheme, "scheme") is Scheme.INTRA
    blocks = tuple(ConvBlockSpec(_scaled(f, width), 3, 3, bn) for f in (64, 128))
    return BaseLearnerSpec(FUSED_KEY, blocks)


def head_spec(scheme, condition, fusion=Fusion.FEATURE, width: float = 1.0) -> HeadSpec:
    scheme = parse_choice(Scheme, scheme, "scheme")
    condition = Condition.parse(condition)
    if scheme is Scheme.INTRA or parse_choice(Fusion, fusion, "fusion") is Fusion.INPUT:
        sizes = (128,)
    else:
        sizes = {
            Condition.ISOTONIC: (128, 256),
            Condition.ISOKINETIC: (128, 128),
            Condition.DYNAMIC: (128, 256, 256),
        }[condition]
    return HeadSpec(tuple(_scaled(s, width) for s in sizes))


def build_learner(spec: BaseLearnerSpec, rng: np.random.Generator, dropout_seed: int,
                  input_hw: tuple[int, int] | None = None) -> Sequential:
    """Conv blocks + dropout + flatten.

    With ``input_hw`` given, a pool dimension larger than the current map is
    clamped to it, so narrow inputs (a single 3-axis IMU sensor) still pass
    through every block instead of pooling down to zero width.
    """
    layers = []
    in_ch = 1
    h, w = input_hw if input_hw is not None else (None, None)
    for block in spec.blocks:
        layers.append(Conv2D(in_ch, block.n_filters, block.filter_size, padding="same", rng=rng))
        if block.use_batchnorm:
            layers.append(BatchNorm2D(block.n_filters))
        layers.append(ReLU())
        ph = pw = block.pool_size
        if h is not None:
            ph, pw = max(1, min(ph, h)), max(1, min(pw, w))
            h, w = h // ph, w // pw
        layers.append(MaxPool2D((ph, pw)))
        in_ch = block.n_filters
    layers[0].input_grad = False
    layers.append(Dropout(spec.dropout, seed=dropout_seed))
    layers.append(Flatten())
    return Sequential(layers)


def build_head(n_in: int, spec: HeadSpec, rng: np.random.Generator) -> Sequential:
    layers = []
    for size in spec.fc_sizes:
        layers += [Dense(n_in, size, rng=rng), ReLU()]
        n_in = size
    layers.append(Dense(n_in, 1, rng=rng))
    return Sequential(layers)


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

@dataclass
class SegmentBatch:
    """Stacked model inputs. Arrays are ``N x H x W``; ``force`` is ``N``."""

    emg_time: np.ndarray
    emg_freq: np.ndarray
    imu: np.ndarray
    force: np.ndarray
    # provenance: index into ``trial_ids`` and window centre time per segment
    trial_index: np.ndarray | None = None
    time_s: np.ndarray | None = None
    trial_ids: tuple[str, ...] = ()
    subject_ids: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.force)

    def inputs(self) -> dict[str, np.ndarray]:
        return {"emg_time": self.emg_time, "emg_freq": self.emg_freq, "imu": self.imu}

    def take(self, idx) -> "SegmentBatch":
        idx = np.asarray(idx)
        return replace(
            self,
            emg_time=self.emg_time[idx],
            emg_freq=self.emg_freq[idx],
            imu=self.imu[idx],
            force=self.force[idx],
            trial_index=None if self.trial_index is None else self.trial_index[idx],
            time_s=None if self.time_s is None else self.time_s[idx],
        )

    @classmethod
    def from_segments(cls, segments) -> "SegmentBatch":
        """Stack :class:`forcepipe.preprocess.TrialSegments` in the given order."""
        segments = [s for s in segments if len(s)]
        if not segments:
            raise EmptySet("no segments to stack")
        return cls(
            emg_time=np.concatenate([s.emg_time for s in segments]),
            emg_freq=np.concatenate([s.emg_freq for s in segments]),
            imu=np.concatenate([s.imu for s in segments]),
            force=np.concatenate([s.force for s in segments]),
            trial_index=np.concatenate([np.full(len(s), i) for i, s in enumerate(segments)]),
            time_s=np.concatenate([s.time_s for s in segments]),
            trial_ids=tuple(s.trial_id for s in segments),
            subject_ids=tuple(s.subject_id for s in segments),
        )


@dataclass
class Standardizer:
    """Zero-mean unit-variance scaling fitted on a training split.

    EMG-time and IMU statistics are per channel, EMG-frequency statistics per
    (bin, channel). A variance below ``1e-12`` keeps scale 1 (the channel is
    centred but not scaled).
    """

    means: dict[str, np.ndarray] = field(default_factory=dict)
    scales: dict[str, np.ndarray] = field(default_factory=dict)
    target_mean: float = 0.0
    target_scale: float = 1.0

    MIN_VAR = 1e-12

    @classmethod
    def fit(cls, batch: SegmentBatch) -> "Standardizer":
        if len(batch) == 0:
            raise EmptySet("cannot fit standardization on an empty batch")
        st = cls()
        for name, x, axes in (
            ("emg_time", batch.emg_time, (0, 1)),
            ("emg_freq", batch.emg_freq, (0,)),
            ("imu", batch.imu, (0, 1)),
        ):
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            degenerate = var < cls.MIN_VAR
            if np.any(degenerate):
                log.warning("%s: %d channel(s) with degenerate variance left unscaled", name, int(degenerate.sum()))
            st.means[name] = mean
            st.scales[name] = np.where(degenerate, 1.0, np.sqrt(np.where(degenerate, 1.0, var)))
        tvar = float(batch.force.var())
        st.target_mean = float(batch.force.mean())
        st.target_scale = 1.0 if tvar < cls.MIN_VAR else float(np.sqrt(tvar))
        return st

    def transform(self, batch: SegmentBatch) -> SegmentBatch:
        return replace(
            batch,
            emg_time=(batch.emg_time - self.means["emg_time"]) / self.scales["emg_time"],
            emg_freq=(batch.emg_freq - self.means["emg_freq"]) / self.scales["emg_freq"],
            imu=(batch.imu - self.means["imu"]) / self.scales["imu"],
            force=self.standardize_target(batch.force),
        )

    def standardize_target(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_scale

    def destandardize_target(self, z):
        return np.asarray(z, dtype=np.float64) * self.target_scale + self.target_mean

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"mean_{k}": v for k, v in self.means.items()}
        out.update({f"scale_{k}": v for k, v in self.scales.items()})
        out["target"] = np.array([self.target_mean, self.target_scale])
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "Standardizer":
        st = cls()
        for key in arrays:
            if key.startswith("mean_"):
                st.means[key[5:]] = np.asarray(arrays[key])
            elif key.startswith("scale_"):
                st.scales[key[6:]] = np.asarray(arrays[key])
        st.target_mean, st.target_scale = (float(v) for v in arrays["target"])
        return st


def standardize_inputs(train_stats: Standardizer, batch: SegmentBatch) -> SegmentBatch:
    return train_stats.transform(batch)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

class MultimodalModel:
    def __init__(self, scheme, condition, fusion, segment: SegmentSpec, modalities=ALL_MODALITIES,
                 imu_channels=None, width: float = 1.0, seed: int = 0):
        self.scheme = parse_choice(Scheme, scheme, "scheme")
        self.condition = Condition.parse(condition)
        self.fusion = parse_choice(Fusion, fusion, "fusion")
        self.segment = segment
        mods = [parse_choice(Modality, m, "modality") for m in modalities]
        self.modalities = tuple(m.value for m in ALL_MODALITIES if m in mods)
        if not self.modalities:
            raise UnsupportedCombination("at least one modality is required")
        self.imu_channels = tuple(range(9)) if imu_channels is None else tuple(int(c) for c in imu_channels)
        if not self.imu_channels or any(not 0 <= c < 9 for c in self.imu_channels):
            raise UnsupportedCombination(f"invalid IMU channel subset {self.imu_channels}")
        self.width = width
        self.seed = seed
        self.optimizer_state = None

        w = segment.window_len
        self.input_shapes = {
            "emg_time": (1, w, 28),
            "emg_freq": (1, segment.psd_bins, 28),
            "imu": (1, w, len(self.imu_channels)),
        }
        rng = np.random.default_rng(seed)
        self.learners: dict[str, Sequential] = {}
        self.heads: dict[str, Sequential] = {}
        self.flatten_sizes: dict[str, int] = {}

        if self.fusion is Fusion.INPUT:
            width_cols = sum(self.input_shapes[m][2] for m in self.modalities)
            self.input_shapes = {FUSED_KEY: (1, w, width_cols)}
            spec = input_level_spec(self.scheme, width)
            self.learners[FUSED_KEY] = build_learner(spec, rng, seed * 7919 + 1, self.input_shapes[FUSED_KEY][1:])
            self.flatten_sizes[FUSED_KEY] = self._flat(FUSED_KEY)
        else:
            for i, m in enumerate(self.modalities):
                spec = learner_spec(self.scheme, self.condition, m, width)
                self.learners[m] = build_learner(spec, rng, seed * 7919 + 1 + i, self.input_shapes[m][1:])
                self.flatten_sizes[m] = self._flat(m)

        hspec = head_spec(self.scheme, self.condition, self.fusion, width)
        if self.fusion is Fusion.SCORE:
            for m in self.modalities:
                self.heads[m] = build_head(self.flatten_sizes[m], hspec, rng)
        else:
            self.heads[FUSED_KEY] = build_head(sum(self.flatten_sizes.values()), hspec, rng)

    def _flat(self, key) -> int:
        shape = self.learners[key].output_shape(self.input_shapes[key])
        if shape[0] <= 0:
            raise UnsupportedCombination(f"{key}: input too small for the conv stack")
        return int(shape[0])

    # -- structure ---------------------------------------------------------

    @property
    def concat_width(self) -> int:
        return sum(self.flatten_sizes.values())

    def layers(self):
        out = []
        for key in self.learners:
            out.extend(self.learners[key].layers)
        for key in self.heads:
            out.extend(self.heads[key].layers)
        return out

    def parameters(self):
        return [(layer, name) for layer in self.layers() for name in layer.params]

    def n_params(self) -> int:
        return sum(layer.params[name].size for layer, name in self.parameters())

    def has_batchnorm(self) -> bool:
        return any(isinstance(layer, BatchNorm2D) for layer in self.layers())

    def describe(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "condition": self.condition.value,
            "fusion": self.fusion.value,
            "segment_ms": self.segment.duration_ms,
            "modalities": list(self.modalities),
            "imu_channels": list(self.imu_channels),
            "input_shapes": {k: list(v) for k, v in self.input_shapes.items()},
            "flatten_sizes": dict(self.flatten_sizes),
            "n_params": self.n_params(),
            "learners": {k: repr(v) for k, v in self.learners.items()},
            "heads": {k: repr(v) for k, v in self.heads.items()},
        }

    # -- data plumbing -----------------------------------------------------

    def model_inputs(self, batch) -> dict[str, np.ndarray]:
        """Map a batch (or dict of arrays) to ``N x 1 x H x W`` learner inputs."""
        raw = batch.inputs() if isinstance(batch, SegmentBatch) else dict(batch)
        raw["imu"] = raw["imu"][..., list(self.imu_channels)] if "imu" in raw else None
        if self.fusion is Fusion.INPUT:
            w = self.segment.window_len
            parts = []
            for m in self.modalities:
                x = raw[m]
                if x.shape[1] < w:
                    x = np.concatenate([x, np.zeros((x.shape[0], w - x.shape[1], x.shape[2]))], axis=1)
                parts.append(x)
            fused = np.concatenate(parts, axis=2)
            out = {FUSED_KEY: fused[:, None]}
        else:
            out = {m: raw[m][:, None] for m in self.modalities}
        for key, x in out.items():
            if x.shape[1:] != self.input_shapes[key]:
                raise ShapeMismatch(f"{key}: expected N x {self.input_shapes[key]}, got {x.shape}")
        return out

    # -- forward / backward ------------------------------------------------

    def forward(self, inputs: dict[str, np.ndarray], training: bool = False) -> np.ndarray:
        """Predictions (standardized units) for already-mapped learner inputs."""
        feats = {k: self.learners[k].forward(inputs[k], training) for k in self.learners}
        if self.fusion is Fusion.SCORE:
            preds = [self.heads[k].forward(feats[k], training)[:, 0] for k in self.learners]
            self._score_k = len(preds)
            return np.mean(preds, axis=0)
        z = np.concatenate([feats[k] for k in self.learners], axis=1) if len(feats) > 1 else next(iter(feats.values()))
        return self.heads[FUSED_KEY].forward(z, training)[:, 0]

    def backward(self, grad: np.ndarray) -> None:
        grad = grad.reshape(-1, 1)
        if self.fusion is Fusion.SCORE:
            for k in self.learners:
                g = self.heads[k].backward(grad / self._score_k)
                self.learners[k].backward(g)
            return
        gz = self.heads[FUSED_KEY].backward(grad)
        start = 0
        for k in self.learners:
            size = self.flatten_sizes[k]
            self.learners[k].backward(gz[:, start:start + size])
            start += size

    def infer_chunk(self, budget_bytes: int = INFER_BUDGET_BYTES) -> int:
        """Samples per inference pass so conv activations stay within ``budget_bytes``."""
        floats = 0
        for k, seq in self.learners.items():
            c, h, w = self.input_shapes[k]
            widest = max((l.params["W"].shape[0] for l in seq.layers if isinstance(l, Conv2D)), default=c)
            # conv output, its im2col and the next block's im2col are the big buffers
            floats += 3 * h * w * widest
        return int(np.clip(budget_bytes // (8 * floats), 1, 512))

    def predict(self, batch, chunk: int | None = None) -> np.ndarray:
        """Infer-mode predictions in standardized target units."""
        inputs = self.model_inputs(batch)
        n = next(iter(inputs.values())).shape[0]
        chunk = chunk or self.infer_chunk()
        out = np.empty(n)
        for s in range(0, n, chunk):
            out[s:s + chunk] = self.forward({k: v[s:s + chunk] for k, v in inputs.items()}, training=False)
        return out

    def base_predictions(self, batch) -> dict[str, np.ndarray]:
        """Per-modality predictions of a score-level model (infer mode)."""
        if self.fusion is not Fusion.SCORE:
            raise UnsupportedCombination("per-modality predictions exist only for score-level fusion")
        inputs = self.model_inputs(batch)
        chunk = self.infer_chunk()
        return {
            k: self.heads[k].forward(_learner_features(self.learners[k], inputs[k], chunk), False)[:, 0]
            for k in self.learners
        }


def build_model(scheme, condition, fusion=Fusion.FEATURE, segment=SegmentSpec(50), modalities=ALL_MODALITIES,
                imu_channels=None, width: float = 1.0, seed: int = 0) -> MultimodalModel:
    if isinstance(segment, int):
        segment = SegmentSpec(segment)
    return MultimodalModel(scheme, condition, fusion, segment, modalities, imu_channels, width, seed)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 100
    pretrain_epochs: int | None = None
    seed: int = 0
    l2_coeff: float = 1e-4
    lr: float = 0.001
    finetune_learners: bool = True
    two_stage: bool = True


@dataclass
class TrainResult:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    pretrain_loss: dict[str, list[float]] = field(default_factory=dict)
    initial_val_loss: float | None = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm needs >= 2 samples: fold a trailing singleton into its neighbour
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _check_finite(value: float, where: str) -> float:
    if not np.isfinite(value):
        raise DivergedLoss(f"non-finite loss during {where}")
    return value


def _fit_network(forward, backward, optimizer, inputs, target, epochs, batch_size, rng, val_fn, where):
    """Generic mini-batch loop; returns per-epoch (train, val) losses."""
    n = len(target)
    train_curve, val_curve = [], []
    for epoch in range(epochs):
        total = 0.0
        for idx in _batches(n, batch_size, rng):
            pred = forward({k: v[idx] for k, v in inputs.items()})
            loss, grad = mse_loss(pred, target[idx])
            _check_finite(loss, f"{where} epoch {epoch}")
            backward(grad)
            optimizer.step()
            total += loss * len(idx)
        train_curve.append(total / n)
        if val_fn is not None:
            val_curve.append(_check_finite(val_fn(), f"{where} validation"))
    return train_curve, val_curve


def _infer_mse(model: MultimodalModel, batch: SegmentBatch | None):
    if batch is None or len(batch) == 0:
        return None
    return mse_loss(model.predict(batch), batch.force)[0]


def train(model: MultimodalModel, train_set: SegmentBatch, val_set: SegmentBatch | None = None,
          config: TrainConfig = TrainConfig()) -> TrainResult:
    """Train ``model`` in place on standardized batches.

    Feature-level fusion uses two stages when ``config.two_stage`` is set:
    every base learner is first fitted with a temporary single-neuron head,
    then the temporary heads are discarded and the fused head is trained,
    with the learners fine-tuned or frozen per ``finetune_learners``.
    Score-level learners are trained independently with their own heads;
    input-level fusion trains one CNN end to end.
    """
    if len(train_set) == 0:
        raise EmptySet("training set is empty")
    if val_set is not None and len(val_set) == 0:
        raise EmptySet("validation set is empty")
    rng = np.random.default_rng(config.seed)
    inputs = model.model_inputs(train_set)
    target = np.asarray(train_set.force, dtype=np.float64)
    result = TrainResult(initial_val_loss=_infer_mse(model, val_set))
    val_fn = (lambda: _infer_mse(model, val_set)) if val_set is not None else None
    pre_epochs = config.epochs if config.pretrain_epochs is None else config.pretrain_epochs
    opt_kw = dict(lr=config.lr, l2_coeff=config.l2_coeff)

    if model.fusion is Fusion.SCORE:
        # independent learners: each trained with its own permanent head
        for k, learner in model.learners.items():
            head = model.heads[k]
            net = Sequential(learner.layers + head.layers)
            opt = Adam(net.parameters(), **opt_kw)
            curve, _ = _fit_network(
                lambda x, net=net, k=k: net.forward(x[k], True)[:, 0],
                lambda g, net=net: net.backward(g.reshape(-1, 1)),
                opt, {k: inputs[k]}, target, config.epochs, config.batch_size, rng, None, f"learner {k}",
            )
            result.pretrain_loss[k] = curve
        result.train_loss = [
            float(np.mean(v)) for v in zip(*result.pretrain_loss.values())
        ] if config.epochs else []
        if val_fn is not None and config.epochs:
            result.val_loss = [val_fn()]
        model.optimizer_state = None
        return result

    if model.fusion is Fusion.FEATURE and config.two_stage and pre_epochs > 0:
        for i, (k, learner) in enumerate(model.learners.items()):
            temp = Dense(model.flatten_sizes[k], 1, rng=np.random.default_rng(config.seed * 131 + i))
            net = Sequential(learner.layers + [temp])
            opt = Adam(net.parameters(), **opt_kw)
            curve, _ = _fit_network(
                lambda x, net=net, k=k: net.forward(x[k], True)[:, 0],
                lambda g, net=net: net.backward(g.reshape(-1, 1)),
                opt, {k: inputs[k]}, target, pre_epochs, config.batch_size, rng, None, f"pretrain {k}",
            )
            result.pretrain_loss[k] = curve

    freeze = model.fusion is Fusion.FEATURE and config.two_stage and not config.finetune_learners
    if freeze:
        # frozen learners are deterministic in infer mode: compute features once
        feats = np.concatenate(
            [_learner_features(model.learners[k], inputs[k], model.infer_chunk()) for k in model.learners], axis=1
        )
        head = model.heads[FUSED_KEY]
        opt = Adam(head.parameters(), **opt_kw)
        train_curve, val_curve = _fit_network(
            lambda x: head.forward(x["z"], True)[:, 0],
            lambda g: head.backward(g.reshape(-1, 1)),
            opt, {"z": feats}, target, config.epochs, config.batch_size, rng, val_fn, "head",
        )
    else:
        opt = Adam(model.parameters(), **opt_kw)
        train_curve, val_curve = _fit_network(
            lambda x: model.forward(x, True),
            model.backward,
            opt, inputs, target, config.epochs, config.batch_size, rng, val_fn, "fused",
        )
    model.optimizer_state = opt.state
    result.train_loss, result.val_loss = train_curve, val_curve
    return result


def _learner_features(learner: Sequential, x: np.ndarray, chunk: int) -> np.ndarray:
    return np.concatenate([learner.forward(x[s:s + chunk], False) for s in range(0, len(x), chunk)])


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def build_args(model: MultimodalModel) -> dict:
    return {
        "scheme": model.scheme.value,
        "condition": model.condition.value,
        "fusion": model.fusion.value,
        "segment_ms": model.segment.duration_ms,
        "modalities": list(model.modalities),
        "imu_channels": list(model.imu_channels),
        "width": model.width,
        "seed": model.seed,
    }


def save_model(model: MultimodalModel, path, standardizer: Standardizer | None = None) -> Path:
    """Write ``<path>`` (binary weights) and ``<path>.json`` (build spec, scaling)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, model.layers(), model.optimizer_state)
    meta = {"build": build_args(model)}
    if standardizer is not None:
        meta["standardizer"] = {k: np.asarray(v).tolist() for k, v in standardizer.to_arrays().items()}
    Path(f"{path}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_model(path) -> tuple[MultimodalModel, Standardizer | None]:
    path = Path(path)
    side = Path(f"{path}.json")
    if not path.is_file() or not side.is_file():
        raise MissingModel(f"no trained model at {path}")
    meta = json.loads(side.read_text())
    b = meta["build"]
    model = build_model(b["scheme"], b["condition"], b["fusion"], SegmentSpec(b["segment_ms"]),
                        b["modalities"], b["imu_channels"], b["width"], b["seed"])
    model.optimizer_state = checkpoint.load(path, model.layers())
    st = None
    if "standardizer" in meta:
        st = Standardizer.from_arrays({k: np.asarray(v, dtype=np.float64) for k, v in meta["standardizer"].items()})
    return model, st
