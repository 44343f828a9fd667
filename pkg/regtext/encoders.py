"""
Document encoders and classifier
================================

A model is a composition function ``f`` (SWEM, CNN, BiLSTM or BiLSTM-MAX)
that maps embedded tokens ``X[b, T, d]`` to a document feature, followed
by a two-layer classifier ``g`` producing a class distribution.

Every encoder zeroes padding positions of its input and masks pooling and
recurrence by document length, so appending padding never changes an
output. Dropout masks come from a ``MaskBank`` so that a clean and a
perturbed forward pass can share them.
"""

import base64
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from regtext import gradcore as gc
from regtext.corpus import PAD_INDEX, DocumentBatch, Vocabulary
from regtext.errors import EncoderKindError, ShapeError
from regtext.gradcore import Tensor

logger = logging.getLogger(__name__)


class EncoderKind(str, Enum):
    SWEM_CONCAT = "SWEM_CONCAT"
    CNN = "CNN"
    BILSTM = "BILSTM"
    BILSTM_MAX = "BILSTM_MAX"

    @property
    def is_lstm(self) -> bool:
        return self in (EncoderKind.BILSTM, EncoderKind.BILSTM_MAX)


class ModelSpec(BaseModel):
    encoder_kind: EncoderKind = EncoderKind.SWEM_CONCAT
    embedding_dim: int = Field(default=300, ge=1)
    hidden_state: Optional[int] = Field(default=None, ge=1)
    num_kernel: Optional[int] = Field(default=None, ge=1)
    context_size: Optional[int] = Field(default=None, ge=1)
    stride: Optional[int] = Field(default=None, ge=1)
    classifier_dim: int = Field(default=300, ge=1)
    dropout_rate: float = Field(default=0.5, ge=0.0, lt=1.0)
    num_classes: int = Field(default=4, ge=2)
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _encoder_fields(self) -> "ModelSpec":
        cnn_fields = {"num_kernel": 300, "context_size": 7, "stride": 2}
        if self.encoder_kind == EncoderKind.CNN:
            for name, default in cnn_fields.items():
                if getattr(self, name) is None:
                    setattr(self, name, default)
        elif any(getattr(self, name) is not None for name in cnn_fields):
            raise ValueError("num_kernel/context_size/stride are only valid for the CNN encoder")
        if self.encoder_kind.is_lstm:
            if self.hidden_state is None:
                self.hidden_state = 256
        elif self.hidden_state is not None:
            raise ValueError("hidden_state is only valid for LSTM encoders")
        return self

    @property
    def feature_dim(self) -> int:
        """Width of the encoder output fed to the classifier."""
        if self.encoder_kind == EncoderKind.SWEM_CONCAT:
            return 2 * self.embedding_dim
        if self.encoder_kind == EncoderKind.CNN:
            return self.num_kernel
        return 2 * self.hidden_state


class MaskBank:
    """Dropout masks cached by layer name.

    The first request for a layer draws a mask from ``rng``; later requests
    for the same layer get the same mask back.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._masks: Dict[str, np.ndarray] = {}

    def mask(self, layer: str, shape: Tuple[int, ...], rate: float, dtype) -> np.ndarray:
        cached = self._masks.get(layer)
        if cached is None:
            cached = gc.dropout_mask(shape, rate, self.rng, dtype=dtype)
            self._masks[layer] = cached
        elif cached.shape != tuple(shape):
            raise ShapeError(f"dropout mask '{layer}'", [cached.shape, tuple(shape)])
        return cached

    def apply(self, layer: str, x: Tensor, rate: float, training: bool) -> Tensor:
        if not training or rate == 0.0:
            return x
        return x * self.mask(layer, x.shape, rate, x.dtype)


class ModelState:
    """Trainable tensors keyed by layer name, plus the spec that shaped them."""

    def __init__(self, spec: ModelSpec, params: Dict[str, Tensor], frequencies: Optional[np.ndarray] = None):
        self.spec = spec
        self.params = params
        self.frequencies = frequencies
        # rows that never change (the padding embedding)
        self.frozen_rows: Dict[str, List[int]] = {"embedding": [PAD_INDEX]}

    @property
    def embedding(self) -> Tensor:
        return self.params["embedding"]

    @property
    def dtype(self):
        return np.dtype(self.spec.dtype)

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(name, t) for name, t in self.params.items() if t.requires_grad]

    def encoder_parameter_count(self) -> int:
        return int(sum(t.size for name, t in self.params.items() if name.startswith("encoder.")))

    def zero_grad(self) -> None:
        """Trainable tensors get all-zero gradients, frozen ones none."""
        for tensor in self.params.values():
            tensor.grad = np.zeros_like(tensor.data) if tensor.requires_grad else None

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def restore(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, array in arrays.items():
            self.params[name].data = array.copy()


# =============================================================================
# INITIALIZATION
# =============================================================================

def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _lstm_params(prefix: str, d: int, hidden: int, rng: np.random.Generator, dtype) -> Dict[str, np.ndarray]:
    bias = np.zeros(4 * hidden, dtype=dtype)
    bias[hidden : 2 * hidden] = 1.0  # forget gate; gate order i, f, g, o
    return {
        f"{prefix}.W_x": glorot_uniform(d, 4 * hidden, rng, dtype),
        f"{prefix}.W_h": glorot_uniform(hidden, 4 * hidden, rng, dtype),
        f"{prefix}.b": bias,
    }


def init_model(
    spec: ModelSpec,
    embeddings: np.ndarray,
    rng: np.random.Generator,
    fine_tune_embeddings: bool = True,
    frequencies: Optional[np.ndarray] = None,
) -> ModelState:
    """Fresh parameters for ``spec`` around an initialized embedding table."""
    dtype = np.dtype(spec.dtype)
    if embeddings.shape[1] != spec.embedding_dim:
        raise ShapeError("init_model", [embeddings.shape, (embeddings.shape[0], spec.embedding_dim)], "embedding width")
    arrays: Dict[str, np.ndarray] = {}
    d = spec.embedding_dim
    if spec.encoder_kind == EncoderKind.CNN:
        arrays["encoder.conv.kernel"] = glorot_uniform(spec.context_size * d, spec.num_kernel, rng, dtype)
        arrays["encoder.conv.bias"] = np.zeros(spec.num_kernel, dtype=dtype)
    elif spec.encoder_kind.is_lstm:
        arrays.update(_lstm_params("encoder.lstm_fwd", d, spec.hidden_state, rng, dtype))
        arrays.update(_lstm_params("encoder.lstm_bwd", d, spec.hidden_state, rng, dtype))
    arrays["classifier.dense1.W"] = glorot_uniform(spec.feature_dim, spec.classifier_dim, rng, dtype)
    arrays["classifier.dense1.b"] = np.zeros(spec.classifier_dim, dtype=dtype)
    arrays["classifier.dense2.W"] = glorot_uniform(spec.classifier_dim, spec.num_classes, rng, dtype)
    arrays["classifier.dense2.b"] = np.zeros(spec.num_classes, dtype=dtype)

    table = np.array(embeddings, dtype=dtype)
    table[PAD_INDEX] = 0.0
    params = {"embedding": Tensor(table, requires_grad=fine_tune_embeddings, name="embedding")}
    params.update({name: Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()})
    state = ModelState(spec, params, frequencies)
    logger.debug(f"Initialized {spec.encoder_kind.value} with {state.encoder_parameter_count()} encoder parameters")
    return state


# =============================================================================
# FORWARD PASS
# =============================================================================

def normalized_table(table: Tensor, frequencies: np.ndarray) -> Tensor:
    """Standardize embedding rows with frequency-weighted mean and variance."""
    weights = np.asarray(frequencies, dtype=table.dtype)[:, None]
    mean = gc.reduce_sum(table * weights, axis=0, keepdims=True)
    centered = table - mean
    variance = gc.reduce_sum(centered * centered * weights, axis=0, keepdims=True)
    return centered / gc.sqrt(variance + 1e-6)


def embed(state: ModelState, token_ids: np.ndarray, normalize: bool = False) -> Tensor:
    """Embedded input ``X[b, T, d]``, always tracked so ``grad`` w.r.t. X is defined."""
    table = state.embedding
    if normalize:
        if state.frequencies is None:
            raise ValueError("embedding normalization needs token frequencies")
        table = normalized_table(table, state.frequencies)
    x = table[np.asarray(token_ids, dtype=np.int64)]
    if not x.requires_grad and gc.is_grad_enabled():
        x = Tensor(x.data, requires_grad=True, name="embedded")
    return x


def length_mask(lengths: np.ndarray, t_max: int) -> np.ndarray:
    lengths = np.asarray(lengths)
    if (lengths < 1).any():
        raise ShapeError("length_mask", [lengths.shape], "every document needs at least one token")
    return np.arange(t_max)[None, :] < lengths[:, None]


def _zero_padding(x: Tensor, mask: np.ndarray) -> Tensor:
    return x * mask[:, :, None].astype(x.dtype)


def swem_encode(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Concatenated masked average pooling and masked max pooling, ``[b, 2d]``.

    The average adds token vectors in sorted order so any reordering of the
    real tokens leaves it bit-identical.
    """
    mask = length_mask(lengths, x.shape[1])
    x = _zero_padding(x, mask)
    total = gc.reduce_sum(x, axis=1, order_invariant=True)
    average = total / np.asarray(lengths, dtype=x.dtype)[:, None]
    peak = gc.reduce_max(x, axis=1, mask=mask[:, :, None])
    return gc.concat([average, peak], axis=1)


def cnn_windows(lengths: np.ndarray, t_max: int, context: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """Window position indices into the padded sequence and per-document validity.

    Window ``i`` is valid for a document iff it also exists when that
    document is convolved on its own.
    """
    half = context // 2
    count = (t_max + 2 * half - context) // stride + 1
    starts = np.arange(count) * stride
    index = starts[:, None] + np.arange(context)[None, :]
    own_count = (np.asarray(lengths) + 2 * half - context) // stride + 1
    valid = np.arange(count)[None, :] < own_count[:, None]
    return index, valid


def cnn_encode(x: Tensor, lengths: np.ndarray, kernel: Tensor, bias: Tensor, context: int = 7, stride: int = 2) -> Tensor:
    """Width-``context`` convolution over time, relu, max over valid windows."""
    b, t_max, d = x.shape
    mask = length_mask(lengths, t_max)
    x = _zero_padding(x, mask)
    half = context // 2
    padded = gc.pad(x, [(0, 0), (half, context - 1 - half), (0, 0)])
    index, valid = cnn_windows(lengths, t_max, context, stride)
    windows = padded[:, index].reshape(b, index.shape[0], context * d)
    features = gc.relu(windows @ kernel + bias)
    return gc.reduce_max(features, axis=1, mask=valid[:, :, None])


def lstm_sweep(x: Tensor, mask: np.ndarray, w_x: Tensor, w_h: Tensor, b: Tensor, reverse: bool = False) -> List[Tensor]:
    """One LSTM direction; returns the hidden state at every timestep.

    Positions where ``mask`` is False carry the previous state unchanged.
    """
    batch, t_max, _ = x.shape
    hidden = w_h.shape[0]
    projected = x @ w_x + b
    h = Tensor(np.zeros((batch, hidden), dtype=x.dtype))
    c = Tensor(np.zeros((batch, hidden), dtype=x.dtype))
    states: List[Optional[Tensor]] = [None] * t_max
    steps = range(t_max - 1, -1, -1) if reverse else range(t_max)
    for t in steps:
        gates = projected[:, t] + h @ w_h
        i = gc.sigmoid(gates[:, :hidden])
        f = gc.sigmoid(gates[:, hidden : 2 * hidden])
        g = gc.tanh(gates[:, 2 * hidden : 3 * hidden])
        o = gc.sigmoid(gates[:, 3 * hidden :])
        c_new = f * c + i * g
        h_new = o * gc.tanh(c_new)
        keep = mask[:, t, None].astype(x.dtype)
        c = c_new * keep + c * (1.0 - keep)
        h = h_new * keep + h * (1.0 - keep)
        states[t] = h
    return states


def _bilstm_states(x: Tensor, lengths: np.ndarray, params: Dict[str, Tensor]) -> Tuple[List[Tensor], List[Tensor], np.ndarray]:
    mask = length_mask(lengths, x.shape[1])
    x = _zero_padding(x, mask)
    forward = lstm_sweep(x, mask, params["encoder.lstm_fwd.W_x"], params["encoder.lstm_fwd.W_h"], params["encoder.lstm_fwd.b"])
    backward = lstm_sweep(
        x, mask, params["encoder.lstm_bwd.W_x"], params["encoder.lstm_bwd.W_h"], params["encoder.lstm_bwd.b"], reverse=True
    )
    return forward, backward, mask


def bilstm_encode(x: Tensor, lengths: np.ndarray, params: Dict[str, Tensor]) -> Tensor:
    """Forward state at the last real token joined with the backward state at the first."""
    forward, backward, _ = _bilstm_states(x, lengths, params)
    return gc.concat([forward[-1], backward[0]], axis=1)


def bilstm_max_encode(x: Tensor, lengths: np.ndarray, params: Dict[str, Tensor]) -> Tuple[Tensor, np.ndarray]:
    """Masked max over timesteps of ``[h_fwd_t ; h_bwd_t]`` and the winning timestep per feature."""
    forward, backward, mask = _bilstm_states(x, lengths, params)
    per_step = gc.concat([gc.stack(forward, axis=1), gc.stack(backward, axis=1)], axis=2)
    return gc.max_with_argmax(per_step, axis=1, mask=mask[:, :, None])


def encode(state: ModelState, x: Tensor, lengths: np.ndarray) -> Tensor:
    spec = state.spec
    params = state.params
    if spec.encoder_kind == EncoderKind.SWEM_CONCAT:
        return swem_encode(x, lengths)
    if spec.encoder_kind == EncoderKind.CNN:
        return cnn_encode(x, lengths, params["encoder.conv.kernel"], params["encoder.conv.bias"], spec.context_size, spec.stride)
    if spec.encoder_kind == EncoderKind.BILSTM:
        return bilstm_encode(x, lengths, params)
    return bilstm_max_encode(x, lengths, params)[0]


def classifier_logits(z: Tensor, state: ModelState, dropout_rate: float, training: bool, bank: Optional[MaskBank]) -> Tensor:
    params = state.params
    expected = params["classifier.dense1.W"].shape[0]
    if z.ndim != 2 or z.shape[1] != expected:
        raise ShapeError("classify", [z.shape, (z.shape[0], expected)], "feature width")
    if training and dropout_rate > 0.0 and bank is None:
        raise ValueError("training with dropout needs a MaskBank")
    if bank is not None:
        z = bank.apply("classifier.input", z, dropout_rate, training)
    hidden = gc.relu(z @ params["classifier.dense1.W"] + params["classifier.dense1.b"])
    if bank is not None:
        hidden = bank.apply("classifier.hidden", hidden, dropout_rate, training)
    return hidden @ params["classifier.dense2.W"] + params["classifier.dense2.b"]


def classify(z: Tensor, state: ModelState, dropout_rate: float, training: bool, bank: Optional[MaskBank] = None) -> Tensor:
    """Class distribution ``[b, k]``: dropout, dense, relu, dropout, dense, softmax."""
    return gc.softmax(classifier_logits(z, state, dropout_rate, training, bank), axis=-1)


def logits_from_embedded(
    state: ModelState, x: Tensor, lengths: np.ndarray, training: bool, bank: Optional[MaskBank]
) -> Tensor:
    return classifier_logits(encode(state, x, lengths), state, state.spec.dropout_rate, training, bank)


def predict_proba(state: ModelState, batch: DocumentBatch, normalize_embeddings: bool = False) -> np.ndarray:
    """Evaluation-mode class distribution for a batch."""
    with gc.no_grad():
        x = embed(state, batch.token_ids, normalize_embeddings)
        logits = logits_from_embedded(state, x, batch.lengths, training=False, bank=None)
        return gc.softmax(logits).data


def timestep_histogram(batch: DocumentBatch, state: ModelState, normalize_embeddings: bool = False) -> np.ndarray:
    """Per document, how many features take their max at each timestep, ``[b, T_max]``."""
    if state.spec.encoder_kind != EncoderKind.BILSTM_MAX:
        raise EncoderKindError("timestep_histogram", EncoderKind.BILSTM_MAX.value, state.spec.encoder_kind.value)
    with gc.no_grad():
        x = embed(state, batch.token_ids, normalize_embeddings)
        _, argmax = bilstm_max_encode(x, batch.lengths, state.params)
    t_max = batch.token_ids.shape[1]
    return np.stack([np.bincount(row, minlength=t_max) for row in argmax]).astype(np.int64)


# =============================================================================
# CHECKPOINTS
# =============================================================================

def _encode_array(array: np.ndarray) -> Dict[str, object]:
    little = array.astype(array.dtype.newbyteorder("<"), copy=False)
    return {
        "shape": list(array.shape),
        "dtype": little.dtype.str,
        "data": base64.b64encode(np.ascontiguousarray(little).tobytes()).decode("ascii"),
    }


def _decode_array(entry: Dict[str, object]) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()


def save_checkpoint(state: ModelState, vocab: Vocabulary, path: Path) -> Path:
    """Write spec, vocabulary and every tensor to a JSON checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "spec": state.spec.model_dump(mode="json"),
        "vocabulary": {"tokens": vocab.tokens, "counts": vocab.counts},
        "trainable": {name: t.requires_grad for name, t in state.params.items()},
        "tensors": {name: _encode_array(t.data) for name, t in sorted(state.params.items())},
    }
    path.write_text(json.dumps(document, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path: Path) -> Tuple[ModelState, Vocabulary]:
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    spec = ModelSpec.model_validate(document["spec"])
    vocab = Vocabulary(document["vocabulary"]["tokens"], document["vocabulary"]["counts"])
    trainable = document.get("trainable", {})
    params = {
        name: Tensor(_decode_array(entry), requires_grad=trainable.get(name, True), name=name)
        for name, entry in document["tensors"].items()
    }
    return ModelState(spec, params, vocab.frequencies()), vocab
