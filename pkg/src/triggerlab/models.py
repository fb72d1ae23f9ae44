"""The three network architectures and their training loops.

* har_cnn — activity classifier: three same-padded 2-d convolutions over
  (time x channel) with ReLU, dropout, and a linear head.
* gait_siamese_lstm — authentication model: a weight-shared CNN extractor
  per signal of the pair, per-timestep feature concat, one LSTM, and a
  2-logit same/different head.
* trigger_autoencoder — additive-perturbation generator: three linear
  encoder layers and a mirrored decoder with a linear (unsquashed) output
  the same shape as the input window.

Model parameters live in an ordered name->Tensor dict so checkpoints and
pruning can address them uniformly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward, cross_entropy
from .datasets import LabeledDataset

ARCHITECTURES = ("har_cnn", "gait_siamese_lstm", "trigger_autoencoder")

_ARCH_SEED_TAG = {"har_cnn": 1, "gait_siamese_lstm": 2, "trigger_autoencoder": 3}


class ModelError(ValueError):
    """Invalid model spec or input that does not match it."""


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    t_len: int
    d: int
    n_classes: int = 6
    conv_channels: tuple = (32, 64, 64)
    kernel_t: int = 5
    dropout: float = 0.2
    lstm_hidden: int = 64
    extractor_channels: tuple = (32, 32)
    encoder_widths: tuple = (256, 64, 32)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ModelError(f"unknown architecture '{self.arch}'")
        if self.t_len <= 0 or self.d <= 0:
            raise ModelError(f"window shape {self.t_len}x{self.d} must be positive")
        if not 0 <= self.dropout < 1:
            raise ModelError(f"dropout {self.dropout} outside [0, 1)")
        if self.kernel_t % 2 == 0 or self.kernel_t < 1:
            raise ModelError("kernel_t must be odd and positive")
        if self.arch == "har_cnn" and len(self.conv_channels) != 3:
            raise ModelError("har_cnn uses exactly three conv layers")
        if self.arch == "gait_siamese_lstm" and self.n_classes != 2:
            raise ModelError("gait model is a 2-class same/different classifier")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key in ("conv_channels", "extractor_channels", "encoder_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class ModelState:
    """Spec plus ordered named parameters plus training metadata."""

    def __init__(self, spec: ModelSpec, params: dict, meta: dict | None = None):
        self.spec = spec
        self.params = params
        self.meta = meta or {"epochs_seen": 0, "seed": None, "final_loss": None}

    def parameters(self):
        return list(self.params.values())

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
            if flag and p.grad is None:
                p.grad = np.zeros_like(p.data)
        return self

    def copy(self) -> "ModelState":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        return ModelState(self.spec, params, dict(self.meta))


def freeze(state: ModelState) -> ModelState:
    return state.set_trainable(False)


def param_hash(state: ModelState) -> str:
    """SHA-256 over parameter names, shapes, and raw little-endian bytes."""
    h = hashlib.sha256()
    for name, p in state.params.items():
        h.update(name.encode())
        h.update(str(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# initialization


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(spec: ModelSpec, seed: int) -> ModelState:
    """Deterministically initialized parameters for the given spec."""
    rng = np.random.default_rng([seed, _ARCH_SEED_TAG[spec.arch]])
    t_len, d, k = spec.t_len, spec.d, spec.n_classes
    params: dict[str, Tensor] = {}

    def add_param(name, shape, fan_in):
        params[name] = Tensor(_kaiming_uniform(rng, shape, fan_in), requires_grad=True)

    def add_bias(name, n):
        params[name] = Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)

    if spec.arch == "har_cnn":
        c_in = 1
        for i, c_out in enumerate(spec.conv_channels, start=1):
            add_param(f"conv{i}.w", (c_out, c_in, spec.kernel_t, 1), c_in * spec.kernel_t)
            add_bias(f"conv{i}.b", c_out)
            c_in = c_out
        add_param("head.w", (c_in * t_len * d, k), c_in * t_len * d)
        add_bias("head.b", k)
    elif spec.arch == "gait_siamese_lstm":
        c1, c2 = spec.extractor_channels
        add_param("ext1.w", (c1, 1, spec.kernel_t, d), spec.kernel_t * d)
        add_bias("ext1.b", c1)
        add_param("ext2.w", (c2, c1, spec.kernel_t, 1), c1 * spec.kernel_t)
        add_bias("ext2.b", c2)
        h = spec.lstm_hidden
        add_param("lstm.w_ih", (2 * c2, 4 * h), 2 * c2)
        add_param("lstm.w_hh", (h, 4 * h), h)
        add_bias("lstm.b", 4 * h)
        add_param("head.w", (h, 2), h)
        add_bias("head.b", 2)
    else:  # trigger_autoencoder
        widths = [t_len * d, *spec.encoder_widths]
        for i in range(3):
            add_param(f"enc{i + 1}.w", (widths[i], widths[i + 1]), widths[i])
            add_bias(f"enc{i + 1}.b", widths[i + 1])
        mirror = [*reversed(spec.encoder_widths), t_len * d]
        for i in range(3):
            add_param(f"dec{i + 1}.w", (mirror[i], mirror[i + 1]), mirror[i])
            add_bias(f"dec{i + 1}.b", mirror[i + 1])
    state = ModelState(spec, params)
    state.meta["seed"] = seed
    return state


# ---------------------------------------------------------------------------
# forward passes (internal, tensor in / tensor out)


def _ensure_batch(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    want = 4 if spec.arch == "gait_siamese_lstm" else 3
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == want - 1:
        x = x[None]
    if x.ndim != want:
        raise ModelError(f"{spec.arch}: expected {want}-d batch, got shape {x.shape}")
    if x.shape[-2:] != (spec.t_len, spec.d):
        raise ModelError(f"{spec.arch}: window shape {x.shape[-2:]} does not match "
                         f"spec {(spec.t_len, spec.d)}")
    if spec.arch == "gait_siamese_lstm" and x.shape[1] != 2:
        raise ModelError(f"{spec.arch}: expected signal pairs, got shape {x.shape}")
    return x


def _linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def _forward_har(state: ModelState, x: Tensor, training: bool, rng) -> tuple:
    spec, p = state.spec, state.params
    n = x.data.shape[0]
    h = ad.reshape(x, (n, 1, spec.t_len, spec.d))
    for i in range(1, 4):
        h = ad.relu(ad.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], padding="same"))
    if training and spec.dropout > 0:
        h = ad.dropout(h, spec.dropout, rng)
    hidden = ad.reshape(h, (n, spec.conv_channels[-1] * spec.t_len * spec.d))
    return _linear(hidden, p["head.w"], p["head.b"]), hidden


def _forward_gait(state: ModelState, x: Tensor, training: bool, rng) -> tuple:
    spec, p = state.spec, state.params
    n = x.data.shape[0]
    c2, h_dim = spec.extractor_channels[1], spec.lstm_hidden
    pad_t = spec.kernel_t // 2

    def extract(sig):  # (n, t, d) -> (n, c2, t), shared weights
        h = ad.reshape(sig, (n, 1, spec.t_len, spec.d))
        h = ad.relu(ad.conv2d(h, p["ext1.w"], p["ext1.b"], padding=(pad_t, 0)))
        h = ad.relu(ad.conv2d(h, p["ext2.w"], p["ext2.b"], padding=(pad_t, 0)))
        return ad.reshape(h, (n, c2, spec.t_len))

    feats = ad.concat([extract(x[:, 0]), extract(x[:, 1])], axis=1)  # (n, 2c2, t)
    h = Tensor(np.zeros((n, h_dim), dtype=np.float32))
    c = Tensor(np.zeros((n, h_dim), dtype=np.float32))
    for t in range(spec.t_len):
        x_t = ad.slice_(feats, (slice(None), slice(None), t))
        h, c = ad.lstm_step(x_t, h, c, p["lstm.w_ih"], p["lstm.w_hh"], p["lstm.b"])
    return _linear(h, p["head.w"], p["head.b"]), h


def _forward_autoencoder(state: ModelState, x: Tensor, training: bool, rng) -> tuple:
    spec, p = state.spec, state.params
    n = x.data.shape[0]
    h = ad.reshape(x, (n, spec.t_len * spec.d))
    h = ad.relu(_linear(h, p["enc1.w"], p["enc1.b"]))
    h = ad.relu(_linear(h, p["enc2.w"], p["enc2.b"]))
    z = _linear(h, p["enc3.w"], p["enc3.b"])
    h = ad.relu(_linear(z, p["dec1.w"], p["dec1.b"]))
    h = ad.relu(_linear(h, p["dec2.w"], p["dec2.b"]))
    out = _linear(h, p["dec3.w"], p["dec3.b"])  # linear output: range set by training
    return ad.reshape(out, (n, spec.t_len, spec.d)), z


_FORWARD = {
    "har_cnn": _forward_har,
    "gait_siamese_lstm": _forward_gait,
    "trigger_autoencoder": _forward_autoencoder,
}


def forward(state: ModelState, x, training: bool = False, rng=None) -> Tensor:
    """Run the architecture's forward pass; x may be a Tensor or ndarray."""
    if not isinstance(x, Tensor):
        x = Tensor(_ensure_batch(state.spec, x))
    return _FORWARD[state.spec.arch](state, x, training, rng)[0]


def classify(state: ModelState, x) -> np.ndarray:
    """Evaluation-mode logits, (n, n_classes); gait input is signal pairs."""
    if state.spec.arch == "trigger_autoencoder":
        raise ModelError("classify: the trigger generator is not a classifier")
    return forward(state, x).data


def hidden_features(state: ModelState, x) -> np.ndarray:
    """Activations immediately before the final linear layer, eval mode."""
    xt = Tensor(_ensure_batch(state.spec, x))
    return _FORWARD[state.spec.arch](state, xt, False, None)[1].data


def predict(state: ModelState, x) -> np.ndarray:
    return classify(state, x).argmax(axis=1).astype(np.int32)


def generate_trigger(state: ModelState, x) -> np.ndarray:
    """Per-input additive perturbation, same shape as x."""
    if state.spec.arch != "trigger_autoencoder":
        raise ModelError("generate_trigger needs a trigger_autoencoder state")
    return forward(state, x).data


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingLog:
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.losses)


def iterate_batches(n: int, batch_size: int, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train_classifier(state: ModelState, data: LabeledDataset, epochs: int,
                     batch_size: int = 32, lr: float = 1e-3, seed: int = 0) -> TrainingLog:
    """Cross-entropy + Adam training; returns per-epoch mean loss/accuracy."""
    if state.spec.arch == "trigger_autoencoder":
        raise ModelError("train_classifier: not a classifier architecture")
    if len(data) == 0:
        raise ModelError("train_classifier: empty dataset")
    if data.labels.max() >= state.spec.n_classes:
        raise ModelError(f"label {int(data.labels.max())} out of range "
                         f"[0, {state.spec.n_classes})")
    log = TrainingLog()
    if epochs == 0:
        return log
    state.set_trainable(True)
    opt = Adam(state.parameters(), lr=lr)
    shuffle_rng = np.random.default_rng([seed, 31])
    drop_rng = np.random.default_rng([seed, 32])
    for _ in range(epochs):
        total_loss, correct = 0.0, 0
        for idx in iterate_batches(len(data), batch_size, shuffle_rng):
            x, y = data.windows[idx], data.labels[idx]
            logits = forward(state, Tensor(_ensure_batch(state.spec, x)),
                             training=True, rng=drop_rng)
            loss = cross_entropy(logits, y)
            backward(loss)
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        log.losses.append(total_loss / len(data))
        log.accuracies.append(correct / len(data))
    state.meta["epochs_seen"] = state.meta.get("epochs_seen", 0) + epochs
    state.meta["final_loss"] = log.losses[-1]
    return log


def accuracy(state: ModelState, data: LabeledDataset) -> float:
    """Evaluation accuracy over a dataset, batched to bound memory."""
    correct = 0
    for start in range(0, len(data), 256):
        x = data.windows[start:start + 256]
        y = data.labels[start:start + 256]
        correct += int((classify(state, x).argmax(axis=1) == y).sum())
    return correct / len(data)


def warmstart_autoencoder(state: ModelState, windows: np.ndarray, epochs: int,
                          batch_size: int = 32, lr: float = 1e-3, seed: int = 0) -> TrainingLog:
    """Optional reconstruction pre-training: the network output is pushed
    toward the input itself (plain autoencoder objective) before the
    attack objective repurposes it to emit perturbations."""
    log = TrainingLog()
    if epochs == 0:
        return log
    state.set_trainable(True)
    opt = Adam(state.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 33])
    n = len(windows)
    for _ in range(epochs):
        total = 0.0
        for idx in iterate_batches(n, batch_size, rng):
            x = Tensor(np.ascontiguousarray(windows[idx], dtype=np.float32))
            out = forward(state, x)
            loss = ad.mse(out, Tensor(x.data.copy()))
            backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        log.losses.append(total / n)
    return log
