"""Latent-space engine-sound classifier.

A pooled-spectrogram MLP encoder maps each normalized magnitude
spectrogram to an embedding, a linear projector places it on the unit
64-sphere, and a small perceptron separates engine foreground from
background in that latent space. The encoder is pretrained with a
supervised contrastive objective, then frozen; the perceptron is fit
with binary cross-entropy on the frozen latents. An end-to-end
supervised baseline of equal capacity is provided for comparison.

All math is plain float64 numpy with hand-written gradients; the
optimizer is Adam with beta = (0.9, 0.999), eps = 1e-8.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .dsp import Spectrogram
from .errors import ConfigError, TrainingDivergedError
from .rng import generator

FOREGROUND = "foreground"
BACKGROUND = "background"

PROJ_DIM = 64

_NORM_EPS = 1e-12
_ZERO_NORM_THRESHOLD = 1e-6

_CKPT_MAGIC = b"IWCK"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    pool_grid: tuple[int, int] = (16, 16)  # (time cells, frequency cells)
    hidden_sizes: tuple[int, ...] = (512, 256)
    embed_dim: int = 256
    proj_dim: int = PROJ_DIM
    input_dims: tuple[int, int] | None = None  # (T, F); checked when set

    def __post_init__(self):
        if self.proj_dim != PROJ_DIM:
            raise ConfigError(f"proj_dim is fixed at {PROJ_DIM}, got {self.proj_dim}")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be >= 1")
        if self.embed_dim < 1 or min(self.pool_grid) < 1:
            raise ConfigError("embed_dim and pool_grid entries must be >= 1")

    @property
    def n_features(self) -> int:
        return self.pool_grid[0] * self.pool_grid[1]

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.n_features, *self.hidden_sizes, self.embed_dim)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    temperature: float = 0.07
    epochs: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict[str, np.ndarray]


@dataclass
class ClassifierModel:
    arch: str  # "linear" | "mlp"
    params: dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# forward passes


def pool_features(mags: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Average-pool a (T, F) matrix down to the fixed encoder grid."""
    mags = np.asarray(mags, dtype=np.float64)
    if mags.shape[0] < grid[0] or mags.shape[1] < grid[1]:
        raise ConfigError(f"input {mags.shape} smaller than pool grid {grid}")
    rows = np.stack([c.mean(axis=0) for c in np.array_split(mags, grid[0], axis=0)])
    return np.stack([c.mean(axis=1) for c in np.array_split(rows, grid[1], axis=1)], axis=1)


def init_encoder(config: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """He-initialized weights, zero biases; keyed on the seed only."""
    rng = generator(seed, "encoder-init")
    params: dict[str, np.ndarray] = {}
    dims = config.layer_dims
    for i in range(len(dims) - 1):
        params[f"enc{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / dims[i]), (dims[i], dims[i + 1]))
        params[f"enc{i}.b"] = np.zeros(dims[i + 1])
    params["proj.w"] = rng.normal(0.0, np.sqrt(1.0 / config.embed_dim), (config.embed_dim, config.proj_dim))
    params["proj.b"] = np.zeros(config.proj_dim)
    return params


def _normalize_rows(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project rows onto the unit sphere; zero rows map to the first axis."""
    norms = np.linalg.norm(u, axis=1)
    z = u / (norms + _NORM_EPS)[:, None]
    degenerate = norms < _ZERO_NORM_THRESHOLD
    if degenerate.any():
        z[degenerate] = 0.0
        z[degenerate, 0] = 1.0
    return z, norms


def _encoder_forward(x: np.ndarray, params: dict, config: EncoderConfig, cache: list | None = None):
    """x: (B, n_features) -> (embedding (B, embed), latent (B, 64))."""
    h = x
    n_layers = len(config.layer_dims) - 1
    for i in range(n_layers):
        z = h @ params[f"enc{i}.w"] + params[f"enc{i}.b"]
        if cache is not None:
            cache.append((h, z))
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
    embed = h
    u = embed @ params["proj.w"] + params["proj.b"]
    latent, norms = _normalize_rows(u)
    if cache is not None:
        cache.append((embed, u, norms))
    return embed, latent


def _encoder_backward(dlatent: np.ndarray, cache: list, params: dict, config: EncoderConfig) -> dict:
    """Gradients of a scalar loss given dL/dlatent, using the forward cache."""
    grads: dict[str, np.ndarray] = {}
    embed, u, norms = cache[-1]
    # z = u / (|u| + eps); degenerate rows have zero gradient
    denom = norms + _NORM_EPS
    du = dlatent / denom[:, None] - u * ((u * dlatent).sum(axis=1) / (np.maximum(norms, _NORM_EPS) * denom**2))[:, None]
    du[norms < _ZERO_NORM_THRESHOLD] = 0.0
    grads["proj.w"] = embed.T @ du
    grads["proj.b"] = du.sum(axis=0)
    dh = du @ params["proj.w"].T
    n_layers = len(config.layer_dims) - 1
    for i in range(n_layers - 1, -1, -1):
        h_in, z = cache[i]
        dz = dh if i == n_layers - 1 else dh * (z > 0.0)
        grads[f"enc{i}.w"] = h_in.T @ dz
        grads[f"enc{i}.b"] = dz.sum(axis=0)
        dh = dz @ params[f"enc{i}.w"].T
    return grads


def _as_features(spec, config: EncoderConfig) -> np.ndarray:
    mags = spec.mags if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    if config.input_dims is not None and mags.shape != tuple(config.input_dims):
        raise ConfigError(f"spectrogram shape {mags.shape} != configured {config.input_dims}")
    return pool_features(mags, config.pool_grid).reshape(-1)


def encode(spec, model: EncoderModel) -> tuple[np.ndarray, np.ndarray]:
    """Spectrogram -> (embedding, unit-norm latent)."""
    x = _as_features(spec, model.config)[None, :]
    embed, latent = _encoder_forward(x, model.params, model.config)
    return embed[0], latent[0]


def encode_features(features: np.ndarray, model: EncoderModel) -> tuple[np.ndarray, np.ndarray]:
    """Batch encode pre-pooled feature grids (B, gt, gf) or vectors (B, D)."""
    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    if x.shape[1] != model.config.n_features:
        raise ConfigError(f"feature width {x.shape[1]} != {model.config.n_features}")
    return _encoder_forward(x, model.params, model.config)


# ---------------------------------------------------------------------------
# supervised contrastive loss


def _scl_terms(latents: np.ndarray, labels: np.ndarray, temperature: float):
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    b = len(z)
    if b < 2 or len(labels) != b:
        raise ConfigError("need >= 2 latents with matching labels")
    sims = (z @ z.T) / temperature
    off_diag = ~np.eye(b, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag
    row_max = np.where(off_diag, sims, -np.inf).max(axis=1)
    expl = np.exp(sims - row_max[:, None]) * off_diag
    log_denom = np.log(expl.sum(axis=1))
    log_prob = sims - row_max[:, None] - log_denom[:, None]
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    return z, sims, off_diag, pos, expl, log_prob, n_pos, anchors


def scl_loss(latents, labels, temperature: float = 0.07) -> float:
    """Supervised contrastive loss over a batch of unit latents.

    Each anchor pulls toward the batch entries sharing its label and
    pushes against all others; anchors with no positive contribute 0.
    """
    _, _, _, pos, _, log_prob, n_pos, anchors = _scl_terms(latents, labels, temperature)
    if not anchors.any():
        return 0.0
    per_anchor = -(pos * log_prob).sum(axis=1)[anchors] / n_pos[anchors]
    return float(per_anchor.sum())


def scl_loss_grad(latents, labels, temperature: float = 0.07) -> tuple[float, np.ndarray]:
    """Loss plus its gradient with respect to the latent vectors."""
    z, _, _, pos, expl, log_prob, n_pos, anchors = _scl_terms(latents, labels, temperature)
    if not anchors.any():
        return 0.0, np.zeros_like(z)
    loss = float((-(pos * log_prob).sum(axis=1)[anchors] / n_pos[anchors]).sum())
    q = expl / expl.sum(axis=1, keepdims=True)
    g = q - pos / np.maximum(n_pos, 1)[:, None]
    g[~anchors] = 0.0
    grad = (g @ z + g.T @ z) / temperature
    return loss, grad


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """Adaptive-moment state for a dict of parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), eps: float = 1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.betas = betas
        self.eps = eps
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _batches(n: int, batch_size: int, epochs: int, seed: int):
    for epoch in range(epochs):
        order = generator(seed, "shuffle", epoch).permutation(n)
        for lo in range(0, n, batch_size):
            yield order[lo : lo + batch_size]


# ---------------------------------------------------------------------------
# training


def train_encoder(features, labels, encoder_config: EncoderConfig | None = None,
                  train_config: TrainConfig | None = None) -> tuple[EncoderModel, list[float]]:
    """SCL pretraining of the encoder + projector. Returns model and loss trace."""
    encoder_config = encoder_config or EncoderConfig()
    train_config = train_config or TrainConfig()
    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    y = np.asarray(labels)
    if len(np.unique(y)) < 2:
        raise ConfigError("training set must contain at least two classes")
    params = init_encoder(encoder_config, train_config.seed)
    adam = AdamState(params)
    trace: list[float] = []
    for step, idx in enumerate(_batches(len(x), train_config.batch_size, train_config.epochs,
                                        train_config.seed)):
        if len(idx) < 2:
            continue
        cache: list = []
        _, latents = _encoder_forward(x[idx], params, encoder_config, cache)
        loss, dlat = scl_loss_grad(latents, y[idx], train_config.temperature)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, idx.tolist())
        grads = _encoder_backward(dlat, cache, params, encoder_config)
        adam.step(params, grads, train_config.lr)
        trace.append(loss)
    return EncoderModel(encoder_config, params), trace


def init_classifier(arch: str, in_dim: int, seed: int, hidden: int = 32) -> dict[str, np.ndarray]:
    rng = generator(seed, "classifier-init")
    if arch == "linear":
        return {"w": rng.normal(0.0, np.sqrt(1.0 / in_dim), (in_dim, 1)), "b": np.zeros(1)}
    if arch == "mlp":
        return {
            "w1": rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, hidden)),
            "b1": np.zeros(hidden),
            "w2": rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, 1)),
            "b2": np.zeros(1),
        }
    raise ConfigError(f"unknown classifier arch {arch!r}")


def _classifier_logits(x: np.ndarray, arch: str, params: dict, cache: list | None = None) -> np.ndarray:
    if arch == "linear":
        return (x @ params["w"] + params["b"])[:, 0]
    z1 = x @ params["w1"] + params["b1"]
    h1 = np.maximum(z1, 0.0)
    if cache is not None:
        cache.append((z1, h1))
    return (h1 @ params["w2"] + params["b2"])[:, 0]


def classifier_scores(latents: np.ndarray, model: ClassifierModel) -> np.ndarray:
    """Foreground probability per latent."""
    x = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    logits = _classifier_logits(x, model.arch, model.params)
    return 1.0 / (1.0 + np.exp(-logits))


def classifier_loss_and_grad(params: dict, arch: str, x: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy, its parameter gradients, and dL/dx."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cache: list = []
    logits = _classifier_logits(x, arch, params, cache)
    # log(1 + e^t) evaluated stably
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    dlogit = ((1.0 / (1.0 + np.exp(-logits))) - y)[:, None] / len(x)
    grads: dict[str, np.ndarray] = {}
    if arch == "linear":
        grads["w"] = x.T @ dlogit
        grads["b"] = dlogit.sum(axis=0)
        dx = dlogit @ params["w"].T
    else:
        z1, h1 = cache[0]
        grads["w2"] = h1.T @ dlogit
        grads["b2"] = dlogit.sum(axis=0)
        dh1 = (dlogit @ params["w2"].T) * (z1 > 0.0)
        grads["w1"] = x.T @ dh1
        grads["b1"] = dh1.sum(axis=0)
        dx = dh1 @ params["w1"].T
    return loss, grads, dx


def train_classifier(latents, labels, arch: str = "mlp",
                     train_config: TrainConfig | None = None) -> tuple[ClassifierModel, list[float]]:
    """Fit the latent-space head with BCE; encoder latents are frozen inputs."""
    train_config = train_config or TrainConfig(epochs=200)
    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ConfigError("classifier training set must contain both classes")
    params = init_classifier(arch, x.shape[1], train_config.seed)
    adam = AdamState(params)
    trace: list[float] = []
    for step, idx in enumerate(_batches(len(x), train_config.batch_size, train_config.epochs,
                                        train_config.seed)):
        loss, grads, _ = classifier_loss_and_grad(params, arch, x[idx], y[idx])
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, idx.tolist())
        adam.step(params, grads, train_config.lr)
        trace.append(loss)
    return ClassifierModel(arch, params), trace


def train_supervised_baseline(features, labels, encoder_config: EncoderConfig | None = None,
                              train_config: TrainConfig | None = None,
                              arch: str = "mlp") -> tuple[EncoderModel, ClassifierModel, list[float]]:
    """Equal-capacity end-to-end BCE baseline (no contrastive pretraining).

    Same encoder, projector, and head as the SCL route, trained jointly.
    """
    encoder_config = encoder_config or EncoderConfig()
    train_config = train_config or TrainConfig()
    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    y = np.asarray(labels, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ConfigError("training set must contain both classes")
    enc_params = init_encoder(encoder_config, train_config.seed)
    clf_params = init_classifier(arch, encoder_config.proj_dim, train_config.seed)
    adam_enc = AdamState(enc_params)
    adam_clf = AdamState(clf_params)
    trace: list[float] = []
    for step, idx in enumerate(_batches(len(x), train_config.batch_size, train_config.epochs,
                                        train_config.seed)):
        cache: list = []
        _, latents = _encoder_forward(x[idx], enc_params, encoder_config, cache)
        loss, clf_grads, dlat = classifier_loss_and_grad(clf_params, arch, latents, y[idx])
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, idx.tolist())
        enc_grads = _encoder_backward(dlat, cache, enc_params, encoder_config)
        adam_enc.step(enc_params, enc_grads, train_config.lr)
        adam_clf.step(clf_params, clf_grads, train_config.lr)
        trace.append(loss)
    return EncoderModel(encoder_config, enc_params), ClassifierModel(arch, clf_params), trace


def classify(spec, encoder: EncoderModel, classifier: ClassifierModel,
             threshold: float = 0.5) -> tuple[str, float]:
    """Label one spectrogram window; foreground wins ties at the threshold."""
    _, latent = encode(spec, encoder)
    score = float(classifier_scores(latent[None, :], classifier)[0])
    return (FOREGROUND if score >= threshold else BACKGROUND), score


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict[str, np.ndarray], sidecar: dict | None = None) -> None:
    """Versioned binary checkpoint (row-major float32) plus JSON sidecar."""
    names = list(params.keys())
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(names)))
        for name in names:
            raw = name.encode("utf-8")
            arr = params[name]
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for name in names:
            f.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    if sidecar is not None:
        with open(str(path) + ".json", "w", encoding="utf-8") as f:
            json.dump(sidecar, f, sort_keys=True, indent=2)
            f.write("\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != _CKPT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            shapes.append((name, shape))
        params = {}
        for name, shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            params[name] = (
                np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape).astype(np.float64)
            )
    return params


def encoder_sidecar(config: EncoderConfig, train_config: TrainConfig, trace: list[float]) -> dict:
    return {
        "kind": "encoder",
        "encoder_config": {
            "pool_grid": list(config.pool_grid),
            "hidden_sizes": list(config.hidden_sizes),
            "embed_dim": config.embed_dim,
            "proj_dim": config.proj_dim,
            "input_dims": list(config.input_dims) if config.input_dims else None,
        },
        "train_config": asdict(train_config),
        "loss_trace": [round(v, 10) for v in trace],
    }


def encoder_from_sidecar(meta: dict, params: dict[str, np.ndarray]) -> EncoderModel:
    c = meta["encoder_config"]
    config = EncoderConfig(
        pool_grid=tuple(c["pool_grid"]),
        hidden_sizes=tuple(c["hidden_sizes"]),
        embed_dim=c["embed_dim"],
        proj_dim=c["proj_dim"],
        input_dims=tuple(c["input_dims"]) if c.get("input_dims") else None,
    )
    return EncoderModel(config, params)
