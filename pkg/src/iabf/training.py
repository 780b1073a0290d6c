"""Joint training of encoder, decoder and code classifier.

Three methods share one step implementation:

  * "necst"  -- codes sampled through the uniform flip relaxation
                p' = p(1-2e) + e; no information term (lambda forced to 0).
  * "abf"    -- the relaxation is sharpened per bit: reconstruction-loss
                gradients at the clean codes pick the vulnerable bits, the
                noise budget M*e is split across them, and codes are sampled
                through the per-bit relaxation; lambda forced to 0.
  * "iabf"   -- "abf" plus the information objective (per-bit mutual
                information minus total correlation) weighted by lambda,
                with the code classifier updated once per step first.

Checkpoints are single files: magic, format version, the effective config as
embedded text, epoch, best validation distortion, then named little-endian
float32 arrays with shape headers. Optimizer state is not persisted; resume
reinitializes it.
"""

from __future__ import annotations

import dataclasses
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluate
from .autodiff import NonFiniteError, Tensor
from .channels import (CHANNEL_KINDS, ChannelSpec, adversarial_perturbed_bernoulli,
                       allocate_adversarial_noise, perturbed_bernoulli)
from .data import Dataset, load_dataset
from .nets import LIKELIHOOD_FAMILIES, ModelParams, log_likelihood, sample_codes
from .objectives import (flip_mask, info_loss, classifier_loss,
                         permute_per_dimension, vimco_surrogate)

METHODS = ("iabf", "abf", "necst")

CKPT_MAGIC = b"IABFCKPT"
CKPT_VERSION = 1

METRICS_COLUMNS = ("step", "epoch", "split", "rec_loss", "info_mi_sum", "info_tc",
                   "distortion", "epsilon", "method", "seed", "wall_ms")


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; a diagnostic dump was written."""


# -- configuration -----------------------------------------------------------


@dataclass
class TrainConfig:
    """All training hyperparameters; field names double as config-file keys
    (the `lam` attribute is written as `lambda`)."""

    dataset: str = "synthetic"
    bits: int = 100
    channel: str = "bsc"
    epsilon: float = 0.1
    lam: float = 0.01
    k: int = 5
    batch_size: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    classifier_lr: float = 1e-4
    epochs: int = 10
    seed: int = 0
    likelihood: str = "auto"
    method: str = "iabf"
    val_every: int = 1
    tc_gradient: str = "passthrough"
    hidden_units: int = 500
    hidden_layers: int = 2
    classifier_units: int = 256
    classifier_layers: int = 3
    data_dir: str = "data"
    threads: int = 1

    def validate(self) -> "TrainConfig":
        """Check value ranges and normalize; ablation methods force lambda=0."""
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.channel not in CHANNEL_KINDS:
            raise ValueError(f"channel must be one of {CHANNEL_KINDS}, got {self.channel!r}")
        if not (0.0 <= self.epsilon <= 0.5):
            raise ValueError(f"epsilon must lie in [0, 0.5], got {self.epsilon}")
        if self.likelihood not in ("auto",) + LIKELIHOOD_FAMILIES:
            raise ValueError(f"unknown likelihood family {self.likelihood!r}")
        if self.tc_gradient not in ("passthrough", "estimate"):
            raise ValueError(f"unknown tc_gradient {self.tc_gradient!r}")
        if self.k < 2:
            raise ValueError("k must be >= 2 (leave-one-out baselines)")
        for name in ("bits", "batch_size", "val_every", "hidden_units",
                     "classifier_units", "hidden_layers", "classifier_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.method in ("abf", "necst") and self.lam != 0.0:
            self.lam = 0.0
        return self

    def resolved_likelihood(self) -> str:
        if self.likelihood != "auto":
            return self.likelihood
        return "bernoulli" if self.dataset == "binary_mnist" else "gaussian"


_KEY_TO_ATTR = {f.name if f.name != "lam" else "lambda": f.name
                for f in dataclasses.fields(TrainConfig)}


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        key = "lambda" if f.name == "lam" else f.name
        lines.append(f"{key} = {getattr(config, f.name)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    """Parse flat `key = value` lines (# starts a comment)."""
    config = TrainConfig()
    apply_overrides(config, _parse_pairs(text))
    return config.validate()


def _parse_pairs(text: str) -> dict:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        pairs[key] = value
    return pairs


def apply_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    """Set config fields from a {key: value-or-string} mapping; keys must name
    valid config fields."""
    for key, value in overrides.items():
        if value is None:
            continue
        attr = _KEY_TO_ATTR.get(key)
        if attr is None:
            raise ValueError(f"unknown config key {key!r}")
        kind = type(getattr(config, attr))
        setattr(config, attr, kind(value) if not isinstance(value, kind) else value)
    return config


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= (scale * m / (np.sqrt(v) + self.eps)).astype(p.data.dtype)


def _zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.grad = None


# -- one optimization step -----------------------------------------------------


@dataclass
class StepMetrics:
    rec_loss: float
    info_mi_sum: float
    info_tc: float
    distortion: float


def _entropy_mi_sum(probs: np.ndarray) -> float:
    """Report-only sum over bits of H(Y_d) - H(Y_d|X), computed in float64."""
    p = np.clip(probs.astype(np.float64), 1e-12, 1.0 - 1e-12)

    def h(q):
        return -(q * np.log(q) + (1.0 - q) * np.log(1.0 - q))

    return float((h(p.mean(axis=0)) - h(p).mean(axis=0)).sum())


def _code_loss_gradients(x: np.ndarray, codes: np.ndarray, decoder) -> np.ndarray:
    """Gradient of the reconstruction loss (negative log-likelihood) with
    respect to the code bits, averaged over the K samples. Shape (N, M)."""
    k, n, bits = codes.shape
    leaf = Tensor(codes.reshape(k * n, bits))
    nll = -log_likelihood(np.tile(x, (k, 1)), decoder(leaf)).sum()
    nll.backward()
    grads = leaf.grad.reshape(k, n, bits).mean(axis=0)
    _zero_grads(decoder.params)
    return grads


def relaxed_channel(probs: Tensor, x: np.ndarray, decoder, config: TrainConfig,
                    rng: np.random.Generator):
    """Build the differentiable code distribution the objective samples from.

    For iabf/abf: sample K clean codes, probe the decoder for per-bit loss
    gradients (averaged over the K samples, evaluated at the hard bits; the
    flip mask is taken against the per-bit majority code), allocate the noise
    budget by gradient magnitude and fold it in per bit. Rows whose gradient
    is identically zero fall back to the uniform relaxation at the full
    epsilon, which is exactly the necst channel. Returns (p_channel, clean
    code samples or None).
    """
    if config.method in ("iabf", "abf"):
        clean = sample_codes(probs.data, config.k, rng)
        grads = _code_loss_gradients(x, clean, decoder)
        reference = (clean.mean(axis=0) >= 0.5).astype(probs.data.dtype)
        mask = flip_mask(reference, grads)
        mask[np.abs(grads).sum(axis=1) == 0.0] = 1.0
        allocation = allocate_adversarial_noise(np.abs(grads), config.epsilon, mask)
        return adversarial_perturbed_bernoulli(probs, allocation), clean
    return perturbed_bernoulli(probs, config.epsilon), None


def train_step(params: ModelParams, opt_main: Adam, opt_clf: Adam,
               x: np.ndarray, config: TrainConfig, rng: np.random.Generator) -> StepMetrics:
    """Run one step of the configured method and update parameters in place.

    Random draws, in order: K clean code samples (iabf/abf only), K
    channel-relaxed code samples, one batch permutation (iabf only). Step
    order for iabf: encode; probe the decoder at the clean codes for
    per-bit loss gradients; build the flip mask and noise allocation; sample
    through the per-bit relaxation and form the K-sample objective; update
    the classifier on real-vs-permuted codes; assemble the information loss;
    apply the combined update.
    """
    enc, dec, clf = params.encoder, params.decoder, params.classifier
    n = x.shape[0]
    probs = enc(x)
    p_channel, clean = relaxed_channel(probs, x, dec, config, rng)
    codes = sample_codes(p_channel.data, config.k, rng)
    surrogate, bound, means = vimco_surrogate(x, p_channel, codes, dec)

    if config.method == "iabf":
        real = clean[0]
        permuted = permute_per_dimension(real, rng)
        _zero_grads(clf.params)
        (-classifier_loss(real, permuted, clf)).backward()
        opt_clf.step(clf.params)
        info_term, info_report = info_loss(probs, real, clf, config.tc_gradient)
        total = surrogate + config.lam * info_term
        info_mi_sum, info_tc = info_report.mi_sum, info_report.tc
    else:
        total = surrogate
        info_mi_sum, info_tc = _entropy_mi_sum(probs.data), float("nan")

    _zero_grads(enc.params)
    _zero_grads(dec.params)
    _zero_grads(clf.params)
    (-total).backward()
    opt_main.step({**enc.params, **dec.params})
    for name, t in params.named().items():
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"parameter {name} went non-finite after the update")

    rec_loss = float(bound.data.mean())
    residual = means[:n].astype(np.float64) - x
    distortion = float((residual * residual).sum(axis=1).mean())
    return StepMetrics(rec_loss, info_mi_sum, info_tc, distortion)


# -- checkpoint format ----------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    config_text: str
    arrays: dict[str, np.ndarray]
    epoch: int
    best_val: float


def save_checkpoint(path: str, config: TrainConfig, arrays: dict[str, np.ndarray],
                    epoch: int, best_val: float) -> None:
    text = config_to_text(config).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        f.write(struct.pack("<I", epoch))
        f.write(struct.pack("<d", best_val))
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack_from("<I", raw, 8)[0]
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    text_len = struct.unpack_from("<I", raw, offset)[0]
    offset += 4
    text = raw[offset:offset + text_len].decode("utf-8")
    offset += text_len
    epoch = struct.unpack_from("<I", raw, offset)[0]
    offset += 4
    best_val = struct.unpack_from("<d", raw, offset)[0]
    offset += 8
    count = struct.unpack_from("<I", raw, offset)[0]
    offset += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack_from("<I", raw, offset)[0]
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        ndim = struct.unpack_from("<I", raw, offset)[0]
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(raw, dtype="<f4", offset=offset,
                                     count=size).reshape(shape).copy()
        offset += 4 * size
    return Checkpoint(version, config_from_text(text), text, arrays, epoch, best_val)


def build_params(config: TrainConfig, n: int, rng: np.random.Generator) -> ModelParams:
    return ModelParams.create(
        n, config.bits, config.resolved_likelihood(),
        config.hidden_units, config.hidden_layers,
        config.classifier_units, config.classifier_layers, rng,
    )


def params_from_checkpoint(ckpt: Checkpoint, n: int) -> ModelParams:
    """Rebuild networks from a checkpoint, validating array shapes."""
    rng = np.random.Generator(np.random.Philox(0))
    params = ModelParams.create(
        n, ckpt.config.bits, ckpt.config.resolved_likelihood(),
        ckpt.config.hidden_units, ckpt.config.hidden_layers,
        ckpt.config.classifier_units, ckpt.config.classifier_layers, rng,
    )
    named = params.named()
    if set(named) != set(ckpt.arrays):
        raise ValueError("checkpoint arrays do not match the configured architecture")
    for name, tensor in named.items():
        stored = ckpt.arrays[name]
        if stored.shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint array {name} has shape {stored.shape}, expected {tensor.data.shape}"
            )
        tensor.data = stored.astype(tensor.data.dtype)
    return params


# -- metrics CSV -----------------------------------------------------------------


class MetricsWriter:
    """Appends fixed-column CSV rows; floats use %.6f so identical runs
    produce byte-identical files."""

    def __init__(self, path: str):
        self.path = path
        fresh = not os.path.exists(path)
        self._fh = open(path, "a", encoding="utf-8")
        if fresh:
            self._fh.write(",".join(METRICS_COLUMNS) + "\n")

    @staticmethod
    def _fmt(value) -> str:
        if isinstance(value, float):
            return "nan" if np.isnan(value) else f"{value:.6f}"
        return str(value)

    def row(self, **fields):
        self._fh.write(",".join(self._fmt(fields[c]) for c in METRICS_COLUMNS) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    config: TrainConfig
    params: ModelParams
    checkpoint_path: str
    metrics_path: str
    history: list = field(default_factory=list)
    best_val: float = float("nan")


def train(config: TrainConfig, out_dir: str, dataset: Dataset | None = None) -> TrainResult:
    """Train from scratch; see `_run` for loop mechanics."""
    config.validate()
    ds = dataset or load_dataset(config.dataset, config.data_dir)
    init_rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence((config.seed, 0))))
    params = build_params(config, ds.n, init_rng)
    return _run(config, params, ds, out_dir, start_epoch=0, best_val=float("inf"))


ARCH_KEYS = ("bits", "hidden_units", "hidden_layers", "classifier_units",
             "classifier_layers", "dataset", "likelihood")


def resume(checkpoint_path: str, overrides: dict, out_dir: str,
           dataset: Dataset | None = None) -> TrainResult:
    """Continue training from a checkpoint for `epochs` further epochs.

    Overrides may not touch architecture-affecting keys. Optimizer state is
    rebuilt from scratch (it is not checkpointed).
    """
    ckpt = load_checkpoint(checkpoint_path)
    for key in ARCH_KEYS:
        if key in overrides and overrides[key] is not None:
            current = getattr(ckpt.config, _KEY_TO_ATTR[key])
            if type(current)(overrides[key]) != current:
                raise ValueError(f"cannot override architecture field {key!r} on resume")
    config = apply_overrides(ckpt.config, overrides).validate()
    ds = dataset or load_dataset(config.dataset, config.data_dir)
    params = params_from_checkpoint(ckpt, ds.n)
    best = ckpt.best_val if np.isfinite(ckpt.best_val) else float("inf")
    return _run(config, params, ds, out_dir, start_epoch=ckpt.epoch, best_val=best)


def _run(config: TrainConfig, params: ModelParams, ds: Dataset, out_dir: str,
         start_epoch: int, best_val: float) -> TrainResult:
    """Epoch loop: shuffled minibatches, periodic validation distortion, best
    checkpoint retention, per-step metrics rows.

    In reference mode (threads == 1, the default) the wall_ms column is
    written as 0 so identical runs produce byte-identical metrics files;
    threads > 1 records real elapsed time instead.
    """
    os.makedirs(out_dir, exist_ok=True)
    config.likelihood = config.resolved_likelihood()
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(config_to_text(config))

    seed_root = np.random.SeedSequence((config.seed, 1))
    step_ss, shuffle_ss, val_ss = seed_root.spawn(3)
    step_rng = np.random.Generator(np.random.Philox(step_ss))
    shuffle_rng = np.random.Generator(np.random.Philox(shuffle_ss))
    val_rng = np.random.Generator(np.random.Philox(val_ss))

    opt_main = Adam(config.lr, config.beta1, config.beta2)
    opt_clf = Adam(config.classifier_lr, config.beta1, config.beta2)
    channel = ChannelSpec(config.channel, config.epsilon)
    eval_channel = channel if channel.kind != "adversarial" else ChannelSpec("bsc", config.epsilon)

    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    writer = MetricsWriter(metrics_path)

    def snapshot():
        return {name: np.array(t.data) for name, t in params.named().items()}

    save_checkpoint(ckpt_path, config, snapshot(), start_epoch,
                    best_val if np.isfinite(best_val) else float("nan"))

    history: list[dict] = []
    step = 0
    try:
        for epoch in range(start_epoch, start_epoch + config.epochs):
            order = shuffle_rng.permutation(ds.train.shape[0])
            for lo in range(0, order.size, config.batch_size):
                batch = ds.train[order[lo:lo + config.batch_size]]
                started = time.monotonic()
                try:
                    metrics = train_step(params, opt_main, opt_clf, batch, config, step_rng)
                except NonFiniteError as err:
                    dump = _write_dump(out_dir, step, epoch, params, err)
                    raise TrainingDiverged(f"non-finite loss at step {step}; dump at {dump}") from err
                wall_ms = 0 if config.threads == 1 else int(1000 * (time.monotonic() - started))
                step += 1
                writer.row(step=step, epoch=epoch, split="train",
                           rec_loss=metrics.rec_loss, info_mi_sum=metrics.info_mi_sum,
                           info_tc=metrics.info_tc, distortion=metrics.distortion,
                           epsilon=config.epsilon, method=config.method,
                           seed=config.seed, wall_ms=wall_ms)
            last = epoch == start_epoch + config.epochs - 1
            if (epoch - start_epoch + 1) % config.val_every == 0 or last:
                report = evaluate.distortion(ds.val, params, eval_channel, draws=1,
                                             rng=val_rng, mode="map",
                                             dataset=ds.name, method=config.method,
                                             seed=config.seed)
                writer.row(step=step, epoch=epoch, split="val",
                           rec_loss=float("nan"), info_mi_sum=float("nan"),
                           info_tc=float("nan"), distortion=report.distortion,
                           epsilon=config.epsilon, method=config.method,
                           seed=config.seed, wall_ms=0)
                history.append({"epoch": epoch, "step": step,
                                "val_distortion": report.distortion})
                if report.distortion < best_val:
                    best_val = report.distortion
                    save_checkpoint(ckpt_path, config, snapshot(), epoch + 1, best_val)
    finally:
        writer.close()

    if history:
        from .figures import save_training_figure
        save_training_figure(metrics_path, os.path.join(out_dir, "training.png"))
    return TrainResult(config, params, ckpt_path, metrics_path, history,
                       best_val if np.isfinite(best_val) else float("nan"))


def _write_dump(out_dir: str, step: int, epoch: int, params: ModelParams, err) -> str:
    path = os.path.join(out_dir, "diagnostic_dump.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"step {step} epoch {epoch}\nerror: {err}\n")
        for name, t in params.named().items():
            finite = bool(np.all(np.isfinite(t.data)))
            f.write(f"{name}: shape {t.data.shape} max_abs "
                    f"{float(np.max(np.abs(t.data))):.6e} finite {finite}\n")
    return path
