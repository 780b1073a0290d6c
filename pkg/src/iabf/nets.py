"""Encoder, decoder and code classifier networks with probabilistic heads.

Codes are plain {0,1} float arrays of length M (optionally accompanied by a
boolean erasure mask produced by an erasure channel); per-bit encoding
probabilities and decoder outputs are Tensors so losses stay differentiable.
All nets are fully connected with softplus hidden activations, fan-in uniform
weight init and zero biases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_EPS = 1e-6

LIKELIHOOD_FAMILIES = ("bernoulli", "gaussian")


class Mlp:
    """Stack of affine layers, softplus between them, linear head."""

    def __init__(self, sizes, rng: np.random.Generator, prefix: str, dtype=np.float32):
        self.sizes = list(sizes)
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            self.params[f"{prefix}.w{i}"] = Tensor(w)
            self.params[f"{prefix}.b{i}"] = Tensor(np.zeros(fan_out, dtype=dtype))

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        last = len(self.sizes) - 2
        for i in range(last + 1):
            h = ad.affine(h, self.params[f"{self.prefix}.w{i}"], self.params[f"{self.prefix}.b{i}"])
            if i < last:
                h = ad.softplus(h)
        return h


class Encoder:
    """Maps data vectors to independent per-bit code probabilities.

    Output probabilities are clamped to [PROB_EPS, 1-PROB_EPS] so entropy and
    likelihood terms never see an exact 0 or 1.
    """

    def __init__(self, n_in: int, bits: int, hidden: int, layers: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.n_in = n_in
        self.bits = bits
        self.mlp = Mlp([n_in] + [hidden] * layers + [bits], rng, "enc", dtype=dtype)
        self.params = self.mlp.params

    def __call__(self, x) -> Tensor:
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if data.ndim != 2 or data.shape[1] != self.n_in:
            raise ValueError(f"encoder expects (N, {self.n_in}) inputs, got {data.shape}")
        return ad.clip(ad.sigmoid(self.mlp(x)), PROB_EPS, 1.0 - PROB_EPS)


@dataclass
class DecoderOutput:
    """Reconstruction distribution parameters: per-pixel means in (0, 1)."""

    family: str
    mean: Tensor


class Decoder:
    """Maps received codes to reconstruction distribution parameters.

    `family` selects the likelihood: "bernoulli" for binary data or
    "gaussian" (fixed unit variance, normalization constant dropped) for
    continuous data. Either way the mean passes through a sigmoid.
    """

    def __init__(self, bits: int, n_out: int, family: str, hidden: int, layers: int,
                 rng: np.random.Generator, dtype=np.float32):
        if family not in LIKELIHOOD_FAMILIES:
            raise ValueError(f"unknown likelihood family {family!r}")
        self.bits = bits
        self.n_out = n_out
        self.family = family
        self.mlp = Mlp([bits] + [hidden] * layers + [n_out], rng, "dec", dtype=dtype)
        self.params = self.mlp.params

    def __call__(self, y) -> DecoderOutput:
        data = y.data if isinstance(y, Tensor) else np.asarray(y)
        if data.ndim != 2 or data.shape[1] != self.bits:
            raise ValueError(f"decoder expects (N, {self.bits}) codes, got {data.shape}")
        mean = ad.sigmoid(self.mlp(y))
        if self.family == "bernoulli":
            mean = ad.clip(mean, PROB_EPS, 1.0 - PROB_EPS)
        return DecoderOutput(self.family, mean)


class Classifier:
    """Code classifier used for the density-ratio total-correlation estimate."""

    def __init__(self, bits: int, hidden: int, layers: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.bits = bits
        self.mlp = Mlp([bits] + [hidden] * layers + [1], rng, "clf", dtype=dtype)
        self.params = self.mlp.params

    def __call__(self, y) -> Tensor:
        """Probability that each code came from the joint (not the permuted) batch."""
        out = ad.clip(ad.sigmoid(self.mlp(y)), PROB_EPS, 1.0 - PROB_EPS)
        return ad.reshape(out, (out.data.shape[0],))


@dataclass
class ModelParams:
    """The three trainable networks plus a flat named view of their arrays."""

    encoder: Encoder
    decoder: Decoder
    classifier: Classifier

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.encoder.params)
        out.update(self.decoder.params)
        out.update(self.classifier.params)
        return out

    @staticmethod
    def create(n: int, bits: int, likelihood: str, hidden_units: int, hidden_layers: int,
               classifier_units: int, classifier_layers: int,
               rng: np.random.Generator, dtype=np.float32) -> "ModelParams":
        return ModelParams(
            encoder=Encoder(n, bits, hidden_units, hidden_layers, rng, dtype=dtype),
            decoder=Decoder(bits, n, likelihood, hidden_units, hidden_layers, rng, dtype=dtype),
            classifier=Classifier(bits, classifier_units, classifier_layers, rng, dtype=dtype),
        )


def sample_codes(probs, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw k independent Bernoulli code samples; shape (k, *probs.shape).

    Reproducible given the generator state: consumes exactly one block of
    uniforms of shape (k, *probs.shape).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    draws = rng.random((k,) + p.shape)
    return (draws < p).astype(p.dtype)


def code_to_input(bits: np.ndarray, erased: np.ndarray | None = None) -> np.ndarray:
    """Decoder input view of a code: erased positions become 0.5."""
    bits = np.asarray(bits)
    if erased is None:
        return bits
    return np.where(erased, bits.dtype.type(0.5), bits)


def log_likelihood(x, out: DecoderOutput) -> Tensor:
    """Per-sample reconstruction log-likelihood in nats, shape (N,).

    Bernoulli: sum_i x_i log mu_i + (1-x_i) log(1-mu_i).
    Gaussian (unit variance, constant dropped): -1/2 sum_i (x_i - mu_i)^2,
    which ties the training objective to the squared-error distortion metric.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.shape != out.mean.data.shape:
        raise ValueError(f"data shape {data.shape} != mean shape {out.mean.data.shape}")
    if out.family == "bernoulli":
        ll = data * ad.log(out.mean) + (1.0 - data) * ad.log(1.0 - out.mean)
        return ll.sum(axis=1)
    return -0.5 * ad.square(out.mean - data).sum(axis=1)
