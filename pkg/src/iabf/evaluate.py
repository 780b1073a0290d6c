"""End-to-end distortion measurement, chain sampling and artifact emission.

Evaluation always runs codes through the exact sampling channels (bit flips
or erasures), never the training-time relaxations. Distortion is the
per-image sum of squared pixel errors, averaged over images and channel
draws; the exact formula is recorded in every report.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .channels import ChannelSpec, bec_corrupt, bsc_corrupt
from .nets import ModelParams, code_to_input, sample_codes

DISTORTION_FORMULA = "sum over pixels of squared error per image, averaged over images and channel draws"

_EVAL_BATCH = 2048


@dataclass
class DistortionReport:
    dataset: str
    bits: int
    epsilon: float
    method: str
    mode: str
    draws: int
    seed: int
    images: int
    distortion: float
    formula: str = DISTORTION_FORMULA


def _encode_bits(params: ModelParams, x: np.ndarray, mode: str,
                 rng: np.random.Generator | None) -> np.ndarray:
    probs = params.encoder(x).data
    if mode == "map":
        return (probs >= 0.5).astype(probs.dtype)
    if mode == "sample":
        if rng is None:
            raise ValueError("mode='sample' needs an rng")
        return sample_codes(probs, 1, rng)[0]
    raise ValueError(f"unknown code mode {mode!r}")


def reconstruct(x: np.ndarray, params: ModelParams, channel: ChannelSpec,
                rng: np.random.Generator | None = None, mode: str = "map") -> np.ndarray:
    """Encode, corrupt through the exact channel, decode; returns means in [0, 1].

    With mode="map" and epsilon=0 no randomness is consumed at all. The
    "adversarial" channel kind is a training-time construct and is rejected.
    """
    if channel.kind == "adversarial":
        raise ValueError("the adversarial channel is train-only; evaluate with bsc or bec")
    x = np.atleast_2d(np.asarray(x))
    bits = _encode_bits(params, x, mode, rng)
    erased = None
    if channel.epsilon > 0.0:
        if rng is None:
            raise ValueError("epsilon > 0 needs an rng")
        if channel.kind == "bsc":
            bits = bsc_corrupt(bits, channel.epsilon, rng)
        else:
            bits, erased = bec_corrupt(bits, channel.epsilon, rng)
    mean = params.decoder(code_to_input(bits, erased)).mean.data
    return np.clip(mean, 0.0, 1.0)


def distortion(split: np.ndarray, params: ModelParams, channel: ChannelSpec,
               draws: int, rng: np.random.Generator | None, mode: str = "map",
               dataset: str = "?", method: str = "?", seed: int = 0) -> DistortionReport:
    """Mean over images of mean-over-draws of the per-image squared error."""
    if draws < 1:
        raise ValueError("draws must be >= 1")
    split = np.asarray(split)
    if split.size == 0:
        raise ValueError("empty evaluation split")
    total = 0.0
    for lo in range(0, split.shape[0], _EVAL_BATCH):
        x = split[lo:lo + _EVAL_BATCH].astype(np.float64)
        acc = np.zeros(x.shape[0], dtype=np.float64)
        for _ in range(draws):
            recon = reconstruct(x, params, channel, rng=rng, mode=mode).astype(np.float64)
            acc += ((x - recon) ** 2).sum(axis=1)
        total += (acc / draws).sum()
    return DistortionReport(dataset=dataset, bits=params.encoder.bits,
                            epsilon=channel.epsilon, method=method, mode=mode,
                            draws=draws, seed=seed, images=split.shape[0],
                            distortion=float(total / split.shape[0]))


def markov_chain(params: ModelParams, channel: ChannelSpec, x0: np.ndarray,
                 steps: int, rng: np.random.Generator) -> np.ndarray:
    """Alternate noisy encoding and decoding starting from a data point.

    Each transition samples a code from the encoder probabilities, corrupts
    it through the exact channel, then draws the next state from the decoder:
    Bernoulli pixels are sampled, Gaussian states use the mean (unit-variance
    samples would drown images in noise). Returns (steps+1, n) states.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x0 = np.asarray(x0, dtype=np.float32).reshape(-1)
    states = np.empty((steps + 1, x0.size), dtype=np.float32)
    states[0] = x0
    x = x0[None, :]
    for t in range(steps):
        probs = params.encoder(x).data
        bits = sample_codes(probs, 1, rng)[0]
        erased = None
        if channel.epsilon > 0.0:
            if channel.kind == "bsc":
                bits = bsc_corrupt(bits, channel.epsilon, rng)
            elif channel.kind == "bec":
                bits, erased = bec_corrupt(bits, channel.epsilon, rng)
            else:
                raise ValueError("the adversarial channel is train-only")
        mean = np.clip(params.decoder(code_to_input(bits, erased)).mean.data, 0.0, 1.0)
        if params.decoder.family == "bernoulli":
            x = (rng.random(mean.shape) < mean).astype(np.float32)
        else:
            x = mean.astype(np.float32)
        states[t + 1] = x[0]
    return states


# -- image grids ---------------------------------------------------------------


def image_shape(n: int) -> tuple[int, int, int]:
    """Guess (height, width, channels) for a flat pixel vector of length n."""
    if n == 784:
        return 28, 28, 1
    if n == 3072:
        return 32, 32, 3
    side = int(round(np.sqrt(n)))
    if side * side == n:
        return side, side, 1
    return 1, n, 1


def emit_image_grid(images: np.ndarray, rows: int, cols: int, path: str) -> None:
    """Tile images row-major into a portable pixmap (PGM gray, PPM color).

    Values are clamped to [0, 1] and quantized to 8 bits; unused grid cells
    are filled mid-gray (128).
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise ValueError("expected (count, H, W) or (count, H, W, C) images")
    count, height, width, chans = images.shape
    if chans not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {chans}")
    if rows * cols < count:
        raise ValueError(f"grid {rows}x{cols} too small for {count} images")
    canvas = np.full((rows * height, cols * width, chans), 128, dtype=np.uint8)
    quantized = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    for idx in range(count):
        r, c = divmod(idx, cols)
        canvas[r * height:(r + 1) * height, c * width:(c + 1) * width] = quantized[idx]
    magic = b"P5" if chans == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (cols * width, rows * height))
        f.write(canvas.tobytes())


# -- report emission -------------------------------------------------------------

REPORT_COLUMNS = ("dataset", "bits", "epsilon", "method", "mode", "draws",
                  "seed", "images", "distortion", "formula")


def write_reports_csv(reports, path: str) -> None:
    exists = os.path.exists(path)
    with open(path, "a", encoding="utf-8") as f:
        if not exists:
            f.write(",".join(REPORT_COLUMNS) + "\n")
        for r in reports:
            values = [r.dataset, r.bits, f"{r.epsilon:.6f}", r.method, r.mode,
                      r.draws, r.seed, r.images, f"{r.distortion:.6f}",
                      '"%s"' % r.formula]
            f.write(",".join(str(v) for v in values) + "\n")


def format_table(reports) -> str:
    header = f"{'dataset':>14} {'bits':>5} {'eps':>5} {'method':>7} {'mode':>7} {'draws':>5} {'distortion':>12}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(f"{r.dataset:>14} {r.bits:>5} {r.epsilon:>5.2f} {r.method:>7} "
                     f"{r.mode:>7} {r.draws:>5} {r.distortion:>12.4f}")
    return "\n".join(lines)
