"""Loss components for code-level training.

Contains the adversarial flip-mask construction, the per-bit entropy terms
and density-ratio total-correlation estimate that make up the information
loss, and the K-sample reconstruction bound with its score-function gradient
estimator (leave-one-out baselines).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import PROB_EPS, log_likelihood

LN2 = float(np.log(2.0))


# -- adversarial bit flips -------------------------------------------------


def flip_mask(bits: np.ndarray, loss_grad: np.ndarray) -> np.ndarray:
    """Mark the bits whose flip would increase the reconstruction loss.

    `loss_grad` is the gradient of the loss (negative log-likelihood) with
    respect to the code treated as a real vector. Bit i is attackable when
    the gradient points out of its current value: (y=0, g>0) or (y=1, g<0).
    Zero gradient means the bit is left alone.
    """
    bits = np.asarray(bits)
    grad = np.asarray(loss_grad)
    if bits.shape != grad.shape:
        raise ValueError(f"bits shape {bits.shape} != grad shape {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("loss gradient must be finite")
    on = bits > 0.5
    mask = (~on & (grad > 0)) | (on & (grad < 0))
    return mask.astype(bits.dtype)


def apply_flip(bits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """XOR the flip mask into the code: y'_i = y_i XOR m_i."""
    bits = np.asarray(bits)
    mask = np.asarray(mask)
    if bits.shape != mask.shape:
        raise ValueError(f"bits shape {bits.shape} != mask shape {mask.shape}")
    return (bits + mask - 2.0 * bits * mask).astype(bits.dtype)


# -- information terms -----------------------------------------------------


def _binary_entropy(p: Tensor) -> Tensor:
    p = ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(p * ad.log(p) + (1.0 - p) * ad.log(1.0 - p))


def marginal_entropy(batch_probs) -> Tensor:
    """Per-bit entropy of the batch-averaged Bernoulli parameters, in nats."""
    probs = batch_probs if isinstance(batch_probs, Tensor) else Tensor(np.asarray(batch_probs))
    if probs.data.ndim != 2:
        raise ValueError("expected an (N, M) batch of probabilities")
    return _binary_entropy(probs.mean(axis=0))


def conditional_entropy(batch_probs) -> Tensor:
    """Per-bit mean over the batch of each sample's Bernoulli entropy, in nats."""
    probs = batch_probs if isinstance(batch_probs, Tensor) else Tensor(np.asarray(batch_probs))
    if probs.data.ndim != 2:
        raise ValueError("expected an (N, M) batch of probabilities")
    return _binary_entropy(probs).mean(axis=0)


def permute_per_dimension(codes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independently shuffle each column of a code batch.

    Turns N samples of the joint code distribution into N samples of the
    product of its per-bit marginals.
    """
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[0] < 2:
        raise ValueError("need an (N, M) batch with N >= 2")
    order = np.argsort(rng.random(codes.shape), axis=0)
    return np.take_along_axis(codes, order, axis=0)


def classifier_loss(real_codes, permuted_codes, classifier) -> Tensor:
    """Discrimination objective E[log C(y)] + E[log(1 - C(y*))], to maximize.

    Both batches enter as constants, so gradients reach only the classifier.
    """
    real = np.asarray(real_codes.data if isinstance(real_codes, Tensor) else real_codes)
    perm = np.asarray(permuted_codes.data if isinstance(permuted_codes, Tensor) else permuted_codes)
    c_real = classifier(real)
    c_perm = classifier(perm)
    return ad.log(c_real).mean() + ad.log(1.0 - c_perm).mean()


def tc_estimate(codes, classifier) -> Tensor:
    """Total-correlation estimate: mean classifier log-odds over the batch.

    Pass a Tensor of probabilities to let gradients reach the encoder, or a
    plain array for a detached estimate.
    """
    c = classifier(codes)
    return (ad.log(c) - ad.log(1.0 - c)).mean()


@dataclass
class InfoLossReport:
    marginal_entropies: np.ndarray
    conditional_entropies: np.ndarray
    mi_sum: float
    tc: float
    l_info: float


def info_loss(batch_probs, codes, classifier, tc_gradient: str = "passthrough"):
    """Assemble the information objective sum_d (H(Y_d) - H(Y_d|X)) - TC.

    `tc_gradient` selects how the total-correlation term treats the encoder:
    "passthrough" evaluates the classifier on the (differentiable) batch
    probabilities; "estimate" evaluates it on the sampled hard codes, making
    TC a report-only value with no encoder gradient. Returns the loss Tensor
    (to maximize) and an InfoLossReport of its pieces.
    """
    if tc_gradient not in ("passthrough", "estimate"):
        raise ValueError(f"unknown tc_gradient mode {tc_gradient!r}")
    probs = batch_probs if isinstance(batch_probs, Tensor) else Tensor(np.asarray(batch_probs))
    h_marginal = marginal_entropy(probs)
    h_conditional = conditional_entropy(probs)
    mi_sum = (h_marginal - h_conditional).sum()
    if tc_gradient == "passthrough":
        tc = tc_estimate(probs, classifier)
    else:
        tc = tc_estimate(np.asarray(codes), classifier)
    loss = mi_sum - tc
    report = InfoLossReport(
        marginal_entropies=np.array(h_marginal.data, dtype=np.float64),
        conditional_entropies=np.array(h_conditional.data, dtype=np.float64),
        mi_sum=float(mi_sum.data),
        tc=float(tc.data),
        l_info=float(loss.data),
    )
    return loss, report


# -- multi-sample reconstruction bound --------------------------------------


def _log_likelihood_matrix(x: np.ndarray, codes: np.ndarray, decoder):
    """Log-likelihood of x under each of K codes per datapoint.

    Returns (ll Tensor of shape (K, N), decoder means array of shape (K*N, n)).
    """
    k, n, bits = codes.shape
    out = decoder(Tensor(codes.reshape(k * n, bits)))
    tiled = np.tile(np.asarray(x), (k, 1))
    return log_likelihood(tiled, out).reshape((k, n)), out.mean.data


def multisample_bound(x, codes, decoder) -> Tensor:
    """log (1/K) sum_i q(x | y_i) for one datapoint, via stable log-mean-exp."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError("expected (K, M) codes for a single datapoint")
    x = np.asarray(x).reshape(1, -1)
    bounds = multisample_bound_batch(x, codes[:, None, :], decoder)
    return bounds.reshape(())


def multisample_bound_batch(x, codes, decoder) -> Tensor:
    """Per-datapoint K-sample bound, shape (N,), for codes of shape (K, N, M)."""
    codes = np.asarray(codes)
    k = codes.shape[0]
    ll, _ = _log_likelihood_matrix(x, codes, decoder)
    return ll.logsumexp(axis=0) - float(np.log(k))


def _leave_one_out_signals(ll: np.ndarray) -> np.ndarray:
    """Per-sample learning signals: bound minus bound with sample i's
    log-likelihood replaced by the mean of the others'. Shape (K, N)."""
    ll = ll.astype(np.float64)
    k = ll.shape[0]
    log_k = np.log(k)
    m = ll.max(axis=0, keepdims=True)
    bound = m.squeeze(0) + np.log(np.exp(ll - m).sum(axis=0)) - log_k
    loo_mean = (ll.sum(axis=0, keepdims=True) - ll) / (k - 1)
    signals = np.empty_like(ll)
    for i in range(k):
        swapped = ll.copy()
        swapped[i] = loo_mean[i]
        ms = swapped.max(axis=0, keepdims=True)
        bound_i = ms.squeeze(0) + np.log(np.exp(swapped - ms).sum(axis=0)) - log_k
        signals[i] = bound - bound_i
    return signals


def vimco_surrogate(x, probs: Tensor, codes: np.ndarray, decoder):
    """Scalar surrogate whose backward pass yields the multi-sample gradients.

    Decoder parameters receive the ordinary backprop gradient of the bound;
    the code distribution `probs` receives the score-function gradient with
    leave-one-out baselines (signals detached). Returns (surrogate, bound,
    means): bound is the per-datapoint Tensor of bound values, shape (N,),
    and means are the decoder output values, shape (K*N, n), for reporting.
    """
    codes = np.asarray(codes)
    k, n, bits = codes.shape
    if k < 2:
        raise ValueError("score-function gradients need K >= 2 samples")
    ll, means = _log_likelihood_matrix(x, codes, decoder)
    bound = ll.logsumexp(axis=0) - float(np.log(k))
    signals = _leave_one_out_signals(ll.data)

    p = probs.reshape((1, n, bits))
    log_prob = (codes * ad.log(p) + (1.0 - codes) * ad.log(1.0 - p)).sum(axis=2)
    score = (signals.astype(probs.data.dtype) * log_prob).sum()
    surrogate = (bound.sum() + score) * (1.0 / n)
    return surrogate, bound, means


def vimco_gradients(x, probs, k: int, decoder, rng: np.random.Generator):
    """Sample K codes from `probs` and estimate gradients of the K-sample bound.

    Returns (grad wrt probs, dict of decoder parameter grads, mean bound).
    The decoder grads are plain arrays; existing decoder .grad buffers are
    cleared first.
    """
    from .nets import sample_codes

    p = Tensor(np.asarray(probs.data if isinstance(probs, Tensor) else probs))
    if p.data.ndim != 2:
        raise ValueError("expected (N, M) probabilities")
    codes = sample_codes(p.data, k, rng)
    for t in decoder.params.values():
        t.grad = None
    surrogate, bound, _ = vimco_surrogate(x, p, codes, decoder)
    surrogate.backward()
    dec_grads = {name: np.array(t.grad) for name, t in decoder.params.items()}
    return p.grad, dec_grads, float(bound.data.mean())


def vimco_unbiasedness_check(total_draws: int = 1_000_000, chunk: int = 5_000,
                             seed: int = 0, se_limit: float = 3.0):
    """Check the score-function estimator against exhaustive enumeration.

    On a 3-bit, K=2 toy with a fixed tiny decoder, the exact gradient of the
    expected two-sample bound with respect to the Bernoulli probabilities is
    computable by summing over all 64 code pairs. The estimator's mean over
    `total_draws` draws must match it within `se_limit` standard errors,
    component-wise. Returns (passed, max_z, est_mean, exact).
    """
    from .nets import Decoder, sample_codes

    bits, k, n_out = 3, 2, 4
    rng = np.random.default_rng(seed)
    decoder = Decoder(bits, n_out, "bernoulli", hidden=5, layers=1,
                      rng=rng, dtype=np.float64)
    x_single = np.array([1.0, 0.0, 1.0, 1.0], dtype=np.float64)
    p_single = np.array([0.25, 0.6, 0.85], dtype=np.float64)

    # Exact gradient by enumeration over all 8 codes / 64 ordered pairs.
    all_codes = np.array([[(c >> b) & 1 for b in range(bits)] for c in range(2 ** bits)],
                         dtype=np.float64)
    ll_t, _ = _log_likelihood_matrix(x_single[None, :], all_codes[:, None, :], decoder)
    ll8 = ll_t.data.reshape(-1).astype(np.float64)
    prob8 = np.prod(np.where(all_codes > 0.5, p_single, 1.0 - p_single), axis=1)
    dprob8 = prob8[:, None] * (all_codes - p_single) / (p_single * (1.0 - p_single))
    bound_ab = np.logaddexp(ll8[:, None], ll8[None, :]) - np.log(2.0)
    # d/dp sum_ab P(a)P(b)B(a,b), using symmetry of B.
    exact = 2.0 * np.einsum("aj,b,ab->j", dprob8, prob8, bound_ab)

    draws_done = 0
    rows = []
    while draws_done < total_draws:
        size = min(chunk, total_draws - draws_done)
        p = Tensor(np.tile(p_single, (size, 1)))
        codes = sample_codes(p.data, k, rng)
        x = np.tile(x_single, (size, 1))
        surrogate, _, _ = vimco_surrogate(x, p, codes, decoder)
        for t in decoder.params.values():
            t.grad = None
        surrogate.backward()
        # Rows of p.grad are independent per-draw estimates scaled by 1/size.
        rows.append(np.asarray(p.grad, dtype=np.float64) * size)
        draws_done += size
    rows = np.concatenate(rows, axis=0)
    est_mean = rows.mean(axis=0)
    se = rows.std(axis=0, ddof=1) / np.sqrt(rows.shape[0])
    z = np.abs(est_mean - exact) / se
    return bool(np.all(z <= se_limit)), float(z.max()), est_mean, exact
