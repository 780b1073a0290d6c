"""Binary joint source-channel coding: infomax + adversarial bit-flip training.

A self-contained numpy implementation of noise-robust binary autoencoding:
a reverse-mode autodiff core, mean-field bit encoders and amortized decoders,
exact and relaxed discrete channels, information-maximization and adversarial
flip objectives, training/evaluation loops and a CLI.
"""

from .autodiff import GradCheckReport, NonFiniteError, Tensor, grad_check
from .channels import (ChannelSpec, adversarial_perturbed_bernoulli,
                       allocate_adversarial_noise, bec_corrupt, bsc_corrupt,
                       perturbed_bernoulli)
from .data import Dataset, binarize, load_cifar, load_dataset, load_idx, split
from .evaluate import DistortionReport, distortion, emit_image_grid, markov_chain, reconstruct
from .nets import (Classifier, Decoder, DecoderOutput, Encoder, ModelParams,
                   log_likelihood, sample_codes)
from .objectives import (InfoLossReport, apply_flip, classifier_loss, conditional_entropy,
                         flip_mask, info_loss, marginal_entropy, multisample_bound,
                         permute_per_dimension, tc_estimate, vimco_gradients)
from .training import (Adam, Checkpoint, TrainConfig, TrainResult, TrainingDiverged,
                       load_checkpoint, resume, save_checkpoint, train, train_step)

__version__ = "0.1.0"
