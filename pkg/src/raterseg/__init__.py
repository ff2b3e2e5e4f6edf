"""Multi-rater segmentation with a conditional latent-variable model, in plain numpy.

The package is organised bottom-up: ``autodiff`` (tape-based reverse mode),
``nets`` (encoder, decoder and U-Net segmenter as pure functions of parameter
sets), ``objective`` (the training loss and a discrete ELBO oracle),
``synthetic`` (multi-rater datasets), ``trainer`` (Adam, baselines,
checkpoints) and ``evaluation`` (sampling and continuous Dice).
"""
from .autodiff import Tape, Tensor, backward, finite_diff_check
from .evaluation import (confidence_map, continuous_dice, disagreement_map, evaluate_model,
                         sample_segmentations, uncertainty_correlation)
from .nets import ArchConfig, ModelTriple, ParamSet, init_params
from .objective import LossWeights, total_loss
from .synthetic import AnnotatedSample, DatasetManifest, generate_dataset, read_dataset, write_dataset
from .trainer import (BaselineNet, TrainConfig, load_checkpoint, save_checkpoint, train_independent_baseline,
                      train_joint, train_mc_dropout_baseline)

__version__ = "0.1.0"
