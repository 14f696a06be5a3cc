"""Concept saliency maps for variational autoencoders.

Train a convolutional VAE, turn labelled or correlated samples into concept
vectors in latent space, score inputs by dot product with a concept, and
backpropagate that score to the pixels under vanilla, guided or rectified
ReLU rules.
"""

from .autodiff.rules import BackpropRule
from .concepts import ConceptVector, concept_from_attribute, concept_from_correlation, concept_score
from .data import Dataset, gen_squares, gen_st_layers, load_dataset, save_dataset
from .saliency import SaliencyMap, SmoothGradConfig, clip_negative, concept_saliency, smooth_grad
from .vae import VaeModel, decode, encode, init_model, preset, train

__version__ = "0.1.0"

__all__ = [
    "BackpropRule", "ConceptVector", "Dataset", "SaliencyMap", "SmoothGradConfig", "VaeModel",
    "clip_negative", "concept_from_attribute", "concept_from_correlation", "concept_saliency",
    "concept_score", "decode", "encode", "gen_squares", "gen_st_layers", "init_model",
    "load_dataset", "preset", "save_dataset", "smooth_grad", "train",
]
