"""EEG to phase-locking graphs, an edge-gated graph attention classifier and its explanations."""
from .connectivity import BrainGraph, build_graph, plv_matrix, topk_sparsify
from .dsp import BANDS, BandSpec, Epoch, preprocess_recording, segment_epochs
from .explain import ExplainConfig, MaskSet, SaliencyBundle, optimize_masks
from .features import FEATURE_NAMES, FeatureConfig, extract_features
from .io import CHANNELS, Recording, load_model, load_recording, save_model, save_recording
from .model import ModelHyper, ModelParams, model_forward, predict_proba
from .trainer import TrainConfig, evaluate, make_folds, paired_t_test, train_fold

__version__ = "0.1.0"
