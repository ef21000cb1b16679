"""Super encoding network: frozen single-modality encoders linked by trainable
recursive-association blocks, with a small reverse-mode autodiff core."""

from .adapters import ClassEmbeddings, InjectionTarget, context_inject, contrastive_predict
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, SENConfig, default_config, load_config, parse_config
from .encoders import EncoderConfig, SuperNeuron, build_super_neuron, encode
from .experiments import build_model, build_task, run
from .network import SEN, build_sen, count_parameters, trainable_parameters
from .ra import integrate, ra_forward, ra_param_count
from .tensor import NumericError, ShapeError, Tensor, no_grad
from .training import adamw_step, cosine_lr, grad_check, train

__version__ = "0.1.0"
