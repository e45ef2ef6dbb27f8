"""Point cloud classification from random walks over k-nearest-neighbour graphs."""

from .errors import ConfigError, DataError, NumericError
from .point_set import PointCloud, load_manifest, load_xyz, normalize, synth_shape
from .spatial_index import KdTree
from .walker import Walk, WalkParams, generate_walk, generate_walks, prepare_shape
from .neural_core import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train
from .inference import aggregate, classify_dataset, classify_shape, retrieve

__version__ = "0.1.0"
