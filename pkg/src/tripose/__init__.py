"""Pose-aware descriptor learning with triplet and pair losses over rendered object views."""
from .dataset import DatasetConfig, SampleSet, build_all, load_set, save_set
from .embed import EmbeddingNet
from .geometry import Quaternion, quat_angle, subdivide_icosahedron
from .knn import DescriptorDB, build_db
from .loss import dynamic_margin, pair_loss, total_loss, triplet_loss
from .train import TrainConfig, train

__version__ = "0.1.0"
