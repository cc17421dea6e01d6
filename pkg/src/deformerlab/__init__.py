"""Learned shape servoing of a simulated deformable box."""

__version__ = "0.1.0"

from .dataset import Dataset  # noqa: E402
from .dnet import BaselineNet, DeformerNet, TrainConfig, forward, forward_mp, train, train_baseline_head  # noqa: E402
from .geom import PointCloud, chamfer, fps  # noqa: E402
from .mp import select_mp  # noqa: E402
from .pipeline import GenConfig, evaluate, generate_dataset, load_dataset, save_dataset  # noqa: E402
from .servo import ServoConfig, run_full_pipeline, run_servo  # noqa: E402
