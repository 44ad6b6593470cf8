"""Speed-field tracking control, reconstruction networks and their learning rules."""

from .control import AffineIdModel, SdsController, time_varying_track, track_speed_field
from .deconv import DeconvUnit, convolve, deconvolve, diagonalize, mix_coordinates
from .hierarchy import Hierarchy, HierarchyLevel, build_hierarchy, step_hierarchy, verify_feedforward
from .learning import LearningConfig, IcaState, run_learning_epoch
from .plant import Box, Plant, SpeedField, affine_plant, reduce_order
from .recon import ReconNet, relax_simple, relaxation_time

__version__ = "0.1.0"
