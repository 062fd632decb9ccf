"""Full-body motion from head and hand tracking, guided by a learned motion prior."""
from . import dataio, errors, kernels, kinematics, signals
from .dataio import MotionClip, SynthConfig, load_motion, save_motion, synth_generate
from .kinematics import SkeletonModel, default_skeleton, forward_kinematics, rot6d_decode, rot6d_encode
from .signals import SparseSignals, augment, normalize_horizontal

__version__ = "0.1.0"

__all__ = [
    "MotionClip", "SkeletonModel", "SparseSignals", "SynthConfig", "augment", "dataio", "default_skeleton",
    "errors", "forward_kinematics", "kernels", "kinematics", "load_motion", "normalize_horizontal",
    "rot6d_decode", "rot6d_encode", "save_motion", "signals", "synth_generate",
]
