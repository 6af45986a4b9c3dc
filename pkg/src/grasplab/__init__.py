"""grasplab: a desk-scale laboratory for data-efficient planar grasp learning.

A seeded 2.5-D bin simulator stands in for the robot; a five-layer
fully-convolutional value network scores a 96000-cell discrete grasp space;
four selection rules drive exploration; training uses class balancing,
asymmetric error weights, a hash-stable train/test split, and
agreement-weighted retraining; an n-out-of-m protocol measures grasp rates.
"""

__version__ = "0.1.0"

from .config import LabConfig, load_config, save_config      # noqa: F401
