"""Unsupervised tree instance segmentation of forest laser scanning point clouds."""

__version__ = "0.1.0"

from .circlefit import *
from .clustering import *
from .config import *
from .crown import *
from .gam import *
from .io import *
from .metrics import *
from .pipeline import *
from .pointcloud import *
from .stems import *
from .synthetic import *
from .terrain import *
