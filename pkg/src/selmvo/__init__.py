"""RGB-D visual odometry front end with pluggable feature extraction and matching."""

__version__ = "0.1.0"
