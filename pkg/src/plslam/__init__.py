"""Stereo visual SLAM back-end combining point and line-segment features."""

__version__ = "0.1.0"
