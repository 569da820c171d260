"""Tightly coupled 2D LiDAR / IMU / wheel-odometry SLAM."""

__version__ = "0.1.0"
