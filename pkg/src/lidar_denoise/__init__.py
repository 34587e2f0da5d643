"""Lidar weather de-noising: range images, autolabeling, fog/rain augmentation,
geometric outlier filters, a from-scratch WeatherNet and IoU evaluation."""

from .core import Label, PointCloud, RangeImage, SensorModel, crop_fov, decode_frame, encode_frame, project_scan

__all__ = ["Label", "PointCloud", "RangeImage", "SensorModel", "crop_fov", "decode_frame", "encode_frame",
           "project_scan"]
__version__ = "0.1.0"
