"""Multimodal EMG/IMU force estimation with convolutional base learners."""

__version__ = "0.1.0"

EMG_FS = 2048.0
IMU_FS = 500.0
BIODEX_FS = 1250.0
