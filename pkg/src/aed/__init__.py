"""Object-centric abnormal event detection with adversarially trained auto-encoders."""

__version__ = "0.1.0"
