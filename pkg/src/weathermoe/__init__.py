"""Weather-routed mixture-of-experts 3D detection on synthetic LiDAR, radar and camera frames."""

__version__ = "0.1.0"
