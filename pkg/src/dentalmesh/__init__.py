"""Tooth segmentation and landmark localization on 3D intraoral scans."""

__version__ = "0.1.0"
