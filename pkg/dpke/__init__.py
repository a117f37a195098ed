"""
DPKE - semi-supervised 3D object detection with dual-perspective knowledge enrichment.
A numpy vote detector trained student/teacher style on synthetic indoor scenes.
"""

__version__ = "1.0.0"
__author__ = "DPKE Team"
