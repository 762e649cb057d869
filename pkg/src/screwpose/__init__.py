"""screwpose: synthetic radiographs and instrument pose estimation under noisy labels."""

__version__ = "0.1.0"
