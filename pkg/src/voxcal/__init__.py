"""Monocular food-energy estimation on synthetic dishes.

RGB image -> voxel occupancy (conditional GAN) -> volume; RGB image -> class
probabilities and energy density (CNN regressor); an affine refinement of the
volume from the class probabilities; energy = density * refined volume.
"""
__version__ = "0.1.0"
