''' Terrain and volumetric mapping: elevation grid, semantic labelling, voxel map'''
from . import elevation, semantic, voxel
