"""Entity-graph analytics for histopathology images.

The package turns RGB tissue images into entity graphs (cell graphs over
nuclei, tissue graphs over merged superpixel regions), trains graph neural
networks on them, and attributes predictions back to individual entities.
Everything runs on the CPU with no pretrained-model dependencies.
"""

__version__ = "0.1.0"

from histograph.raster import Image, GrayImage, LabelMap, EntityTable

__all__ = ["Image", "GrayImage", "LabelMap", "EntityTable", "__version__"]
