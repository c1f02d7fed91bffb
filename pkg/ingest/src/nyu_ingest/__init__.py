"""Converter from the NYU Depth V2 labeled archive (MATLAB v7.3 / HDF5)
to the on-disk RGB-D dataset layout used by the inpainting lab."""

from nyu_ingest.convert import IngestConfig, convert

__all__ = ["IngestConfig", "convert"]
__version__ = "0.1.0"
