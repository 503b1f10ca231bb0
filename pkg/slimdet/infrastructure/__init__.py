"""
Infrastructure layer: configuration, file formats, image I/O and dataset sources.
"""
