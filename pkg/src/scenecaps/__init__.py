"""scenecaps: bi-directional neural-symbolic scene engine.

De-renders raster images into attributed scene graphs with a capsule
network, renders scene graphs back to pixels, and grows new capsules
through oracle-guided meta-learning.
"""

__version__ = "0.1.0"
