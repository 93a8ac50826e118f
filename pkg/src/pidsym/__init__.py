"""One-shot recognition of line-drawn symbols in P&ID raster sheets.

The pipeline: binarize a scanned sheet, vectorize its contours, sample the
curves at a fixed interval, split the points into pipeline segments and
candidate symbol regions, and classify each region with a dynamic-graph
edge-convolution network trained from one prototype per class.
"""

__version__ = "0.1.0"

SCHEMA_VERSION = 1
