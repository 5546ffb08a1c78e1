"""
Organ segmentation from deeply supervised interior and boundary maps,
watershed superpixel proposals and random-forest spatial aggregation.

Modules: gridmath (conv/resize primitives), preprocess (volumes, windowing,
slices), hnn (network, losses, training), proposals (watershed, hierarchy,
optimal labeling), forest, aggregate (features, calibration, stacking),
metrics, phantom, harness (cross-validation) and cli.
"""

__version__ = "0.1.0"
