"""Fully-convolutional Naive Bayes Non-Linear Learning (FC-NBNL).

Part-based image classification: a small fully-convolutional extractor turns
each image (at several scales) into grids of local descriptors, and a
prototype-based head scores them. The extractor and the prototypes are
trained jointly by SGD.
"""

__version__ = "0.1.0"
