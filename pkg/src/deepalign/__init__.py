"""Multi-stage convolutional face alignment on numpy."""
