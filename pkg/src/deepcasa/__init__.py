"""Two-stage talker-independent speaker separation: a Dense-UNet separates
each frame (simultaneous grouping) and a TCN with K-means links frames into
speaker streams (sequential grouping)."""

__version__ = "0.1.0"
