"""Conditional flow-matching synthesis of dubbing features from video, scene and script conditions."""

__version__ = "0.1.0"
