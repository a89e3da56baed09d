"""Open-vocabulary semantic segmentation by cost aggregation over vision-language similarity maps."""

__version__ = "0.1.0"
