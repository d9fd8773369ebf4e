"""Whole-body (body, foot, face, hand) pose annotation, top-down inference geometry and evaluation."""
from .anno import Box, Dataset, ImageInfo, PersonInstance, parse_dataset, read_dataset, write_dataset
from .evaluation import EvalConfig, SigmaTable, evaluate, evaluate_parts, oks

__all__ = [
    "Box", "Dataset", "ImageInfo", "PersonInstance", "parse_dataset", "read_dataset", "write_dataset",
    "EvalConfig", "SigmaTable", "evaluate", "evaluate_parts", "oks",
]
__version__ = "0.1.0"
