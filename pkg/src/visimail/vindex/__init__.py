"""Embedded nearest-neighbour index: exact flat scan or HNSW, with a checksummed file format."""
from .hnsw import HNSWGraph
from .index import EF_RANGE_CAP, Hit, HNSWParams, IndexMeta, VectorIndex, load_index

__all__ = ["EF_RANGE_CAP", "HNSWGraph", "HNSWParams", "Hit", "IndexMeta", "VectorIndex", "load_index"]
