"""
Utils package for the RIS spoofing simulator

Dataset, detector-bundle and policy persistence.
"""

from .artifact_io import (
    load_bundle,
    load_cluster_model,
    load_policy,
    read_dataset,
    read_manifest,
    save_bundle,
    save_cluster_model,
    save_policy,
    write_dataset,
    write_manifest,
)

__all__ = [
    'load_bundle',
    'load_cluster_model',
    'load_policy',
    'read_dataset',
    'read_manifest',
    'save_bundle',
    'save_cluster_model',
    'save_policy',
    'write_dataset',
    'write_manifest',
]

__version__ = '1.0.0'
