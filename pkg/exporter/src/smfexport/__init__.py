"""Checkpoint-to-SMF exporter: torch or npz weights in, attackable model out."""

from .core import (ExportError, ExportPlan, export, infer_mapping,
                   load_arch, load_checkpoint, slot_shapes, verify_golden)

__version__ = "0.1.0"
