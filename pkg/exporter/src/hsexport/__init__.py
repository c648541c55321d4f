"""Model-side adapter for the halluscope toolkit.

Captures intermediate generator activations with forward hooks, pools them
to per-sample feature vectors, exports quality tables (PSNR plus a
perceptual-distance column), and generates PGD adversarial inputs. All
output goes through the toolkit's on-disk formats (FTB v1 tensors, manifest
JSON, quality CSV); this package never imports the toolkit itself.
"""

from .attack import AttackSpec, pgd_attack
from .capture import LayerMap, export_features, pool_activation
from .errors import CaptureError, ExporterError
from .ftb import write_ftb, write_manifest, write_quality_csv
from .quality import PerceptualNet, export_quality, perceptual_distance, psnr

__all__ = [
    "AttackSpec",
    "CaptureError",
    "ExporterError",
    "LayerMap",
    "PerceptualNet",
    "export_features",
    "export_quality",
    "perceptual_distance",
    "pgd_attack",
    "pool_activation",
    "psnr",
    "write_ftb",
    "write_manifest",
    "write_quality_csv",
]
