"""Forward-hook activation capture and spatial mean pooling."""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import CaptureError
from .ftb import write_ftb, write_manifest, write_quality_csv

DEPTH_TAGS = ("0.00", "0.25", "0.50", "0.75", "1.00")


@dataclass
class LayerMap:
    """Ordered mapping of depth-ratio tags to module names in a generator.

    Tag 1.00 denotes the penultimate block: it must come before the output
    head, which is the caller's responsibility when choosing modules. The
    mapping is recorded in the exported manifest for provenance.
    """

    modules: dict = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.modules) != DEPTH_TAGS:
            raise CaptureError(
                f"layer map must name exactly the depth ratios {DEPTH_TAGS}, "
                f"got {tuple(self.modules)}"
            )
        if len(set(self.modules.values())) != len(DEPTH_TAGS):
            raise CaptureError("capture points must be distinct modules")

    @classmethod
    def evenly_spaced(cls, model: torch.nn.Module) -> "LayerMap":
        """Map depth ratios onto evenly spaced top-level children, with 1.00
        on the penultimate child (the last is assumed to be the output
        head)."""
        names = [name for name, _ in model.named_children()]
        if len(names) < 6:
            raise CaptureError(
                "need at least 6 top-level children to auto-place 5 capture "
                f"points before the output head, got {len(names)}"
            )
        body = names[:-1]  # exclude the output head
        idx = np.round(np.linspace(0, len(body) - 1, 5)).astype(int)
        if len(set(idx)) != 5:
            raise CaptureError("model too shallow for distinct capture points")
        return cls({tag: body[i] for tag, i in zip(DEPTH_TAGS, idx)})


def pool_activation(activation: torch.Tensor) -> torch.Tensor:
    """Spatial mean over H and W of an (N, C, H, W) activation -> (N, C)."""
    if activation.ndim != 4:
        raise CaptureError(
            f"expected a 4-D activation, got shape {tuple(activation.shape)}"
        )
    return activation.mean(dim=(2, 3))


def capture_pooled(model: torch.nn.Module, images: torch.Tensor,
                   layer_map: LayerMap) -> dict:
    """Run `model` on `images` and return {tag: (N, C) float32 array} of
    pooled activations at each capture point."""
    modules = dict(model.named_modules())
    grabbed: dict[str, torch.Tensor] = {}
    handles = []
    try:
        for tag, name in layer_map.modules.items():
            if name not in modules:
                raise CaptureError(f"capture point '{name}' not found in model")

            def hook(_mod, _inp, out, tag=tag):
                grabbed[tag] = out

            handles.append(modules[name].register_forward_hook(hook))
        with torch.no_grad():
            model(images)
    finally:
        for handle in handles:
            handle.remove()

    pooled = {}
    for tag in layer_map.modules:
        if tag not in grabbed:
            raise CaptureError(
                f"capture point for depth {tag} never fired during forward"
            )
        vec = pool_activation(grabbed[tag])
        # Cast on CPU so GPU use never changes the written bytes.
        pooled[tag] = vec.detach().cpu().to(torch.float32).numpy()
    return pooled


def export_features(model, images, layer_map, out_dir, sample_ids,
                    quality=None, dataset_id="export") -> str:
    """Export pooled per-layer features for `images` as a manifest tree the
    toolkit can load. Returns the manifest path.

    `quality`, when given, maps metric name -> per-sample values and is
    written alongside as quality.csv; otherwise an empty-column table with
    only sample IDs is not emitted and the manifest references quality.csv
    that the caller must provide before loading.
    """
    images = torch.as_tensor(images)
    if images.ndim != 4:
        raise CaptureError(
            f"expected an (N, C, H, W) image batch, got {tuple(images.shape)}"
        )
    if images.shape[0] != len(sample_ids):
        raise CaptureError("sample_ids misaligned with image batch")

    was_training = model.training
    model.eval()
    try:
        pooled = capture_pooled(model, images, layer_map)
    finally:
        model.train(was_training)

    out_dir.mkdir(parents=True, exist_ok=True)
    layer_files = {}
    for tag, feats in pooled.items():
        fname = f"layer_{tag}.ftb"
        write_ftb(out_dir / fname, feats)
        layer_files[tag] = fname
    if quality is not None:
        write_quality_csv(out_dir / "quality.csv", sample_ids, quality)
    manifest_path = out_dir / "manifest.json"
    write_manifest(
        manifest_path, dataset_id, layer_files, "quality.csv", sample_ids,
        extra={"capture_points": dict(layer_map.modules)},
    )
    return str(manifest_path)
