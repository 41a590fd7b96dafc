"""
The two toy encoders. The specialist is an EEGNet-style temporal-then-spatial
convolution stack; the foundation stand-in is a wider temporal convolution
stack followed by a Linear-ELU-BatchNorm projection head.
"""

import torch
from torch import nn

from fused_sfda.classes.helper_classes import FMEncoderConfig, SMEncoderConfig


class SpecialistEncoder(nn.Module):
    """
    Compact encoder: temporal convolution, depthwise spatial convolution across
    all channels, separable convolution, then a linear fusion layer to
    ``feature_dim``.
    """

    def __init__(self, channels: int, samples: int, cfg: SMEncoderConfig) -> None:
        """
        Args:
            channels (int): Number of input channels C.
            samples (int): Number of time points T.
            cfg (SMEncoderConfig): Layer sizes.
        """
        super().__init__()
        f1 = cfg.temporal_filters
        f1d = f1 * cfg.depth_multiplier
        f2 = cfg.separable_filters

        self.temporal = nn.Sequential(
            nn.Conv2d(
                1,
                f1,
                kernel_size=(1, cfg.kernel_length),
                padding=(0, cfg.kernel_length // 2),
                bias=False,
            ),
            nn.BatchNorm2d(f1),
        )
        self.spatial = nn.Sequential(
            nn.Conv2d(f1, f1d, kernel_size=(channels, 1), groups=f1, bias=False),
            nn.BatchNorm2d(f1d),
            nn.ELU(),
            nn.AvgPool2d(kernel_size=(1, min(4, samples))),
            nn.Dropout(p=cfg.dropout),
        )
        self.separable = nn.Sequential(
            nn.Conv2d(
                f1d,
                f1d,
                kernel_size=(1, cfg.separable_kernel),
                padding=(0, cfg.separable_kernel // 2),
                groups=f1d,
                bias=False,
            ),
            nn.Conv2d(f1d, f2, kernel_size=1, bias=False),
            nn.BatchNorm2d(f2),
            nn.ELU(),
            nn.AdaptiveAvgPool2d((1, cfg.pooled_length)),
            nn.Dropout(p=cfg.dropout),
        )
        self.fusion = nn.Sequential(
            nn.Flatten(),
            nn.Linear(f2 * cfg.pooled_length, cfg.feature_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.unsqueeze(1)
        x = self.temporal(x)
        x = self.spatial(x)
        x = self.separable(x)
        return self.fusion(x)


class FoundationEncoder(nn.Module):
    """
    Wider encoder: ``layers`` temporal convolutions over all channels, adaptive
    pooling, then the Linear-ELU-BatchNorm projection head. The head counts as
    part of the backbone, so it is frozen with it during adaptation.
    """

    def __init__(self, channels: int, samples: int, cfg: FMEncoderConfig) -> None:
        super().__init__()
        blocks: list[nn.Module] = []
        in_channels = channels
        for _ in range(cfg.layers):
            blocks.append(
                nn.Conv1d(
                    in_channels,
                    cfg.hidden,
                    kernel_size=cfg.kernel_length,
                    padding=cfg.kernel_length // 2,
                )
            )
            blocks.append(nn.GELU())
            in_channels = cfg.hidden
        self.backbone = nn.Sequential(
            *blocks,
            nn.AdaptiveAvgPool1d(cfg.pooled_length),
            nn.Flatten(),
            nn.Dropout(p=cfg.dropout),
        )
        self.projection = nn.Sequential(
            nn.Linear(cfg.hidden * cfg.pooled_length, cfg.feature_dim),
            nn.ELU(),
            nn.BatchNorm1d(cfg.feature_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.projection(self.backbone(x))
