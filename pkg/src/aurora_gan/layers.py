"""Equalized-learning-rate building blocks shared by the generator and discriminator."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def lrelu(x, slope=0.2, gain=math.sqrt(2.0)):
    return F.leaky_relu(x, slope) * gain


class EqualLinear(nn.Module):
    """Linear layer with runtime weight scaling (weights stored at unit variance).

    ``zero_init`` creates an all-zero weight, used for residual output
    projections that must be identity at initialization.
    """

    def __init__(self, in_features, out_features, bias=True, bias_init=0.0,
                 lr_mul=1.0, zero_init=False, activation=None):
        super().__init__()
        if zero_init:
            weight = torch.zeros(out_features, in_features)
        else:
            weight = torch.randn(out_features, in_features) / lr_mul
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init))) if bias else None
        self.scale = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul
        self.activation = activation

    def forward(self, x):
        bias = self.bias * self.lr_mul if self.bias is not None else None
        out = F.linear(x, self.weight * self.scale, bias)
        if self.activation == "lrelu":
            out = lrelu(out)
        return out

    def extra_repr(self):
        return f"{self.weight.shape[1]}, {self.weight.shape[0]}, act={self.activation}"


class EqualConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 bias=True, zero_init=False):
        super().__init__()
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = nn.Parameter(torch.zeros(shape) if zero_init else torch.randn(shape))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias,
                        stride=self.stride, padding=self.padding)


def upsample2x(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def downsample2x(x):
    return F.avg_pool2d(x, 2)
