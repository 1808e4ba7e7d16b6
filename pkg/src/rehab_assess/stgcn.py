"""Spatio-temporal graph convolutional classifier.

Each ST-Conv block is a sandwich: temporal gated convolution, first-order
spatial graph convolution with ReLU, temporal gated convolution. The blocks
are followed by mean pooling over joints, an LSTM over the remaining frames
and an affine + logistic head giving P(correct).

Tensors use the layout ``(batch, time, joint, channel)``.
"""
from __future__ import annotations

import contextlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, NumericalError, SchemaError
from .sequence import MotionSequence
from .skeleton import SkeletonGraph, build_normalized_adjacency

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    spatial_channels: int
    out_channels: int
    temporal_kernel_size: int = 9


DEFAULT_BLOCKS = (BlockSpec(3, 32, 32, 9), BlockSpec(32, 64, 64, 9))


def _as_block(b) -> BlockSpec:
    if isinstance(b, BlockSpec):
        return b
    if isinstance(b, dict):
        return BlockSpec(**b)
    return BlockSpec(*b)


@dataclass(frozen=True)
class StgcnConfig:
    blocks: tuple[BlockSpec, ...] = DEFAULT_BLOCKS
    lstm_hidden: int = 64
    epochs: int = 250
    batch_size: int = 8
    learning_rate: float = 1e-3
    grad_clip: float | None = 1.0  # max gradient norm; None disables
    seed: int = 0
    input_length: int = 100
    dtype: str = "float32"
    num_threads: int = 1

    def __post_init__(self):
        blocks = tuple(_as_block(b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise ConfigurationError("at least one ST-Conv block is required")
        for i, b in enumerate(blocks):
            k = b.temporal_kernel_size
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"block {i}: temporal_kernel_size must be odd and >= 1, got {k}")
            if min(b.in_channels, b.spatial_channels, b.out_channels) < 1:
                raise ConfigurationError(f"block {i}: channel counts must be positive")
            if i > 0 and blocks[i - 1].out_channels != b.in_channels:
                raise ConfigurationError(
                    f"block {i} expects {b.in_channels} input channels, "
                    f"block {i - 1} produces {blocks[i - 1].out_channels}"
                )
        for name in ("lstm_hidden", "epochs", "batch_size", "input_length", "num_threads"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigurationError("grad_clip must be positive or None")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.output_length < 1:
            raise ConfigurationError(
                f"input_length {self.input_length} is too short for the temporal kernels"
            )

    @property
    def output_length(self) -> int:
        """Frames left after all temporal convolutions (no padding)."""
        return self.input_length - sum(2 * (b.temporal_kernel_size - 1) for b in self.blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StgcnConfig":
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = tuple(_as_block(b) for b in d["blocks"])
        return cls(**d)


# --- functional layers --------------------------------------------------------


def spatial_graph_conv(features, adjacency, weights):
    """Linear graph convolution ``A_hat @ X_t @ W`` for every time step.

    ``features`` is ``(..., T, J, C_in)``; numpy in, numpy out.
    """
    as_numpy = isinstance(features, np.ndarray)
    x = torch.as_tensor(features)
    a = torch.as_tensor(adjacency, dtype=x.dtype)
    w = torch.as_tensor(weights, dtype=x.dtype)
    if x.dim() < 3 or a.shape != (x.shape[-2], x.shape[-2]) or w.dim() != 2 or w.shape[0] != x.shape[-1]:
        raise SchemaError(
            f"spatial_graph_conv shape mismatch: features {tuple(x.shape)}, "
            f"adjacency {tuple(a.shape)}, weights {tuple(w.shape)}"
        )
    out = torch.matmul(a, torch.matmul(x, w))
    return out.numpy() if as_numpy else out


def temporal_gated_conv(features, w_value, b_value, w_gate, b_gate):
    """Gated linear unit over time: ``(X*W1 + b1) * sigmoid(X*W2 + b2)``.

    Kernels have shape ``(k, C_in, C_out)`` and act on each joint separately
    with no padding, so ``T' = T - k + 1``. ``features`` is ``(..., T, J, C_in)``.
    """
    as_numpy = isinstance(features, np.ndarray)
    x = torch.as_tensor(features)
    w1 = torch.as_tensor(w_value, dtype=x.dtype)
    w2 = torch.as_tensor(w_gate, dtype=x.dtype)
    b1 = torch.as_tensor(b_value, dtype=x.dtype)
    b2 = torch.as_tensor(b_gate, dtype=x.dtype)
    if x.dim() < 3 or w1.dim() != 3 or w1.shape != w2.shape or w1.shape[1] != x.shape[-1]:
        raise SchemaError(
            f"temporal_gated_conv shape mismatch: features {tuple(x.shape)}, kernel {tuple(w1.shape)}"
        )
    k, _, c_out = w1.shape
    if b1.shape != (c_out,) or b2.shape != (c_out,):
        raise SchemaError("temporal_gated_conv bias shape mismatch")
    t, j = x.shape[-3], x.shape[-2]
    if t < k:
        raise SchemaError(f"sequence of {t} frames is shorter than temporal kernel {k}")
    lead = x.shape[:-3]
    xb = x.reshape(-1, t, j, x.shape[-1]).permute(0, 3, 1, 2)  # (B, C, T, J)
    weight = torch.cat([w1, w2], dim=2).permute(2, 1, 0).unsqueeze(-1)  # (2C_out, C_in, k, 1)
    y = F.conv2d(xb, weight, torch.cat([b1, b2]))
    y = y.permute(0, 2, 3, 1)  # (B, T', J, 2C_out)
    out = y[..., :c_out] * torch.sigmoid(y[..., c_out:])
    out = out.reshape(*lead, t - k + 1, j, c_out)
    return out.numpy() if as_numpy else out


# --- modules ----------------------------------------------------------------


class TemporalGatedConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in * kernel)
        self.w_value = nn.Parameter(torch.empty(kernel, c_in, c_out).uniform_(-bound, bound))
        self.b_value = nn.Parameter(torch.zeros(c_out))
        self.w_gate = nn.Parameter(torch.empty(kernel, c_in, c_out).uniform_(-bound, bound))
        self.b_gate = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return temporal_gated_conv(x, self.w_value, self.b_value, self.w_gate, self.b_gate)


class STConvBlock(nn.Module):
    def __init__(self, spec: BlockSpec):
        super().__init__()
        self.temporal1 = TemporalGatedConv(spec.in_channels, spec.spatial_channels, spec.temporal_kernel_size)
        bound = math.sqrt(6.0 / (2 * spec.spatial_channels))
        self.theta = nn.Parameter(
            torch.empty(spec.spatial_channels, spec.spatial_channels).uniform_(-bound, bound)
        )
        self.theta_bias = nn.Parameter(torch.zeros(spec.spatial_channels))
        self.temporal2 = TemporalGatedConv(spec.spatial_channels, spec.out_channels, spec.temporal_kernel_size)
        # per-channel affine only, so the block stays equivariant to joint relabeling
        self.norm_scale = nn.Parameter(torch.ones(spec.out_channels))
        self.norm_shift = nn.Parameter(torch.zeros(spec.out_channels))

    def forward(self, x, adjacency):
        x = self.temporal1(x)
        x = torch.relu(spatial_graph_conv(x, adjacency, self.theta) + self.theta_bias)
        x = self.temporal2(x)
        # layer normalization over (joint, channel) of every frame
        mean = x.mean(dim=(-2, -1), keepdim=True)
        var = x.var(dim=(-2, -1), unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + 1e-5) * self.norm_scale + self.norm_shift


class StgcnNet(nn.Module):
    def __init__(self, config: StgcnConfig, adjacency: np.ndarray):
        super().__init__()
        self.blocks = nn.ModuleList(STConvBlock(b) for b in config.blocks)
        self.lstm = nn.LSTM(config.blocks[-1].out_channels, config.lstm_hidden, batch_first=True)
        self.head = nn.Linear(config.lstm_hidden, 1)
        self.register_buffer("adjacency", torch.as_tensor(adjacency, dtype=torch.float32))

    def forward(self, x, adjacency=None):
        """Logits of P(correct) for a ``(B, T, J, C)`` batch."""
        a = self.adjacency if adjacency is None else torch.as_tensor(adjacency, dtype=x.dtype)
        for block in self.blocks:
            x = block(x, a)
        pooled = x.mean(dim=2)  # (B, T', C)
        _, (h, _) = self.lstm(pooled)
        return self.head(h[-1]).squeeze(-1)


@dataclass(eq=False)
class StgcnModel:
    config: StgcnConfig
    graph: SkeletonGraph
    net: StgcnNet
    training_history: list = field(default_factory=list)

    @property
    def normalized_adjacency(self) -> np.ndarray:
        return self.net.adjacency.detach().cpu().numpy().astype(np.float64)

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.named_parameters()}

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.config.dtype]


@contextlib.contextmanager
def _torch_threads(n: int):
    previous = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def init_model(config: StgcnConfig, graph: SkeletonGraph) -> StgcnModel:
    """Build a freshly initialized model; initialization is seeded by ``config.seed``."""
    if config.blocks[0].in_channels != graph.dimensionality:
        raise ConfigurationError(
            f"first block takes {config.blocks[0].in_channels} channels but "
            f"{graph.format_id!r} has {graph.dimensionality}D joints"
        )
    adjacency = build_normalized_adjacency(graph)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = StgcnNet(config, adjacency)
    net.to(_DTYPES[config.dtype])
    return StgcnModel(config, graph, net)


def sequences_to_tensor(sequences: Sequence[MotionSequence], model: StgcnModel) -> torch.Tensor:
    arrays = []
    for s in sequences:
        if s.graph != model.graph:
            raise SchemaError(
                f"sequence format {s.format_id!r} does not match model format {model.graph.format_id!r}"
            )
        if len(s) != model.config.input_length:
            raise SchemaError(
                f"sequence has {len(s)} frames; model expects input_length={model.config.input_length}"
            )
        arrays.append(s.frames)
    return torch.as_tensor(np.stack(arrays), dtype=model.dtype)


def forward_batch(model: StgcnModel, sequences: Sequence[MotionSequence]) -> np.ndarray:
    """P(correct) for each sequence."""
    x = sequences_to_tensor(sequences, model)
    model.net.eval()
    with torch.no_grad(), _torch_threads(model.config.num_threads):
        p = torch.sigmoid(model.net(x))
    return p.cpu().numpy().astype(np.float64)


def forward(model: StgcnModel, sequence: MotionSequence) -> float:
    return float(forward_batch(model, [sequence])[0])


def predict(model: StgcnModel, sequence: MotionSequence) -> str:
    return "correct" if forward(model, sequence) >= 0.5 else "incorrect"


def predict_batch(model: StgcnModel, sequences: Sequence[MotionSequence]) -> list[str]:
    return ["correct" if p >= 0.5 else "incorrect" for p in forward_batch(model, sequences)]


def loss_fn(net: StgcnNet, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(net(x), y)


def train(config: StgcnConfig, graph: SkeletonGraph, data) -> StgcnModel:
    """Train on ``(sequence, label)`` pairs for exactly ``config.epochs`` epochs.

    Mini-batch Adam on binary cross-entropy with gradient-norm clipping.
    Initialization and shuffling use
    separate streams derived from ``config.seed``.
    """
    data = list(data)
    labels = [lab for _, lab in data]
    if not ({"correct", "incorrect"} <= set(labels)):
        raise ConfigurationError("STGCN training needs at least one correct and one incorrect example")
    model = init_model(config, graph)
    x = sequences_to_tensor([s for s, _ in data], model)
    y = torch.as_tensor([1.0 if lab == "correct" else 0.0 for lab in labels], dtype=model.dtype)
    n = len(data)
    gen = torch.Generator().manual_seed(config.seed + 1)
    optimizer = torch.optim.Adam(model.net.parameters(), lr=config.learning_rate)
    history = []
    model.net.train()
    with _torch_threads(config.num_threads):
        for epoch in range(1, config.epochs + 1):
            order = torch.randperm(n, generator=gen)
            total_loss, n_right = 0.0, 0
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start : start + config.batch_size]
                optimizer.zero_grad()
                logits = model.net(x[idx])
                loss = F.binary_cross_entropy_with_logits(logits, y[idx])
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
                loss.backward()
                if config.grad_clip:
                    nn.utils.clip_grad_norm_(model.net.parameters(), config.grad_clip)
                optimizer.step()
                total_loss += loss.item() * len(idx)
                n_right += int(((logits >= 0) == (y[idx] > 0.5)).sum())
            history.append((epoch, total_loss / n, n_right / n))
    model.net.eval()
    model.training_history = history
    logger.debug("STGCN trained: final loss %.4g, accuracy %.3f", history[-1][1], history[-1][2])
    return model


# --- persistence ------------------------------------------------------------


def save_model(model: StgcnModel, path: str | os.PathLike) -> None:
    """Write a self-describing archive: config, graph, named parameter tensors."""
    state = {k: v.detach().cpu().clone() for k, v in model.net.state_dict().items()}
    archive = {
        "kind": "stgcn",
        "config": model.config.to_dict(),
        "graph": model.graph.to_dict(),
        "parameter_shapes": {k: list(v.shape) for k, v in state.items()},
        "state_dict": state,
        "training_history": [list(h) for h in model.training_history],
    }
    torch.save(archive, Path(path))


def load_model(path: str | os.PathLike) -> StgcnModel:
    archive = torch.load(Path(path), weights_only=True)
    if archive.get("kind") != "stgcn":
        raise SchemaError(f"{path} is not an STGCN model archive")
    config = StgcnConfig.from_dict(archive["config"])
    graph = SkeletonGraph.from_dict(archive["graph"])
    model = init_model(config, graph)
    model.net.load_state_dict(archive["state_dict"])
    model.training_history = [tuple(h) for h in archive.get("training_history", [])]
    return model
