"""Trainable parameters outside the frozen encoders.

``HeadSet`` bundles the image/text projection heads, the image/text
clustering heads and the learnable instance temperature. Low-rank adapters
are injected into named ``nn.Linear`` layers of a vision encoder, which works
for the bundled stub encoder as well as HF-style CLIP vision towers
(``q_proj`` / ``v_proj`` / ``fc1`` / ``fc2``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FormatError, ShapeError, ZeroRowError

TAU_MIN, TAU_MAX = 5e-3, 5e-1
PLACEMENTS = ("parallel_qv", "serial_qv", "parallel_ffn", "serial_ffn")
_TARGETS = {"qv": ("q_proj", "v_proj"), "ffn": ("fc1", "fc2")}


class ProjectionHead(nn.Module):
    """Affine D->D map followed by row normalization."""

    def __init__(self, dim, bias=True):
        super().__init__()
        self.linear = nn.Linear(dim, dim, bias=bias)

    def forward(self, x):
        z = self.linear(x)
        norms = z.norm(dim=1, keepdim=True)
        if torch.any(norms <= 1e-12):
            row = int(torch.nonzero(norms.squeeze(1) <= 1e-12)[0])
            raise ZeroRowError(row, float(norms[row]))
        return z / norms


class ClusteringHead(nn.Module):
    """Affine D->K map followed by softmax."""

    def __init__(self, dim, n_clusters, bias=True):
        super().__init__()
        self.linear = nn.Linear(dim, n_clusters, bias=bias)

    def logits(self, x):
        return self.linear(x)

    def forward(self, x):
        return F.softmax(self.linear(x), dim=1)


class HeadSet(nn.Module):
    def __init__(self, dim, n_clusters, tau=0.07, tau_hat=1.0, bias=True):
        super().__init__()
        self.dim = dim
        self.n_clusters = n_clusters
        self.g_v = ProjectionHead(dim, bias)
        self.g_t = ProjectionHead(dim, bias)
        self.c_v = ClusteringHead(dim, n_clusters, bias)
        self.c_t = ClusteringHead(dim, n_clusters, bias)
        self.tau = nn.Parameter(torch.tensor(float(tau)))
        self.tau_hat = float(tau_hat)

    def clamp_tau(self):
        with torch.no_grad():
            self.tau.clamp_(TAU_MIN, TAU_MAX)

    def vision_parameters(self):
        return list(self.g_v.parameters()) + list(self.c_v.parameters())

    def text_parameters(self):
        return list(self.g_t.parameters()) + list(self.c_t.parameters())

    def forward_image(self, v):
        z = self.g_v(v)
        return z, self.c_v(z)

    def forward_text(self, t):
        z = self.g_t(t)
        return z, self.c_t(z)


def init_heads(D: int, K: int, seed: int = 0, tau: float = 0.07, tau_hat: float = 1.0, bias: bool = True) -> HeadSet:
    """Seeded head initialization: uniform(+-1/sqrt(D)) weights, zero biases."""
    if D < 2 or K < 2:
        raise ValueError(f"need D, K >= 2, got D={D}, K={K}")
    gen = torch.Generator().manual_seed(seed)
    heads = HeadSet(D, K, tau=tau, tau_hat=tau_hat, bias=bias)
    bound = 1.0 / np.sqrt(D)
    with torch.no_grad():
        for head in (heads.g_v, heads.g_t, heads.c_v, heads.c_t):
            w = head.linear.weight
            w.copy_(torch.rand(w.shape, generator=gen) * 2 * bound - bound)
            if head.linear.bias is not None:
                head.linear.bias.zero_()
    return heads


def project(g: ProjectionHead, X) -> torch.Tensor:
    X = torch.as_tensor(getattr(X, "data", X))
    if X.shape[1] != g.linear.in_features:
        raise ShapeError(f"input dim {X.shape[1]} != head dim {g.linear.in_features}")
    return g(X.to(g.linear.weight.dtype))


def assign(c: ClusteringHead, Xt) -> torch.Tensor:
    return c(torch.as_tensor(Xt).to(c.linear.weight.dtype))


def hard_labels(P) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go low
    return torch.as_tensor(P).argmax(dim=1)


# ---------------------------------------------------------------------------
# low-rank adapters


def lora_apply(base_map, adapter, x, placement="parallel_qv", use_relu=False, scale=1.0):
    """Evaluate one adapted projection.

    parallel: ``base(x) + s * B @ act(A @ x)``
    serial:   ``base(x) + s * B @ act(A @ base(x))``
    """
    A, B = adapter
    base = base_map(x)
    src = x if placement.startswith("parallel") else base
    if A.shape[-1] != src.shape[-1] or B.shape[-1] != A.shape[0] or B.shape[0] != base.shape[-1]:
        raise ShapeError(f"adapter shapes A{tuple(A.shape)}, B{tuple(B.shape)} incompatible with input {tuple(src.shape)}")
    h = src @ A.T
    if use_relu:
        h = torch.relu(h)
    return base + scale * (h @ B.T)


class LoraLinear(nn.Module):
    """Frozen ``nn.Linear`` with a trainable low-rank branch (B zero-initialized)."""

    def __init__(self, base: nn.Linear, rank: int, placement: str = "parallel_qv", use_relu: bool = False, generator=None):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.placement = placement
        self.use_relu = use_relu
        src_dim = base.in_features if placement.startswith("parallel") else base.out_features
        bound = 1.0 / np.sqrt(src_dim)
        A = torch.rand(rank, src_dim, generator=generator) * 2 * bound - bound
        self.lora_A = nn.Parameter(A.to(base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))

    def forward(self, x):
        return lora_apply(self.base, (self.lora_A, self.lora_B), x, self.placement, self.use_relu)


@dataclass
class LoraAdapterSet:
    """Handle on the adapters injected into one encoder."""

    modules: dict
    rank: int
    placement: str
    use_relu: bool

    def parameters(self):
        for name in sorted(self.modules):
            yield self.modules[name].lora_A
            yield self.modules[name].lora_B

    def named_parameters(self):
        for name in sorted(self.modules):
            yield f"{name}.lora_A", self.modules[name].lora_A
            yield f"{name}.lora_B", self.modules[name].lora_B

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def attach_lora(encoder: nn.Module, rank: int = 128, placement: str = "parallel_qv", use_relu: bool = False, seed: int = 0) -> LoraAdapterSet:
    """Replace the targeted linears of ``encoder`` in place with adapted ones.

    All pre-existing encoder parameters are frozen.
    """
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}; expected one of {PLACEMENTS}")
    targets = _TARGETS[placement.split("_")[1]]
    for p in encoder.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    found = [(name, mod) for name, mod in encoder.named_modules() if name.split(".")[-1] in targets and isinstance(mod, nn.Linear)]
    if not found:
        raise ValueError(f"encoder has no linear layers named {targets}")
    modules = {}
    for name, mod in found:
        parent_name, _, attr = name.rpartition(".")
        parent = encoder.get_submodule(parent_name) if parent_name else encoder
        wrapped = LoraLinear(mod, rank, placement, use_relu, generator=gen)
        setattr(parent, attr, wrapped)
        modules[name] = wrapped
    return LoraAdapterSet(modules, rank, placement, use_relu)


# ---------------------------------------------------------------------------
# checkpoints: u32 header length | JSON header | float32 LE blocks in header order

_CKPT_MAGIC = b"SEICCKP1"


def save_checkpoint(path, heads: HeadSet, adapters: LoraAdapterSet | None = None, step: int = 0, extra: dict | None = None):
    blocks = [(f"heads.{name}", p.detach()) for name, p in heads.named_parameters()]
    if adapters is not None:
        blocks += [(f"lora.{name}", p.detach()) for name, p in adapters.named_parameters()]
    header = {
        "K": heads.n_clusters,
        "D": heads.dim,
        "tau_hat": heads.tau_hat,
        "bias": heads.g_v.linear.bias is not None,
        "r": adapters.rank if adapters else None,
        "placement": adapters.placement if adapters else None,
        "use_relu": adapters.use_relu if adapters else None,
        "step": step,
        "blocks": [{"name": n, "shape": list(t.shape)} for n, t in blocks],
        "extra": extra or {},
    }
    head_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(head_bytes)))
        fh.write(head_bytes)
        for _, t in blocks:
            fh.write(t.cpu().numpy().astype("<f4").tobytes(order="C"))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, {block name: float32 array})``."""
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    offset = 12 + hlen
    arrays = {}
    for block in header["blocks"]:
        count = int(np.prod(block["shape"])) if block["shape"] else 1
        if offset + 4 * count > len(raw):
            raise FormatError(f"{path}: truncated block {block['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(block["shape"])
        arrays[block["name"]] = arr.astype(np.float32)
        offset += 4 * count
    return header, arrays


def load_checkpoint(path, encoder: nn.Module | None = None, seed: int = 0):
    """Rebuild heads (and adapters, attached to ``encoder``) from a checkpoint.

    Returns ``(heads, adapters_or_None, header)``.
    """
    header, arrays = read_checkpoint(path)
    heads = HeadSet(header["D"], header["K"], tau_hat=header["tau_hat"], bias=header.get("bias", True))
    with torch.no_grad():
        for name, p in heads.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"heads.{name}"]))
    adapters = None
    if header.get("r") and encoder is not None:
        adapters = attach_lora(encoder, header["r"], header["placement"], header["use_relu"], seed=seed)
        with torch.no_grad():
            for name, p in adapters.named_parameters():
                p.copy_(torch.from_numpy(arrays[f"lora.{name}"]))
    return heads, adapters, header
