"""Two-stage training loop.

Stage 2 (alignment) trains the four heads on frozen, precomputed image/text
embedding pairs. Stage 3 (self-enhancement) fine-tunes low-rank adapters in
the vision encoder together with the image heads, supervised by the model's
own confidence-weighted pseudo-labels.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import losses as L
from .augment import AugmentationPolicy
from .errors import ConfigError, NonFiniteLossError
from .heads import HeadSet, LoraAdapterSet, attach_lora, init_heads, save_checkpoint
from .metrics import clustering_accuracy, histogram_std

logger = logging.getLogger(__name__)

CENTER_STRATEGIES = ("weighted", "mean")
BALANCE_MODES = ("dynamic", "entropy", "off")
SELF_MODES = ("softmatch", "fixmatch", "align_loss")


@dataclass
class Stage2Config:
    lr: float = 0.005
    epochs: int = 200
    batch_size: int = 1024
    weight_decay: float = 0.0
    grad_clip: float = 5.0


@dataclass
class Stage3Config:
    lr: float = 5e-5
    epochs: int = 40
    batch_size: int = 128
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    lora_rank: int = 128
    placement: str = "parallel_qv"
    use_relu: bool = False
    confidence_momentum: float = 0.999
    fixmatch_threshold: float = L.FIXMATCH_THRESHOLD


@dataclass
class TrainConfig:
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    tau_init: float = 0.07
    tau_hat: float = 1.0
    head_bias: bool = True
    center_strategy: str = "weighted"
    balance_mode: str = "dynamic"
    balance_momentum: float = 0.99
    self_mode: str = "softmatch"
    allow_collapse: bool = False
    deterministic: bool = True
    checkpoint_every: int = 0

    def validate(self):
        for name, stage in (("stage2", self.stage2), ("stage3", self.stage3)):
            if not stage.lr > 0:
                raise ConfigError(f"{name}.lr must be positive")
            if stage.epochs < 0:
                raise ConfigError(f"{name}.epochs must be >= 0")
            if stage.batch_size < 2:
                raise ConfigError(f"{name}.batch_size must be >= 2")
        if self.center_strategy not in CENTER_STRATEGIES:
            raise ConfigError(f"center_strategy must be one of {CENTER_STRATEGIES}")
        if self.balance_mode not in BALANCE_MODES:
            raise ConfigError(f"balance_mode must be one of {BALANCE_MODES}")
        if self.self_mode not in SELF_MODES:
            raise ConfigError(f"self_mode must be one of {SELF_MODES}")
        if not 0 < self.balance_momentum < 1:
            raise ConfigError("balance_momentum must lie in (0, 1)")


@dataclass
class History:
    """Per-epoch records plus the per-step loss log."""

    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    final_labels: np.ndarray | None = None
    best_epoch: int | None = None
    best_acc: float | None = None
    balance_state: L.BalanceState | None = None
    confidence_state: L.ConfidenceState | None = None

    @property
    def hist_std(self):
        return [e["hist_std"] for e in self.epochs]

    def write_epochs_csv(self, path):
        _write_csv(path, self.epochs)

    def write_steps_csv(self, path):
        _write_csv(path, self.steps)


def _write_csv(path, rows):
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _seed_everything(seed, deterministic):
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def _batches(n, batch_size, gen):
    order = torch.randperm(n, generator=gen)
    for s in range(0, n, batch_size):
        idx = order[s : s + batch_size]
        if idx.numel() >= 2:
            yield idx


def _as_tensor(x):
    return torch.as_tensor(np.asarray(getattr(x, "data", x)), dtype=torch.float32)


def _with_last_good(exc, module_state, path=None):
    exc.last_good = module_state
    if path is not None:
        torch.save(module_state, path)
    return exc


def alignment_parts(heads: HeadSet, v, t, balance: L.BalanceState, config: TrainConfig):
    """Unweighted alignment parts for one batch, plus the image assignments."""
    vt, pv = heads.forward_image(v)
    tt, pt = heads.forward_text(t)
    parts = {
        "ins": L.instance_loss(vt, tt, heads.tau),
        "ass": L.assignment_loss(pv, pt, heads.tau_hat),
    }
    mv, mask_v = L.cluster_centers(pv, vt, config.center_strategy)
    mt, mask_t = L.cluster_centers(pt, tt, config.center_strategy)
    parts["ctr"] = L.center_loss(mv, mt, mask_v & mask_t, heads.tau_hat)
    if config.balance_mode == "dynamic":
        parts["bal"] = L.balance_loss(pv, pt, balance)
    elif config.balance_mode == "entropy":
        parts["bal"] = L.entropy_balance_loss(pv, pt)
    else:
        parts["bal"] = torch.zeros((), dtype=pv.dtype)
    return parts, pv


def predict_clusters(heads: HeadSet, X, encoder: nn.Module | None = None, batch_size: int = 1024, transform=None) -> np.ndarray:
    """Hard labels ``argmax(c_v(g_v(f_v(x))))``; ties go to the lower index.

    Without ``encoder``, ``X`` is taken to be image embeddings.
    """
    X = torch.as_tensor(np.asarray(getattr(X, "data", X)), dtype=torch.float32)
    out = []
    with torch.no_grad():
        for s in range(0, X.shape[0], batch_size):
            x = X[s : s + batch_size]
            if encoder is not None:
                if transform is not None:
                    x = transform(x)
                x = F.normalize(encoder(x), dim=1)
            out.append(heads.forward_image(x)[1].argmax(dim=1))
    return torch.cat(out).numpy()


def run_alignment(V, T, config: TrainConfig, K: int, truth=None, heads: HeadSet | None = None, out_dir=None):
    """Stage 2: train all four heads on frozen pairs ``(V, T)``.

    Returns ``(heads, history)``. With ``truth`` the history also tracks ACC
    and the best epoch.
    """
    config.validate()
    _seed_everything(config.seed, config.deterministic)
    v_all, t_all = _as_tensor(V), _as_tensor(T)
    if v_all.shape != t_all.shape:
        raise ConfigError(f"image {tuple(v_all.shape)} and text {tuple(t_all.shape)} embeddings differ in shape")
    if K < 2:
        raise ConfigError("K must be >= 2")
    if heads is None:
        heads = init_heads(v_all.shape[1], K, seed=config.seed, tau=config.tau_init, tau_hat=config.tau_hat, bias=config.head_bias)
    history = History()
    s2 = config.stage2
    if s2.epochs == 0:
        return heads, history

    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(heads.parameters(), lr=s2.lr, weight_decay=s2.weight_decay)
    balance = L.BalanceState.uniform(K, m=config.balance_momentum)
    out_dir = Path(out_dir) if out_dir is not None else None
    last_good = copy.deepcopy(heads.state_dict())
    step = 0
    for epoch in range(s2.epochs):
        sums = dict.fromkeys(("ins", "ass", "ctr", "bal", "total"), 0.0)
        n_batches = 0
        for idx in _batches(v_all.shape[0], s2.batch_size, gen):
            parts, pv = alignment_parts(heads, v_all[idx], t_all[idx], balance, config)
            try:
                total, _ = L.align_loss(parts, config.weights)
            except NonFiniteLossError as exc:
                heads.load_state_dict(last_good)
                raise _with_last_good(exc, last_good, out_dir / "last_good.pt" if out_dir else None)
            opt.zero_grad()
            total.backward()
            if s2.grad_clip:
                nn.utils.clip_grad_norm_(heads.parameters(), s2.grad_clip)
            opt.step()
            heads.clamp_tau()
            balance = L.update_balance_state(balance, pv.detach())
            row = {"step": step, **{f"L_{k}": float(v.detach()) for k, v in parts.items()}, "L_total": float(total.detach())}
            history.steps.append(row)
            for k in ("ins", "ass", "ctr", "bal"):
                sums[k] += row[f"L_{k}"]
            sums["total"] += row["L_total"]
            n_batches += 1
            step += 1
        last_good = copy.deepcopy(heads.state_dict())
        labels = predict_clusters(heads, v_all)
        record = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        record["tau"] = float(heads.tau.detach())
        record["hist_std"] = histogram_std(labels, K)
        if truth is not None:
            acc = clustering_accuracy(labels, truth, K)
            record["acc"] = acc
            if history.best_acc is None or acc > history.best_acc:
                history.best_acc, history.best_epoch = acc, epoch
        history.epochs.append(record)
        history.final_labels = labels
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"stage2_epoch{epoch + 1}.ckpt", heads, step=step)
        logger.debug("stage2 epoch %d: %s", epoch, record)
    history.balance_state = balance
    return heads, history


def run_self_enhancement(
    images,
    encoder: nn.Module,
    heads: HeadSet,
    config: TrainConfig,
    adapters: LoraAdapterSet | None = None,
    augment: AugmentationPolicy | None = None,
    text=None,
    truth=None,
    out_dir=None,
):
    """Stage 3: self-training of adapters + ``g_v`` + ``c_v`` on augmented views.

    ``images`` is a float tensor (N, C, H, W). ``text`` (static text
    embeddings aligned with ``images``) is only used by the ``align_loss``
    mode, which exists to reproduce the drift collapse and must be enabled
    with ``allow_collapse``. Returns ``(adapters, heads, history)``.
    """
    config.validate()
    s3 = config.stage3
    if config.self_mode == "align_loss":
        if not config.allow_collapse:
            raise ConfigError("self_mode=align_loss collapses by design; pass allow_collapse to run it")
        if text is None:
            raise ConfigError("self_mode=align_loss needs the static text embeddings")
    _seed_everything(config.seed, config.deterministic)
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    augment = augment or AugmentationPolicy()
    if adapters is None:
        adapters = attach_lora(encoder, s3.lora_rank, s3.placement, s3.use_relu, seed=config.seed)

    for p in heads.parameters():
        p.requires_grad_(False)
    trainable = list(adapters.parameters()) + heads.vision_parameters()
    for p in trainable:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(trainable, lr=s3.lr, weight_decay=s3.weight_decay)

    K = heads.n_clusters
    gen = torch.Generator().manual_seed(config.seed)
    aug_gen = torch.Generator().manual_seed(config.seed + 1)
    conf = L.ConfidenceState.initial(K, momentum=s3.confidence_momentum)
    balance = L.BalanceState.uniform(K, m=config.balance_momentum)
    t_all = _as_tensor(text) if text is not None else None
    history = History()
    out_dir = Path(out_dir) if out_dir is not None else None

    def image_probs(x):
        return heads.forward_image(F.normalize(encoder(x), dim=1))

    step = 0
    for epoch in range(s3.epochs):
        sums = {"self": 0.0, "mean_w": 0.0}
        n_batches = 0
        for idx in _batches(images.shape[0], s3.batch_size, gen):
            batch = images[idx]
            strong = augment.strong(batch, aug_gen)
            if config.self_mode == "align_loss":
                vt, pv = image_probs(strong)
                with torch.no_grad():
                    tt, pt = heads.forward_text(t_all[idx])
                parts = {"ins": L.instance_loss(vt, tt, heads.tau), "ass": L.assignment_loss(pv, pt, heads.tau_hat)}
                mv, mask_v = L.cluster_centers(pv, vt, config.center_strategy)
                mt, mask_t = L.cluster_centers(pt, tt, config.center_strategy)
                parts["ctr"] = L.center_loss(mv, mt, mask_v & mask_t, heads.tau_hat)
                parts["bal"] = L.balance_loss(pv, pt, balance)
                loss, _ = L.align_loss(parts, config.weights)
                balance = L.update_balance_state(balance, pv.detach())
                w = torch.ones(len(idx))
            else:
                with torch.no_grad():
                    _, p_weak = image_probs(augment.weak(batch))
                conf = L.update_confidence_state(conf, p_weak)
                w = L.self_weights(p_weak, conf, config.self_mode, s3.fixmatch_threshold)
                pseudo = p_weak.argmax(dim=1)
                _, q = image_probs(strong)
                loss = L.self_loss(q, pseudo, w)
            if not math.isfinite(float(loss.detach())):
                raise NonFiniteLossError("self", float(loss.detach()))
            opt.zero_grad()
            loss.backward()
            if s3.grad_clip:
                nn.utils.clip_grad_norm_(trainable, s3.grad_clip)
            opt.step()
            row = {"step": step, "L_self": float(loss.detach()), "mean_w": float(w.mean()), "mu_t": conf.mu_t, "sigma2_t": conf.sigma2_t}
            history.steps.append(row)
            sums["self"] += row["L_self"]
            sums["mean_w"] += row["mean_w"]
            n_batches += 1
            step += 1
        labels = predict_clusters(heads, images, encoder=encoder, transform=augment.weak)
        record = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}, "hist_std": histogram_std(labels, K)}
        if truth is not None:
            acc = clustering_accuracy(labels, truth, K)
            record["acc"] = acc
            if history.best_acc is None or acc > history.best_acc:
                history.best_acc, history.best_epoch = acc, epoch
        history.epochs.append(record)
        history.final_labels = labels
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"stage3_epoch{epoch + 1}.ckpt", heads, adapters, step=step)
    history.confidence_state = conf

    for p in trainable:
        p.requires_grad_(False)
    return adapters, heads, history
