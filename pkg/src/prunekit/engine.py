"""Forward/backward passes, SGD training and fine-tuning, accuracy evaluation.

Convolutions run through an im2col lowering so the linear response of every
layer is available as one matrix product; the capture path records, per
sample, the norm of a layer's input and of its bias-free pre-activation
response, which is all the capacity probe needs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Dataset
from .errors import NumericalError, ValidationError
from .model import ModelGraph, clone_graph, validate_graph

CaptureTrace = dict[str, tuple[np.ndarray, np.ndarray]]


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if not (0.0 < self.learning_rate < 1.0):
            raise ValidationError(f"learning_rate must be in (0, 1), got {self.learning_rate}")
        if self.momentum < 0.0:
            raise ValidationError(f"momentum must be >= 0, got {self.momentum}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


def init_weights(g: ModelGraph, seed: int) -> ModelGraph:
    """Seeded uniform init in +/- sqrt(6 / (fan_in + fan_out)); zero biases."""
    validate_graph(g)
    rng = np.random.default_rng(seed)
    out = clone_graph(g)
    for layer in out.layers:
        if not layer.is_weighted():
            continue
        if layer.kind == "conv2d":
            kh, kw, cin, cout = layer.filter_shape
            fan_in, fan_out = kh * kw * cin, kh * kw * cout
            shape: tuple[int, ...] = (kh, kw, cin, cout)
            bias_len = cout
        else:
            fin, fout = layer.filter_shape
            fan_in, fan_out = fin, fout
            shape = (fin, fout)
            bias_len = fout
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        out.weights[layer.id] = (
            rng.uniform(-limit, limit, size=shape),
            np.zeros(bias_len),
        )
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _pad_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    pb, pr = kh - 1 - pt, kw - 1 - pl
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _conv_cols(x: np.ndarray, kh: int, kw: int, padding: str):
    """im2col: rows are (kh, kw, c_in) patches in row-major tap order."""
    n = x.shape[0]
    xp = _pad_same(x, kh, kw) if padding == "same" else x
    oh, ow = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (n, oh, ow, c, kh, kw)
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, -1)
    return np.ascontiguousarray(cols), oh, ow, xp.shape


def _cols_to_input_grad(dcols: np.ndarray, padded_shape, kh: int, kw: int, oh: int, ow: int,
                        orig_shape) -> np.ndarray:
    n, hp, wp, c = padded_shape
    d6 = dcols.reshape(n, oh, ow, kh, kw, c)
    dxp = np.zeros(padded_shape)
    for di in range(kh):
        for dj in range(kw):
            dxp[:, di:di + oh, dj:dj + ow, :] += d6[:, :, :, di, dj, :]
    # "same" padding is asymmetric for even kernels: top/left get the smaller half
    pt = (kh - 1) // 2 if hp != orig_shape[1] else 0
    pl = (kw - 1) // 2 if wp != orig_shape[2] else 0
    return dxp[:, pt:pt + orig_shape[1], pl:pl + orig_shape[2], :]


def _apply_activation(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "softmax":
        return _softmax(a)
    return a


def _run(g: ModelGraph, x: np.ndarray, capture: frozenset[str] | set[str],
         want_cache: bool):
    """Shared forward pass; returns (output, trace, caches)."""
    n = x.shape[0]
    trace: CaptureTrace = {}
    caches: list[dict] = []
    for layer in g.layers:
        cache: dict = {"layer": layer}
        if layer.kind == "conv2d":
            kh, kw, cin, cout = layer.filter_shape
            kernel, bias = g.weights[layer.id]
            cols, oh, ow, padded_shape = _conv_cols(x, kh, kw, layer.padding)
            z_flat = cols @ kernel.reshape(-1, cout)
            z = z_flat.reshape(n, oh, ow, cout)
            if layer.id in capture:
                trace[layer.id] = (
                    np.linalg.norm(x.reshape(n, -1), axis=1),
                    np.linalg.norm(z.reshape(n, -1), axis=1),
                )
            pre = z + bias
            out = _apply_activation(pre, layer.activation)
            if want_cache:
                cache.update(cols=cols, pre=pre, oh=oh, ow=ow,
                             padded_shape=padded_shape, x_shape=x.shape)
            x = out
        elif layer.kind == "maxpool":
            ph, pw = layer.filter_shape
            nb, h, w, c = x.shape
            xr = x.reshape(nb, h // ph, ph, w // pw, pw, c)
            xt = xr.transpose(0, 1, 3, 5, 2, 4).reshape(nb, h // ph, w // pw, c, ph * pw)
            idx = xt.argmax(axis=-1)
            out = np.take_along_axis(xt, idx[..., None], axis=-1)[..., 0]
            if want_cache:
                cache.update(idx=idx, x_shape=x.shape)
            x = out
        elif layer.kind == "flatten":
            if want_cache:
                cache.update(x_shape=x.shape)
            x = x.reshape(n, -1)
        else:  # fully-connected
            kernel, bias = g.weights[layer.id]
            z = x @ kernel
            if layer.id in capture:
                trace[layer.id] = (
                    np.linalg.norm(x, axis=1),
                    np.linalg.norm(z, axis=1),
                )
            pre = z + bias
            out = _apply_activation(pre, layer.activation)
            if want_cache:
                cache.update(x=x, pre=pre)
            x = out
        caches.append(cache)
    return x, trace, caches


def forward(g: ModelGraph, batch: np.ndarray, capture: set[str] | frozenset[str] = frozenset()
            ) -> tuple[np.ndarray, CaptureTrace]:
    """Run the chain on a batch; optionally capture per-sample layer norms.

    Captured entries are (input_norm, response_norm) arrays where the
    response is the bias-free linear output of the layer, before activation.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.shape[1:] != tuple(g.input_shape):
        raise ValidationError(
            f"batch shape {batch.shape[1:]} does not match model input {tuple(g.input_shape)}"
        )
    weighted = {l.id for l in g.layers if l.is_weighted()}
    unknown = set(capture) - weighted
    if unknown:
        raise ValidationError(f"capture requests non-weighted layers: {sorted(unknown)}")
    out, trace, _ = _run(g, batch, capture, want_cache=False)
    return out, trace


def loss_and_grads(g: ModelGraph, batch: np.ndarray, labels: np.ndarray
                   ) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Mean softmax cross-entropy and its weight gradients for one batch."""
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    final = g.layers[-1]
    if final.activation != "softmax":
        raise ValidationError("training requires a softmax final layer")
    n = batch.shape[0]

    out, _, caches = _run(g, batch, frozenset(), want_cache=True)
    logits = caches[-1]["pre"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    loss = float(np.mean(logsumexp - logits[np.arange(n), labels]))

    probs = _softmax(logits)
    probs[np.arange(n), labels] -= 1.0
    d = probs / n  # gradient w.r.t. the final pre-activation

    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for i in range(len(g.layers) - 1, -1, -1):
        layer = g.layers[i]
        cache = caches[i]
        if layer.is_weighted() and i != len(g.layers) - 1:
            if layer.activation == "relu":
                d = d * (cache["pre"] > 0.0)
            elif layer.activation == "softmax":
                raise ValidationError("softmax below the final layer is not trainable")
        if layer.kind == "conv2d":
            kh, kw, cin, cout = layer.filter_shape
            kernel, _ = g.weights[layer.id]
            d_flat = d.reshape(-1, cout)
            grads[layer.id] = (
                (cache["cols"].T @ d_flat).reshape(kh, kw, cin, cout),
                d_flat.sum(axis=0),
            )
            dcols = d_flat @ kernel.reshape(-1, cout).T
            d = _cols_to_input_grad(dcols, cache["padded_shape"], kh, kw,
                                    cache["oh"], cache["ow"], cache["x_shape"])
        elif layer.kind == "maxpool":
            ph, pw = layer.filter_shape
            nb, h, w, c = cache["x_shape"]
            idx = cache["idx"]
            onehot = np.arange(ph * pw) == idx[..., None]
            dxt = d[..., None] * onehot
            d = dxt.reshape(nb, h // ph, w // pw, c, ph, pw).transpose(0, 1, 4, 2, 5, 3)
            d = d.reshape(nb, h, w, c)
        elif layer.kind == "flatten":
            d = d.reshape(cache["x_shape"])
        else:  # fully-connected
            kernel, _ = g.weights[layer.id]
            grads[layer.id] = (cache["x"].T @ d, d.sum(axis=0))
            d = d @ kernel.T
    return loss, grads


def evaluate(g: ModelGraph, d: Dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax output matches the label."""
    if d.sample_shape != tuple(g.input_shape):
        raise ValidationError(
            f"dataset sample shape {d.sample_shape} does not match model input "
            f"{tuple(g.input_shape)}"
        )
    correct = 0
    for start in range(0, len(d), batch_size):
        out, _ = forward(g, d.images[start:start + batch_size])
        correct += int(np.sum(out.argmax(axis=1) == d.labels[start:start + batch_size]))
    return correct / len(d)


def _sgd(g: ModelGraph, d: Dataset, cfg: TrainConfig,
         masks: dict[str, np.ndarray] | None) -> ModelGraph:
    cfg.validate()
    if cfg.batch_size > len(d):
        raise ValidationError(f"batch_size {cfg.batch_size} exceeds dataset size {len(d)}")
    if d.sample_shape != tuple(g.input_shape):
        raise ValidationError("dataset sample shape does not match model input")
    model = clone_graph(g)
    validate_graph(model)
    masks = masks or {}
    for lid, mask in masks.items():
        kernel, _ = model.weights[lid]
        if mask.shape != kernel.shape:
            raise ValidationError(f"mask for layer {lid} has shape {mask.shape}, "
                                  f"kernel is {kernel.shape}")
        kernel *= mask

    velocity = {
        lid: (np.zeros_like(k), np.zeros_like(b))
        for lid, (k, b) in model.weights.items()
    }
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(d))
        for start in range(0, len(d), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(model, d.images[idx], d.labels[idx])
            if not math.isfinite(loss):
                raise NumericalError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"batch {start // cfg.batch_size}"
                )
            for lid, (gk, gb) in grads.items():
                if lid in masks:
                    gk = gk * masks[lid]
                vk, vb = velocity[lid]
                kernel, bias = model.weights[lid]
                vk *= cfg.momentum
                vk -= cfg.learning_rate * gk
                vb *= cfg.momentum
                vb -= cfg.learning_rate * gb
                kernel += vk
                bias += vb
    return model


def train(g: ModelGraph, d: Dataset, cfg: TrainConfig) -> ModelGraph:
    """Minibatch SGD with momentum on softmax cross-entropy; seeded shuffles."""
    return _sgd(g, d, cfg, masks=None)


def finetune(g: ModelGraph, masks: dict[str, np.ndarray], d: Dataset,
             cfg: TrainConfig) -> ModelGraph:
    """Like train, but kernel gradients are zeroed wherever the keep-mask is 0,
    so pruned positions stay exactly zero."""
    return _sgd(g, d, cfg, masks=masks)
