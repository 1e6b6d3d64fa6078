"""Weight and channel pruning under a sparsity plan, with exact bookkeeping.

Channel pruning physically removes output channels and propagates each
removal into the consumer's input slices (conv -> conv input channels,
conv -> flatten -> fc rows at every spatial position, fc -> fc rows), so
achieved counts always come from the real post-prune shapes. A symbolic
dry run predicts those counts without touching weights, which is what the
target-strength calibration loop iterates on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .allocator import (
    SparsityPlan,
    allocation_input,
    plan_checksum,
    solve_allocation,
)
from .capacity import CapacityProfile
from .errors import NumericalError, ValidationError
from .model import (
    LayerSpec,
    ModelGraph,
    count_params,
    load_model,
    manifest_layers,
    save_model,
    validate_graph,
)
from .serialize import read_json, sha256_hex

METHOD_KINDS = ("weight-magnitude", "channel-l1", "channel-random")


@dataclass
class PruneMethod:
    kind: str
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValidationError(f"unknown pruning method {self.kind!r}")
        if (self.kind == "channel-random") != (self.seed is not None):
            raise ValidationError("a seed is required exactly when kind is channel-random")

    @property
    def is_channel(self) -> bool:
        return self.kind.startswith("channel")


@dataclass
class PruneResult:
    model: ModelGraph
    masks: dict[str, np.ndarray]
    remaining_per_layer: dict[str, int]
    remaining_total: int
    achieved_sparsity: float
    method: PruneMethod
    plan_sha256: str | None = None


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def _plan_ids_checked(g: ModelGraph, plan: SparsityPlan) -> list[str]:
    prunable = set(g.prunable_ids())
    for lid in plan.layer_ids():
        spec = g.spec(lid)  # raises on unknown id
        if not spec.is_weighted():
            raise ValidationError(f"layer {lid}: cannot prune a weightless layer")
        if lid not in prunable:
            raise ValidationError(f"layer {lid}: plan covers a non-prunable layer")
    return plan.layer_ids()


def prune_weights_magnitude(g: ModelGraph, plan: SparsityPlan) -> PruneResult:
    """Zero the smallest-magnitude kernel weights per layer; biases untouched.

    Ties are broken toward the lower flat index. Keep-masks are returned so
    fine-tuning can hold pruned positions at zero.
    """
    validate_graph(g)
    plan_ids = set(_plan_ids_checked(g, plan))
    out = ModelGraph(list(g.layers), dict(g.weights), g.input_shape, g.num_classes)
    masks: dict[str, np.ndarray] = {}
    remaining: dict[str, int] = {}
    for layer in g.layers:
        if not layer.is_weighted():
            continue
        kernel, bias = g.weights[layer.id]
        if layer.id not in plan_ids:
            remaining[layer.id] = kernel.size + bias.size
            continue
        s_l = plan.sparsity_for(layer.id)
        k = _round_half_away(s_l * kernel.size)
        if k > kernel.size:
            raise ValidationError(
                f"layer {layer.id}: cannot prune {k} of {kernel.size} kernel weights"
            )
        flat = kernel.reshape(-1).copy()
        order = np.argsort(np.abs(flat), kind="stable")
        mask = np.ones(flat.size, dtype=bool)
        mask[order[:k]] = False
        flat[~mask] = 0.0
        out.weights[layer.id] = (flat.reshape(kernel.shape), bias.copy())
        masks[layer.id] = mask.reshape(kernel.shape)
        remaining[layer.id] = int(kernel.size - k + bias.size)
    total = sum(remaining.values())
    n_orig = count_params(g)[1]
    return PruneResult(
        model=out,
        masks=masks,
        remaining_per_layer=remaining,
        remaining_total=total,
        achieved_sparsity=1.0 - total / n_orig,
        method=PruneMethod("weight-magnitude"),
    )


def channels_to_prune(plan: SparsityPlan, layer: LayerSpec) -> int:
    """floor(s_l * output channels) for conv, floor(s_l * output units) for fc."""
    if not layer.is_weighted():
        raise ValidationError(f"layer {layer.id}: has no channels to prune")
    c_out = layer.filter_shape[-1]
    return int(math.floor(plan.sparsity_for(layer.id) * c_out))


def _weighted_successor(g: ModelGraph, layer_id: str) -> str | None:
    seen = False
    for layer in g.layers:
        if layer.id == layer_id:
            seen = True
            continue
        if seen and layer.is_weighted():
            return layer.id
    return None


def _removal_counts(g: ModelGraph, plan: SparsityPlan) -> dict[str, int]:
    counts = {}
    for lid in _plan_ids_checked(g, plan):
        n = channels_to_prune(plan, g.spec(lid))
        if n > 0 and _weighted_successor(g, lid) is None:
            raise ValidationError(
                f"layer {lid}: channel pruning needs a downstream weighted layer"
            )
        counts[lid] = n
    return counts


def _l1_ranking(kernel: np.ndarray, kind: str, n: int) -> np.ndarray:
    scores = np.abs(kernel).sum(axis=(0, 1, 2) if kind == "conv2d" else 0)
    order = np.argsort(scores, kind="stable")  # ties: lower channel index first
    return np.sort(order[:n])


def _prune_channels(g: ModelGraph, plan: SparsityPlan,
                    choose: Callable[[LayerSpec, np.ndarray, int], np.ndarray],
                    method: PruneMethod) -> PruneResult:
    shapes = validate_graph(g)
    input_shape_of = {}
    prev: tuple[int, ...] = tuple(g.input_shape)
    for layer, shp in zip(g.layers, shapes):
        input_shape_of[layer.id] = prev
        prev = shp
    to_remove = _removal_counts(g, plan)

    new_layers: list[LayerSpec] = []
    new_weights: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    pending: np.ndarray | None = None  # input slices to drop at the next weighted layer
    pending_is_flat = False
    for layer in g.layers:
        if layer.kind == "maxpool":
            new_layers.append(layer)
            continue
        if layer.kind == "flatten":
            if pending is not None and not pending_is_flat:
                h, w, c = input_shape_of[layer.id]
                keep = np.ones((h, w, c), dtype=bool)
                keep[:, :, pending] = False
                pending = np.nonzero(~keep.reshape(-1))[0]
                pending_is_flat = True
            new_layers.append(layer)
            continue

        kernel, bias = g.weights[layer.id]
        kernel = kernel.copy()
        bias = bias.copy()
        if pending is not None:
            axis = 2 if layer.kind == "conv2d" else 0
            kernel = np.delete(kernel, pending, axis=axis)
            pending = None
            pending_is_flat = False
        n = to_remove.get(layer.id, 0)
        if n > 0:
            c_out = kernel.shape[-1]
            if n >= c_out:
                raise ValidationError(
                    f"layer {layer.id}: cannot remove {n} of {c_out} channels"
                )
            removed = choose(layer, kernel, n)
            kernel = np.delete(kernel, removed, axis=3 if layer.kind == "conv2d" else 1)
            bias = np.delete(bias, removed)
            pending = removed
            pending_is_flat = False
        new_layers.append(
            LayerSpec(
                id=layer.id,
                kind=layer.kind,
                filter_shape=tuple(int(e) for e in kernel.shape),
                padding=layer.padding,
                activation=layer.activation,
                prunable=layer.prunable,
            )
        )
        new_weights[layer.id] = (kernel, bias)

    out = ModelGraph(new_layers, new_weights, tuple(g.input_shape), g.num_classes)
    validate_graph(out)
    per_layer, total = count_params(out)
    per_layer = {lid: cnt for lid, cnt in per_layer.items() if out.spec(lid).is_weighted()}
    n_orig = count_params(g)[1]
    return PruneResult(
        model=out,
        masks={},
        remaining_per_layer=per_layer,
        remaining_total=total,
        achieved_sparsity=1.0 - total / n_orig,
        method=method,
    )


def prune_channels_l1(g: ModelGraph, plan: SparsityPlan) -> PruneResult:
    """Remove the output channels with the smallest absolute kernel sums."""

    def choose(layer: LayerSpec, kernel: np.ndarray, n: int) -> np.ndarray:
        return _l1_ranking(kernel, layer.kind, n)

    return _prune_channels(g, plan, choose, PruneMethod("channel-l1"))


def prune_channels_random(g: ModelGraph, plan: SparsityPlan, seed: int) -> PruneResult:
    """Remove a seeded uniform random subset of output channels per layer."""
    rng = np.random.default_rng(seed)

    def choose(layer: LayerSpec, kernel: np.ndarray, n: int) -> np.ndarray:
        return np.sort(rng.choice(kernel.shape[-1], size=n, replace=False))

    return _prune_channels(g, plan, choose, PruneMethod("channel-random", seed=seed))


def prune(g: ModelGraph, plan: SparsityPlan, method: PruneMethod,
          plan_sha256: str | None = None) -> PruneResult:
    if method.kind == "weight-magnitude":
        result = prune_weights_magnitude(g, plan)
    elif method.kind == "channel-l1":
        result = prune_channels_l1(g, plan)
    else:
        result = prune_channels_random(g, plan, method.seed)
    result.plan_sha256 = plan_sha256 if plan_sha256 is not None else plan_checksum(plan)
    return result


def achieved_remaining(g: ModelGraph, plan: SparsityPlan, method: PruneMethod | str) -> int:
    """Whole-model parameter count that the method would leave, without
    mutating any weights. For channel methods this includes the input slices
    lost by successors, which is why channel pruning usually overshoots."""
    kind = method.kind if isinstance(method, PruneMethod) else str(method)
    if kind not in METHOD_KINDS:
        raise ValidationError(f"unknown pruning method {kind!r}")
    shapes = validate_graph(g)
    plan_ids = set(_plan_ids_checked(g, plan))

    if kind == "weight-magnitude":
        total = 0
        for layer in g.layers:
            if not layer.is_weighted():
                continue
            kernel, bias = g.weights[layer.id]
            if layer.id in plan_ids:
                k = _round_half_away(plan.sparsity_for(layer.id) * kernel.size)
                total += kernel.size - k + bias.size
            else:
                total += kernel.size + bias.size
        return int(total)

    to_remove = _removal_counts(g, plan)
    input_shape_of = {}
    prev: tuple[int, ...] = tuple(g.input_shape)
    for layer, shp in zip(g.layers, shapes):
        input_shape_of[layer.id] = prev
        prev = shp

    total = 0
    pending_channels = 0  # output channels removed upstream, not yet consumed
    pending_rows = 0
    for layer in g.layers:
        if layer.kind == "flatten":
            if pending_channels:
                h, w, _ = input_shape_of[layer.id]
                pending_rows = pending_channels * h * w
                pending_channels = 0
            continue
        if not layer.is_weighted():
            continue
        n_out = to_remove.get(layer.id, 0)
        if layer.kind == "conv2d":
            kh, kw, cin, cout = layer.filter_shape
            cin -= pending_channels
            cout -= n_out
            total += kh * kw * cin * cout + cout
        else:
            fin, fout = layer.filter_shape
            fin -= pending_rows if pending_rows else pending_channels
            fout -= n_out
            total += fin * fout + fout
        pending_channels = n_out
        pending_rows = 0
    return int(total)


@dataclass
class Calibration:
    s_hat: float
    achieved: int
    target: float
    gap: float


def calibrate_strength(
    g: ModelGraph,
    s: float,
    allocate: Callable[[float], SparsityPlan],
    method: PruneMethod | str,
    iterations: int = 60,
) -> Calibration:
    """Find the largest strength in [0, s] whose dry-run remaining count still
    meets the budget implied by s.

    Channel pruning overshoots the requested sparsity, so the strength fed to
    it must be backed off; the remaining count is a nonincreasing step
    function of the strength, which bisection resolves to far below any
    channel granule. The conservative (>= target) side is returned.
    """
    kind = method.kind if isinstance(method, PruneMethod) else str(method)
    n_total = count_params(g)[1]
    plan_at_s = allocate(s)  # validates feasibility at s
    target = n_total - s * plan_at_s.included_params()
    if kind == "weight-magnitude":
        achieved = achieved_remaining(g, plan_at_s, kind)
        return Calibration(s_hat=float(s), achieved=achieved, target=target,
                           gap=abs(achieved - target))

    achieved_s = achieved_remaining(g, plan_at_s, kind)
    if achieved_s >= target:
        return Calibration(float(s), achieved_s, target, abs(achieved_s - target))
    lo, lo_c = 0.0, n_total
    if lo_c < target:
        raise NumericalError("even zero pruning strength undershoots the budget")
    hi = float(s)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        c_mid = achieved_remaining(g, allocate(mid), kind)
        if c_mid >= target:
            lo, lo_c = mid, c_mid
        else:
            hi = mid
    return Calibration(s_hat=lo, achieved=lo_c, target=target, gap=abs(lo_c - target))


def calibrate_s_hat(
    g: ModelGraph,
    profile: CapacityProfile,
    s: float,
    method: PruneMethod | str,
    floor_multiplier: int = 3,
) -> Calibration:
    def allocate(strength: float) -> SparsityPlan:
        return solve_allocation(allocation_input(g, profile, strength, floor_multiplier))

    return calibrate_strength(g, s, allocate, method)


def save_prune_result(result: PruneResult, manifest_path) -> None:
    """Model manifest plus a provenance block; keep-masks ride along as
    bit-packed blobs referenced from the layer entries."""
    manifest_path = Path(manifest_path)
    directory = manifest_path.parent
    directory.mkdir(parents=True, exist_ok=True)
    layer_extras: dict[str, dict] = {}
    for lid, mask in result.masks.items():
        packed = np.packbits(mask.reshape(-1)).tobytes()
        fname = f"{manifest_path.stem}_{lid}_mask.bin"
        (directory / fname).write_bytes(packed)
        layer_extras[lid] = {"mask_file": fname, "sha256_mask": sha256_hex(packed)}
    provenance = {
        "method": result.method.kind,
        "seed": result.method.seed,
        "plan_sha256": result.plan_sha256,
        "achieved_sparsity": result.achieved_sparsity,
        "per_layer_counts": dict(result.remaining_per_layer),
    }
    save_model(result.model, manifest_path,
               extra_top={"provenance": provenance}, layer_extras=layer_extras)


def load_prune_result(manifest_path) -> tuple[ModelGraph, dict[str, np.ndarray], dict]:
    """Load a pruned-model manifest; works on plain model manifests too, in
    which case masks and provenance come back empty."""
    manifest_path = Path(manifest_path)
    g = load_model(manifest_path)
    manifest = read_json(manifest_path)
    masks: dict[str, np.ndarray] = {}
    for entry in manifest_layers(manifest):
        if not entry.get("mask_file"):
            continue
        lid = str(entry["id"])
        kernel, _ = g.weights[lid]
        raw = (manifest_path.parent / entry["mask_file"]).read_bytes()
        if entry.get("sha256_mask") != sha256_hex(raw):
            raise ValidationError(f"layer {lid}: mask blob checksum mismatch")
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=kernel.size)
        masks[lid] = bits.astype(bool).reshape(kernel.shape)
    return g, masks, dict(manifest.get("provenance", {}))
