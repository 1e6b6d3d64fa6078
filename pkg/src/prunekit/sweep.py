"""Grid experiments comparing allocation strategies across pruning methods.

Each cell of the grid (sparsity x method x allocation) is allocated,
calibrated when the method removes whole channels, pruned, evaluated, and
optionally fine-tuned. One CSV row is emitted per trial and phase; cells
that fail record their error in the status column and the sweep moves on.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .allocator import (
    SparsityPlan,
    allocation_input,
    solve_allocation,
    uniform_plan,
)
from .capacity import CapacityProfile
from .data import Dataset
from .engine import TrainConfig, evaluate, finetune
from .errors import PrunekitError, ValidationError
from .model import ModelGraph, layer_param_count
from .pruning import PruneMethod, calibrate_strength, prune

CSV_COLUMNS = [
    "method",
    "allocation",
    "s",
    "s_hat",
    "trial",
    "phase",
    "accuracy",
    "accuracy_median",
    "accuracy_min",
    "accuracy_max",
    "achieved_sparsity",
    "seed",
    "status",
]


@dataclass
class SweepSpec:
    grid: list[float]
    baseline: str = "both"  # uniform | layerwise | both
    methods: tuple[str, ...] = ("weight-magnitude",)
    trials: int = 1
    finetune: bool = False
    seeds: tuple[int, ...] = (0,)
    ft_epochs: int = 3
    ft_learning_rate: float = 1e-4
    ft_momentum: float = 0.9
    ft_batch_size: int = 32
    floor_multiplier: int = 3

    def validate(self) -> None:
        if not self.grid:
            raise ValidationError("sweep grid is empty")
        if any(not (0.0 <= s < 1.0) for s in self.grid):
            raise ValidationError("grid values must lie in [0, 1)")
        if any(b >= a for a, b in zip(self.grid[1:], self.grid)):
            raise ValidationError("grid must be strictly increasing")
        if self.baseline not in ("uniform", "layerwise", "both"):
            raise ValidationError(f"unknown baseline {self.baseline!r}")
        for m in self.methods:
            if m not in ("weight-magnitude", "channel-l1", "channel-random"):
                raise ValidationError(f"unknown method {m!r}")
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")
        if not self.seeds:
            raise ValidationError("at least one seed is required")

    def allocations(self) -> tuple[str, ...]:
        if self.baseline == "both":
            return ("uniform", "layerwise")
        return (self.baseline,)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_sweep(
    g: ModelGraph,
    profile: CapacityProfile,
    eval_data: Dataset,
    spec: SweepSpec,
    csv_path,
    ft_data: Dataset | None = None,
) -> list[dict]:
    """Execute the grid and write rows to csv_path; returns the rows."""
    spec.validate()
    ft_data = ft_data if ft_data is not None else eval_data
    prunable_ids = profile.layer_ids()
    prunable_params = [layer_param_count(g.spec(lid)) for lid in prunable_ids]

    def allocate(mode: str, strength: float) -> SparsityPlan:
        if mode == "uniform":
            return uniform_plan(prunable_ids, prunable_params, strength)
        return solve_allocation(
            allocation_input(g, profile, strength, spec.floor_multiplier)
        )

    rows: list[dict] = []
    for s in spec.grid:
        for method_kind in spec.methods:
            for mode in spec.allocations():
                rows.extend(_run_cell(g, eval_data, ft_data, spec, allocate,
                                      s, method_kind, mode))

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in CSV_COLUMNS])
    return rows


def _run_cell(g, eval_data, ft_data, spec, allocate, s, method_kind, mode) -> list[dict]:
    base = {"method": method_kind, "allocation": mode, "s": s}
    is_random = method_kind == "channel-random"
    is_channel = method_kind.startswith("channel")
    trials = spec.trials if is_random else 1
    try:
        if is_channel:
            calibration = calibrate_strength(
                g, s, lambda t: allocate(mode, t), method_kind
            )
            s_hat = calibration.s_hat
        else:
            s_hat = s
        plan = allocate(mode, s_hat)
    except PrunekitError as exc:
        return [dict(base, s_hat=None, trial=0, phase="p", seed=None,
                     status=f"error: {exc}")]

    cell_rows: list[dict] = []
    accs: dict[str, list[float]] = {"p": [], "p+ft": []}
    for trial in range(trials):
        seed = spec.seeds[trial % len(spec.seeds)]
        try:
            method = PruneMethod(method_kind, seed=seed if is_random else None)
            result = prune(g, plan, method)
            acc = evaluate(result.model, eval_data)
            accs["p"].append(acc)
            cell_rows.append(dict(base, s_hat=s_hat, trial=trial, phase="p",
                                  accuracy=acc,
                                  achieved_sparsity=result.achieved_sparsity,
                                  seed=seed, status="ok"))
            if spec.finetune:
                cfg = TrainConfig(epochs=spec.ft_epochs,
                                  learning_rate=spec.ft_learning_rate,
                                  momentum=spec.ft_momentum,
                                  batch_size=spec.ft_batch_size,
                                  seed=seed)
                tuned = finetune(result.model, result.masks, ft_data, cfg)
                ft_acc = evaluate(tuned, eval_data)
                accs["p+ft"].append(ft_acc)
                cell_rows.append(dict(base, s_hat=s_hat, trial=trial, phase="p+ft",
                                      accuracy=ft_acc,
                                      achieved_sparsity=result.achieved_sparsity,
                                      seed=seed, status="ok"))
        except PrunekitError as exc:
            cell_rows.append(dict(base, s_hat=s_hat, trial=trial, phase="p",
                                  seed=seed, status=f"error: {exc}"))

    for row in cell_rows:
        phase_accs = accs.get(row.get("phase"), [])
        if phase_accs:
            row["accuracy_median"] = float(np.median(phase_accs))
            row["accuracy_min"] = float(min(phase_accs))
            row["accuracy_max"] = float(max(phase_accs))
    return cell_rows
