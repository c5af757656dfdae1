"""Balanced per-plate assignment of predictions to classes.

Every plate contains each eligible class exactly once, so argmax predictions
that reuse a class within a plate are certainly partly wrong. The heuristic
here iteratively suppresses over-claimed classes: each sweep keeps, for every
multiply-chosen class, the row claiming it with the highest probability and
subtracts a decrement from the other claimants' entries for that class. The
decrement starts at 0.001 and is halved after every sweep. An exact solver
(brute force for small plates, Hungarian on -log probabilities in general)
serves as the reference the heuristic is measured against.
"""

from __future__ import annotations

import csv
import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import DatasetManifest
from .errors import ConfigError, DataFormatError, ShapeError

INITIAL_DECREMENT = 1e-3
MAX_SWEEPS = 10_000
PROB_FLOOR = 1e-12
ROW_SUM_TOL = 1e-8


@dataclass
class ProbabilityMatrix:
    """Square per-plate prediction matrix: rows wells, columns eligible classes."""

    plate_key: tuple[int, int]
    wells: list[int]  # image_index per row
    class_ids: list[int]  # global class label per column
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        n = len(self.wells)
        if self.probs.shape != (n, len(self.class_ids)):
            raise ShapeError(f"probability matrix {list(self.probs.shape)} does not match {n} wells x {len(self.class_ids)} classes")
        if len(set(self.wells)) != n or len(set(self.class_ids)) != len(self.class_ids):
            raise ShapeError("wells and class_ids must be unique")
        if np.any(self.probs < 0):
            raise ShapeError("probabilities must be nonnegative")
        if n and np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ShapeError("probability rows must sum to 1")

    @property
    def n(self) -> int:
        return len(self.wells)

    def require_square(self) -> None:
        if self.probs.shape[0] != self.probs.shape[1]:
            raise ShapeError(f"plate {self.plate_key}: matrix {list(self.probs.shape)} is not square")


@dataclass
class Assignment:
    """Bijective well -> class map for one plate."""

    plate_key: tuple[int, int]
    mapping: dict[int, int]  # image_index -> global class label
    sweeps_used: int = 0

    def validate_against(self, pm: ProbabilityMatrix) -> None:
        if sorted(self.mapping) != sorted(pm.wells):
            raise ShapeError(f"plate {self.plate_key}: assignment covers wrong wells")
        if sorted(self.mapping.values()) != sorted(pm.class_ids):
            raise ShapeError(f"plate {self.plate_key}: assignment is not a bijection onto the class set")


def _column_indices(pm: ProbabilityMatrix, choice: np.ndarray, sweeps: int) -> Assignment:
    mapping = {pm.wells[row]: pm.class_ids[int(col)] for row, col in enumerate(choice)}
    out = Assignment(plate_key=pm.plate_key, mapping=mapping, sweeps_used=sweeps)
    out.validate_against(pm)
    return out


def log_objective(pm: ProbabilityMatrix, assignment: Assignment) -> float:
    """Sum of log probabilities (floored at 1e-12) the assignment collects."""
    col_of = {c: i for i, c in enumerate(pm.class_ids)}
    total = 0.0
    for row, well in enumerate(pm.wells):
        total += float(np.log(max(pm.probs[row, col_of[assignment.mapping[well]]], PROB_FLOOR)))
    return total


def balance_heuristic(pm: ProbabilityMatrix) -> Assignment:
    """Iterative decrement procedure; always returns a feasible bijection.

    Sweeps stop as soon as the per-row argmax is conflict-free. Once the
    halved decrement underflows to exactly 0.0 further sweeps cannot change
    anything, so the remaining conflicts go straight to the greedy fallback
    that also guards the sweep cap.
    """
    pm.require_square()
    n = pm.n
    if n == 0:
        return Assignment(plate_key=pm.plate_key, mapping={}, sweeps_used=0)
    work = pm.probs.copy()
    delta = INITIAL_DECREMENT
    rows = np.arange(n)
    for sweep in range(MAX_SWEEPS):
        choice = np.argmax(work, axis=1)
        counts = np.bincount(choice, minlength=n)
        conflicted = np.flatnonzero(counts > 1)
        if conflicted.size == 0:
            return _column_indices(pm, choice, sweeps=sweep)
        if delta == 0.0:
            break
        for col in conflicted:
            claimants = rows[choice == col]
            keeper = claimants[int(np.argmax(work[claimants, col]))]
            losers = claimants[claimants != keeper]
            work[losers, col] -= delta
        delta /= 2.0

    # greedy fallback: keep the strongest claimant per chosen class, then fill
    # remaining rows by descending adjusted probability over unused classes
    choice = np.argmax(work, axis=1)
    assigned_col = np.full(n, -1, dtype=np.intp)
    for col in np.unique(choice):
        claimants = rows[choice == col]
        keeper = claimants[int(np.argmax(work[claimants, col]))]
        assigned_col[keeper] = col
    free_rows = rows[assigned_col < 0]
    free_cols = np.setdiff1d(np.arange(n), assigned_col[assigned_col >= 0])
    order = sorted(
        ((float(work[r, c]), int(r), int(c)) for r in free_rows for c in free_cols),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    row_done = set()
    col_done = set()
    for _p, r, c in order:
        if r in row_done or c in col_done:
            continue
        assigned_col[r] = c
        row_done.add(r)
        col_done.add(c)
    return _column_indices(pm, assigned_col, sweeps=MAX_SWEEPS)


def balance_oracle(pm: ProbabilityMatrix, method: str = "auto") -> Assignment:
    """Exact maximizer of the summed log probability under the bijection.

    ``brute`` enumerates permutations (n <= 12); ``hungarian`` solves the
    equivalent min-cost assignment on -log probabilities; ``auto`` picks
    hungarian. Both routes agree on instances with a unique optimum.
    """
    pm.require_square()
    if method not in ("auto", "brute", "hungarian"):
        raise ConfigError(f"unknown oracle method '{method}'")
    n = pm.n
    if n == 0:
        return Assignment(plate_key=pm.plate_key, mapping={})
    logp = np.log(np.maximum(pm.probs, PROB_FLOOR))
    if method == "brute":
        if n > 12:
            raise ConfigError(f"brute-force oracle limited to n <= 12, got {n}")
        best_perm = None
        best = -np.inf
        perms = itertools.permutations(range(n))
        idx = np.arange(n)
        while True:
            chunk = np.array(list(itertools.islice(perms, 40320)), dtype=np.intp)
            if chunk.size == 0:
                break
            totals = logp[idx, chunk].sum(axis=1)
            k = int(np.argmax(totals))
            # ties resolve to the lexicographically first permutation
            if totals[k] > best:
                best = float(totals[k])
                best_perm = chunk[k]
        return _column_indices(pm, best_perm, sweeps=0)
    row_ind, col_ind = linear_sum_assignment(-logp)
    choice = np.empty(n, dtype=np.intp)
    choice[row_ind] = col_ind
    return _column_indices(pm, choice, sweeps=0)


def plate_matrices(
    predictions: dict[int, np.ndarray],
    manifest: DatasetManifest,
    split: str = "test",
    wells=None,
) -> list[ProbabilityMatrix]:
    """Partition predictions into per-plate square matrices.

    Rows are the plate's ``split`` wells, or an explicit ``wells`` collection
    of image indices when given. Columns are the eligible classes (the
    ground-truth label set of the selected wells); rows are renormalized over
    those columns, falling back to uniform when a row has no mass there.
    """
    selected = None if wells is None else {int(w) for w in wells}
    matrices = []
    for key in manifest.plate_keys():
        if selected is None:
            recs = sorted((r for r in manifest.plate_records(key) if r.split == split), key=lambda r: r.image_index)
        else:
            recs = sorted((r for r in manifest.plate_records(key) if r.image_index in selected), key=lambda r: r.image_index)
        if not recs:
            continue
        missing = [r.image_index for r in recs if r.image_index not in predictions]
        if missing:
            raise DataFormatError(f"plate {key}: missing predictions for image_index {missing[:4]}")
        if any(r.class_label is None for r in recs):
            raise DataFormatError(f"plate {key}: eligible class set unknown (records without labels)")
        class_ids = sorted({r.class_label for r in recs})
        if len(class_ids) != len(recs):
            raise DataFormatError(f"plate {key}: {len(recs)} wells but {len(class_ids)} eligible classes")
        rows = np.empty((len(recs), len(class_ids)))
        for i, r in enumerate(recs):
            full = np.asarray(predictions[r.image_index], dtype=np.float64)
            if full.ndim != 1 or full.shape[0] < max(class_ids) + 1:
                raise ShapeError(f"prediction for image {r.image_index} has shape {list(full.shape)}")
            row = full[class_ids]
            mass = row.sum()
            rows[i] = row / mass if mass > 0 else np.full(len(class_ids), 1.0 / len(class_ids))
        matrices.append(ProbabilityMatrix(plate_key=key, wells=[r.image_index for r in recs], class_ids=class_ids, probs=rows))
    return matrices


def _max_workers(n_tasks: int) -> int:
    raw = os.environ.get("PLATESCOPE_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"PLATESCOPE_THREADS must be an integer, got '{raw}'")
    if cap < 0:
        raise ConfigError(f"PLATESCOPE_THREADS must be >= 0, got {cap}")
    if cap == 0:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def apply_postprocess(
    predictions: dict[int, np.ndarray],
    manifest: DatasetManifest,
    split: str = "test",
    wells=None,
) -> dict[int, int]:
    """Balance every plate of the selection; returns image_index -> class label."""
    matrices = plate_matrices(predictions, manifest, split=split, wells=wells)
    workers = _max_workers(len(matrices))
    if workers > 1 and len(matrices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            assignments = list(pool.map(balance_heuristic, matrices))
    else:
        assignments = [balance_heuristic(pm) for pm in matrices]
    merged: dict[int, int] = {}
    for a in assignments:
        merged.update(a.mapping)
    return dict(sorted(merged.items()))


def write_assignment_csv(path, mapping: dict[int, int]) -> None:
    """CSV with header image_index,predicted_class, rows sorted by image."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_index", "predicted_class"])
        for image_index in sorted(mapping):
            writer.writerow([image_index, mapping[image_index]])


def read_assignment_csv(path) -> dict[int, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_index", "predicted_class"]:
            raise DataFormatError(f"{path}: expected header image_index,predicted_class")
        out = {}
        for line in reader:
            if len(line) != 2:
                raise DataFormatError(f"{path}: malformed row {line}")
            out[int(line[0])] = int(line[1])
    return out
