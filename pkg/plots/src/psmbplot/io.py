"""Readers for the trainer's exported artifacts.

Three formats, all plain text:

* metrics JSONL: one JSON object per training step with at least ``step``
  plus loss and schedule fields (``total_loss``, ``loss_gm``, ``loss_gl``,
  ``loss_agree``, ``lambda1``, ``lambda2``, ``tau_t``, ``m``, ``grad_norm``).
* ablation CSV: header ``config,probe_acc,seed``, one row per trained
  variant and seed.
* embeddings CSV: header ``image_id,label,f0,...``, one row per image;
  label -1 marks unlabeled rows.

Malformed JSONL lines are skipped and counted rather than fatal: a run that
died mid-write still has a plottable prefix.  The CSV formats are written in
one shot by their producers, so damage there is treated as a real error.
"""

from __future__ import annotations

import csv
import json
from typing import Dict, List, Tuple

import numpy as np


def read_metrics(path: str) -> Tuple[List[Dict], int]:
    """Parse a metrics JSONL file.

    Returns the valid records in file order and the number of lines that
    were dropped (unparseable JSON, or parseable but missing ``step``).
    """
    records: List[Dict] = []
    skipped = 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                skipped += 1
                continue
            if not isinstance(obj, dict) or "step" not in obj:
                skipped += 1
                continue
            records.append(obj)
    return records, skipped


def read_ablation(path: str) -> List[Dict]:
    """Parse an ablation CSV into rows of {config: str, probe_acc: float, seed: int}."""
    rows: List[Dict] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = [c for c in ("config", "probe_acc", "seed") if c not in fields]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            try:
                rows.append({"config": row["config"],
                             "probe_acc": float(row["probe_acc"]),
                             "seed": int(row["seed"])})
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: bad row {row!r}") from exc
    return rows


def read_embeddings(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Parse an embeddings CSV into (features (N, d) f64, labels (N,) int)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["image_id", "label"]:
            raise ValueError(f"{path}: expected 'image_id,label,f0,...' header")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        return np.zeros((0, 0)), np.zeros((0,), dtype=int)
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: {data.shape[1]} columns, header names {len(header)}")
    return data[:, 2:], data[:, 1].astype(int)
