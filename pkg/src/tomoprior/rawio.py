"""External file formats: TPRAW arrays, PNG exports, manifests, metrics CSV."""

from __future__ import annotations

import csv
import os

import numpy as np
from PIL import Image

TPRAW_HEADER = "TPRAW v1"


def write_tpraw(path, array):
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("TPRAW stores 2-D arrays")
    rows, cols = arr.shape
    with open(path, "wb") as f:
        f.write(f"{TPRAW_HEADER} {rows} {cols} f32le\n".encode("ascii"))
        f.write(arr.tobytes())


def read_tpraw(path):
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip()
        parts = header.split()
        if parts[:2] != ["TPRAW", "v1"] or parts[4:] != ["f32le"]:
            raise ValueError(f"{path}: bad TPRAW header {header!r}")
        rows, cols = int(parts[2]), int(parts[3])
        data = np.frombuffer(f.read(rows * cols * 4), dtype="<f4")
        if data.size != rows * cols:
            raise ValueError(f"{path}: truncated TPRAW payload")
    return data.reshape(rows, cols).astype(np.float64)


def tpraw_bytes(array):
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    rows, cols = arr.shape
    return f"{TPRAW_HEADER} {rows} {cols} f32le\n".encode("ascii") + arr.tobytes()


def write_png(path, array, window=1.0, level=0.5):
    """8-bit grayscale export with window/level intensity mapping."""
    arr = np.asarray(array, dtype=np.float64)
    lo = level - window / 2.0
    scaled = np.clip((arr - lo) / max(window, 1e-12), 0.0, 1.0)
    Image.fromarray((scaled * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def write_manifest(path, entries: dict):
    with open(path, "w", encoding="ascii") as f:
        for key, value in entries.items():
            f.write(f"{key}={value}\n")


def read_manifest(path):
    entries = {}
    with open(path, encoding="ascii") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            entries[key] = value
    return entries


METRICS_FIELDS = ["method", "task", "seed", "psnr", "ssim"]


def append_metrics_row(path, method, task, seed, psnr_value, ssim_value):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(METRICS_FIELDS)
        writer.writerow([method, task, seed, f"{psnr_value:.6g}", f"{ssim_value:.6g}"])
