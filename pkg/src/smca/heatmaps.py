"""Dump spatial priors and co-attention maps of the last decoder layer as PGM + CSV."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .tensor import no_grad


def write_pgm(path, grid: np.ndarray) -> None:
    """Plain-text graymap (P2, maxval 255), scaled so the grid maximum maps to 255."""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max()
    pixels = np.zeros(grid.shape, dtype=np.int64) if peak <= 0 else np.rint(255.0 * grid / peak).astype(np.int64)
    h, w = grid.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in pixels]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4 : 4 + w * h], dtype=np.int64).reshape(h, w)


def emit_heatmaps(model, image, out_dir) -> list[Path]:
    """Write one PGM per (query, head, scale) for attention and, if modulated, for G.

    Per scale also writes ``attention_s{stride}.csv`` and ``gaussian_s{stride}.csv``:
    one row per (query, head), query-major, holding the flattened grid
    (row-major). Attention rows sum to 1.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create heatmap directory {out_dir}: {exc}") from exc
    traces: list = []
    with no_grad():
        model.forward(image, traces=traces)
    trace = traces[-1]
    heads = model.cfg.heads
    written = []
    size = image.shape[-1]
    for s, stride in enumerate(model.cfg.scales):
        h = w = size // stride
        attn = trace.attention[s].data  # [heads, N, L]
        n = attn.shape[1]
        rows = []
        for q in range(n):
            for hd in range(heads):
                rows.append(attn[hd, q])
                path = out_dir / f"attn_q{q}_h{hd}_s{stride}.pgm"
                write_pgm(path, attn[hd, q].reshape(h, w))
                written.append(path)
        written.append(_write_rows(out_dir / f"attention_s{stride}.csv", rows, h * w))
        log_g = trace.log_maps[s]
        if log_g is None:
            continue
        g = np.exp(log_g.data)  # [N, P, H, W]
        p = g.shape[1]
        rows = []
        for q in range(n):
            for hd in range(heads):
                grid = g[q, hd if p > 1 else 0]
                rows.append(grid.reshape(-1))
                path = out_dir / f"gauss_q{q}_h{hd}_s{stride}.pgm"
                write_pgm(path, grid)
                written.append(path)
        written.append(_write_rows(out_dir / f"gaussian_s{stride}.csv", rows, h * w))
    return written


def _write_rows(path: Path, rows, length: int) -> Path:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"cell_{i}" for i in range(length)])
            for row in rows:
                writer.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path
