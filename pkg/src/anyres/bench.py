"""Forward-pass timing for single-pass and sliding-window inference.

Only encoder forwards are timed. Planning, window cropping, stitching and I/O
stay outside the measured region. Each measurement follows a number of
untimed warm-up passes.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .vit import ModelParams, ViTConfig, forward, forward_window
from .window import crop_windows, plan_windows

CSV_COLUMNS = ["mode", "H", "W", "K", "s", "m", "sub_batch", "warmup", "seconds", "threads"]


@dataclass
class TimingRecord:
    mode: str
    H: int
    W: int
    K: int
    s: int
    m: int
    sub_batch: int
    seconds: float
    warmup_passes: int
    threads: int = 1

    def row(self) -> dict:
        out = asdict(self)
        out["warmup"] = out.pop("warmup_passes")
        return out


def time_single_pass(params: ModelParams, cfg: ViTConfig, image, warmup: int = 10, trials: int = 1) -> TimingRecord:
    params = params.with_trainable(())
    H, W = image.shape[:2]
    samples = []
    for _ in range(trials):
        for _ in range(warmup):
            forward(image, params, cfg)
        start = time.perf_counter()
        forward(image, params, cfg)
        samples.append(time.perf_counter() - start)
    return TimingRecord("single_pass", H, W, cfg.native_side, 0, 1, 1, statistics.median(samples), warmup)


def _run_sub_batch(windows, params, cfg, pool):
    if pool is None:
        return [forward_window(w, params, cfg) for w in windows]
    return list(pool.map(lambda w: forward_window(w, params, cfg), windows))


def time_sliding_window(
    params: ModelParams,
    cfg: ViTConfig,
    image,
    K: int,
    s: int,
    sub_batch: int = 60,
    warmup: int = 10,
    trials: int = 1,
    threads: int = 1,
) -> TimingRecord:
    """Sum of per-sub-batch forward times over all windows of one image.

    Warm-up runs ``warmup`` untimed forwards of the first sub-batch, which
    keeps the warm-up cost independent of the window count.
    """
    if K != cfg.native_side:
        raise ValueError(f"window {K} differs from the model's native side {cfg.native_side}")
    if sub_batch < 1:
        raise ValueError("sub_batch must be positive")
    H, W = image.shape[:2]
    plan = plan_windows(H, W, K, s, cfg.patch_size)
    windows = [np.ascontiguousarray(w) for w in crop_windows(image, plan)]
    batches = [windows[i : i + sub_batch] for i in range(0, len(windows), sub_batch)]
    params = params.with_trainable(())
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    samples = []
    try:
        for _ in range(trials):
            for _ in range(warmup):
                _run_sub_batch(batches[0], params, cfg, pool)
            total = 0.0
            for batch in batches:
                start = time.perf_counter()
                _run_sub_batch(batch, params, cfg, pool)
                total += time.perf_counter() - start
            samples.append(total)
    finally:
        if pool is not None:
            pool.shutdown()
    return TimingRecord(
        "sliding_window", H, W, K, s, plan.m, sub_batch, statistics.median(samples), warmup, threads
    )


def sweep(
    params: ModelParams,
    cfg: ViTConfig,
    image,
    K: int,
    strides,
    sub_batch: int = 60,
    warmup: int = 10,
    trials: int = 1,
    threads: int = 1,
) -> list[TimingRecord]:
    """One single-pass record followed by one sliding-window record per stride."""
    strides = list(strides)
    if not strides:
        raise ValueError("at least one stride is required")
    for s in strides:
        if not 1 <= s <= K:
            raise ValueError(f"stride {s} outside [1, {K}]")
    records = [time_single_pass(params, cfg, image, warmup, trials)]
    for s in strides:
        records.append(time_sliding_window(params, cfg, image, K, s, sub_batch, warmup, trials, threads))
    return records


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        row = rec.row()
        row["seconds"] = f"{row['seconds']:.9f}"
        writer.writerow(row)
    return buf.getvalue()


def svg_scatter(rows: list[dict], metric: str, width: int = 480, height: int = 320) -> str:
    """Scatter of ``seconds`` (x, log scale) against a user-supplied metric column."""
    pts = [(float(r["seconds"]), float(r[metric]), r) for r in rows if r.get(metric) not in (None, "")]
    if not pts:
        raise ValueError(f"no rows carry a value for {metric!r}")
    pad = 40
    xs = [np.log10(max(p[0], 1e-12)) for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    sx = (width - 2 * pad) / (x1 - x0 or 1.0)
    sy = (height - 2 * pad) / (y1 - y0 or 1.0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">log10 seconds</text>',
        f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" text-anchor="middle">{metric}</text>',
    ]
    for x, y, (_, _, row) in zip(xs, ys, pts):
        cx = pad + (x - x0) * sx
        cy = height - pad - (y - y0) * sy
        label = "single" if row["mode"] == "single_pass" else f"s={row['s']}"
        parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="4"/>')
        parts.append(f'<text x="{cx + 6:.1f}" y="{cy - 6:.1f}" font-size="10">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
