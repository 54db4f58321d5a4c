"""Figure rendering for sweep results.

Figures are derived entirely from the summary rows (the same data as the
CSV), so regenerating them from a stored CSV reproduces identical plots.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import POOL_DISCRIMINATIVE, POOL_TARGET_MIXTURE, POOL_TARGET_ZERO

_POOL_STYLE = {
    POOL_DISCRIMINATIVE: dict(color="tab:blue", marker="o", label="discriminative"),
    POOL_TARGET_MIXTURE: dict(color="tab:orange", marker="s", label="degenerate: target = mixture"),
    POOL_TARGET_ZERO: dict(color="tab:green", marker="^", label="degenerate: target = 0"),
}


def _finite(values: list[float]) -> list[float]:
    return [v for v in values if math.isfinite(v)]


def render_sweep_figures(
    rows: list[dict], out_dir: str | Path, x_label: str = "grid value"
) -> list[Path]:
    """One figure per concept: discriminative panel above, degenerate below.

    ``rows`` are summary records with grid_index, grid_value, concept, pool,
    and median_si_sdr keys. Returns the written figure paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    concepts = sorted({r["concept"] for r in rows})
    grid_points = sorted({(r["grid_index"], str(r["grid_value"])) for r in rows})
    xs = [idx for idx, _ in grid_points]
    tick_labels = [label.strip('"') for _, label in grid_points]

    written: list[Path] = []
    for concept in concepts:
        subset = [r for r in rows if r["concept"] == concept]
        pools = sorted({r["pool"] for r in subset})
        has_degenerate = any(p != POOL_DISCRIMINATIVE for p in pools)
        n_panels = 2 if has_degenerate else 1
        fig, axes = plt.subplots(n_panels, 1, figsize=(6.0, 3.0 * n_panels), sharex=True)
        if n_panels == 1:
            axes = [axes]

        def plot_pool(ax, pool: str) -> None:
            series = {r["grid_index"]: r["median_si_sdr"] for r in subset if r["pool"] == pool}
            if not series:
                return
            ys = [series.get(x, math.nan) for x in xs]
            # infinities (perfect reconstructions) are clipped to the finite
            # data range for display; the CSV keeps the exact values
            finite = _finite(ys)
            ceiling = (max(finite) + 5.0) if finite else 40.0
            floor = (min(finite) - 5.0) if finite else -40.0
            ys = [ceiling if y == math.inf else floor if y == -math.inf else y for y in ys]
            ax.plot(xs, ys, **_POOL_STYLE.get(pool, dict(marker="o", label=pool)))

        plot_pool(axes[0], POOL_DISCRIMINATIVE)
        axes[0].set_ylabel("median SI-SDR (dB)")
        axes[0].set_title(f"{concept}: discriminative")
        axes[0].grid(True, alpha=0.3)
        if has_degenerate:
            for pool in (POOL_TARGET_MIXTURE, POOL_TARGET_ZERO):
                plot_pool(axes[1], pool)
            axes[1].set_ylabel("median SI-SDR (dB)")
            axes[1].set_title(f"{concept}: degenerate")
            axes[1].grid(True, alpha=0.3)
            axes[1].legend(fontsize=8)
        axes[-1].set_xticks(xs)
        axes[-1].set_xticklabels(tick_labels, rotation=30, ha="right", fontsize=8)
        axes[-1].set_xlabel(x_label)
        fig.tight_layout()
        path = out_dir / f"sweep_{concept}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written
