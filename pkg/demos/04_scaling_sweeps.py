"""Reduced versions of the three scaling sweeps, with slopes and SVG plots.

The full-size sweeps (30 seeds) run in the acceptance tests; this script uses
10 seeds so it finishes in well under a minute. Outputs land in
``demo_output/``.
"""
from pathlib import Path

from mtfqi.harness import ExperimentConfig, emit_plot, fit_loglog_slope, run_sweep

out = Path("demo_output")
seeds = list(range(10))
configs = [
    ExperimentConfig("T", [1, 2, 4, 8, 16], seeds, n=200, H=5, name="demo_T"),
    ExperimentConfig("n", [50, 100, 200, 400, 800], seeds, T=5, H=5, name="demo_n"),
    ExperimentConfig("H", [2, 4, 6, 8, 10], seeds, T=5, n=500, name="demo_H"),
]

for cfg in configs:
    rows = run_sweep(cfg, out)
    fit = fit_loglog_slope(rows, "d1_opt_sq")
    print(f"{cfg.sweep_axis}: log-log slope of mean squared error {fit.slope:+.3f} (r2 {fit.r2:.2f})")
    svg = emit_plot(out / f"{cfg.name}.csv", cfg.sweep_axis, "d1_opt", out / f"{cfg.name}.svg")
    print("   plot:", svg)

# Decoder estimation error dominates here: each task still fits its own
# d-dimensional decoder from n samples, so more tasks help little once the
# shared encoder is identified, while more samples per task help directly.
