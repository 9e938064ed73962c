"""Reuse an encoder learned on eight tasks for a ninth task with little data.

The downstream learner freezes the upstream encoder and fits only decoders;
the baseline runs the full encoder search on the new task alone.
"""
from mtfqi.harness import run_transfer

res = run_transfer(range(10), upstream_T=8, upstream_n=500, downstream_n=50)
s = res.summary()
print(f"frozen encoder : {s['downstream_mean']:.4f} +/- {s['downstream_se']:.4f}")
print(f"from scratch   : {s['scratch_mean']:.4f} +/- {s['scratch_se']:.4f}")
print(f"paired gap     : {s['paired_diff_mean']:+.4f} +/- {s['paired_diff_se']:.4f}")
