"""
How editing disturbs the training loss
======================================

Plain gradient descent on a single target's loss, averaged over 50 targets,
for an MLP, a GCN and a GraphSAGE model trained on the same graph. The
target loss falls while the training loss creeps up.
"""

from gnnedit.cli import build_model, load_dataset, resolve_config
from gnnedit.editharness import EditContext, run_motivation

cfg = resolve_config()
graph, split = load_dataset(cfg)
ctx = EditContext.build(graph, split)
models = {kind: build_model(cfg, ctx, kind)[0] for kind in ("mlp", "gcn", "sage")}

rows = run_motivation(models, ctx, steps=20, num_targets=50)

print(f"{'arch':>5} {'metric':>12} {'step 0':>9} {'step 10':>9} {'last':>9}")
for arch in models:
    for metric in ("target_loss", "train_loss", "grad_rmse"):
        vals = [r["value"] for r in rows if r["arch"] == arch and r["metric"] == metric]
        print(f"{arch:>5} {metric:>12} {vals[0]:9.4f} {vals[10]:9.4f} {vals[-1]:9.4f}")
