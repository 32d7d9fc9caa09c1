"""Building a draft tree by hand, then letting the pruner do it.

Run: python demos/token_tree.py
"""

from pimspec.hwmodel import SystemConfig
from pimspec.scheduler import (
    HardwareEstimator, HeadStats, Objective, TokenTree, best_expected_length,
    expected_accept_length, explore_tree, optimal_ratio, path_acceptance,
)
from pimspec.simloop import OracleConfig
from pimspec.workload import build_model_spec

stats = HeadStats.from_rows([[0.8, 0.1], [0.6, 0.3], [0.4, 0.3]])

# %% a chain and a bushier tree with the same node count
chain = TokenTree.from_paths([(1, 1, 1)])
bush = TokenTree.from_paths([(1, 1), (1, 2)])
for name, tree in (("chain", chain), ("bush", bush)):
    probs = [round(path_acceptance(tree, n.id, stats), 3) for n in tree.nodes[1:]]
    print(f"{name:6} paths={[tree.ranks(n.id) for n in tree.nodes[1:]]} p={probs} "
          f"E[accepted]={expected_accept_length(tree, stats):.3f}")

# %% greedy growth by accuracy alone matches the exact optimum
for budget in range(1, 7):
    tree = explore_tree(stats, None, Objective("accuracy", budget))
    print(f"budget {budget}: greedy {expected_accept_length(tree, stats):.3f}  "
          f"optimum {best_expected_length(stats, budget):.3f}")

# %% with a hardware estimator the tree stops where the next node costs more than it returns
model, sys = build_model_spec("llama2-7b"), SystemConfig()
oracle = OracleConfig().stats(4)
est = HardwareEstimator(model, sys, lambda l: optimal_ratio(l, sys))
est.seq_len = 256
for mode in ("accuracy", "throughput", "energy", "edp"):
    tree = explore_tree(oracle, est, Objective(mode, budget=15))
    lat, energy = est(tree.l_spec)
    tokens = 1 + expected_accept_length(tree, oracle)
    print(f"{mode:10} L_spec={tree.l_spec:2}  tokens/pass={tokens:.2f}  "
          f"{tokens / lat:6.1f} tok/s  {tokens / energy:5.1f} tok/J")
