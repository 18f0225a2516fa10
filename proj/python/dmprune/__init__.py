"""Python bindings for the dmprune pruning engine.

Bundles are exchanged as plain dicts of numpy arrays. ``load_bundle`` returns
one of three layouts, keyed by ``kind``: "model", "gradients" or
"calibration"; ``save_bundle`` accepts the same dicts.
"""

try:
    from dmprune import _dmprune as _ext
except ImportError:  # in-tree build: the extension sits on PYTHONPATH by itself
    import _dmprune as _ext

DmpruneError = _ext.DmpruneError
Fisher = _ext.Fisher
brute_force_allocate = _ext.brute_force_allocate
count_grid = _ext.count_grid
default_kappa = _ext.default_kappa
delta_curve = _ext.delta_curve
dp_allocate = _ext.dp_allocate
load_bundle = _ext.load_bundle
prune_order = _ext.prune_order
run_cli = _ext.run_cli
run_prune = _ext.run_prune
save_bundle = _ext.save_bundle
taylor_scores = _ext.taylor_scores

__all__ = [
    "DmpruneError",
    "Fisher",
    "brute_force_allocate",
    "count_grid",
    "default_kappa",
    "delta_curve",
    "dp_allocate",
    "load_bundle",
    "prune_order",
    "run_cli",
    "run_prune",
    "save_bundle",
    "taylor_scores",
]
