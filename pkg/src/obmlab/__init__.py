"""Desk-scale laboratory for learned object-based memory filters.

Modules: diffcore (reverse-mode autodiff on dense matrices), simworld
(multi-table drifting-object domain), obmnet (the slot-memory filter),
losses (chamfer-style objective with sparsity term), baselines
(data-association filter, clustering, gated recurrent network), evalkit
(matching and metrics), trainer (optimization loop), cli (experiment
entry point).
"""

__version__ = "0.1.0"
