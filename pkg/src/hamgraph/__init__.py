"""Learning interaction graphs and Hamiltonian surrogates for lattice dynamics.

Pipeline: generate trajectory data for a benchmark lattice, fit a dense
graph surrogate whose loss is the residual of Hamilton's equations, cluster
the learned adjacency to recover the coupling structure, train per-cluster
surrogates on the pruned graph, and roll them out for long-horizon
prediction and evaluation.
"""

__version__ = "0.1.0"
