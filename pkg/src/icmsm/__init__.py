"""Non-parametric EM estimation of cumulative transition intensities in
interval-censored Markov multi-state models without loops."""
__version__ = "0.1.0"
