"""Attention-aware post-training weight quantization toolkit.

Quantizes the query/key/value projections of an attention head separately
while minimizing the attention-output reconstruction error through
trace-form losses over pre-computed calibration statistics, with
brute-force oracles certifying every algebraic reduction and an analytic
flop model for the cost claims.
"""

__version__ = "0.1.0"
