"""Numeric tolerances and defaults, defined once so tests and code agree.

Gradient checks run in double precision; training may run in single
precision for speed. Everything that asserts a tolerance imports it from
here instead of re-declaring a literal.
"""

import numpy as np

# Default dtype for freshly created tensors. Training configs may choose
# float32 explicitly; verification math stays in float64.
DEFAULT_DTYPE = np.float64

# Attention rows are softmax outputs and must sum to one.
ATTN_ROW_SUM_TOL = 1e-6

# Central-difference gradient check threshold (double precision, h=1e-4).
GRAD_CHECK_STEP = 1e-4
GRAD_CHECK_TOL = 1e-4

# Reduction/equivalence comparisons (e.g. group-of-one vs plain forward).
REDUCTION_EQ_TOL = 1e-9

# AdamW must match the scalar reference recurrence this tightly.
ADAMW_REF_TOL = 1e-12

# Eigenvalues of PSD matrices may dip this far below zero before the
# Frechet distance computation treats the input as invalid.
PSD_EIG_TOL = 1e-8

# Unit-norm feature vectors.
UNIT_NORM_TOL = 1e-9
