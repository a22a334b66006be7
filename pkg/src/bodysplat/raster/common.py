"""Constants shared by the rasterizer backends.

Both kernel implementations must treat these identically; the pure-numpy
and the compiled path are required to agree (and are tested against each
other and against a brute-force blending oracle).
"""

import numpy as np

TILE = 16                        # tile edge in pixels
TMIN = 1e-4                      # early-termination transmittance
CUTOFF = float(np.exp(-4.5))     # Gaussian values below 3 sigma are skipped
SIGMA_SCR = 0.7                  # screen-space low-pass sigma (pixels)
PARALLEL_EPS = 1e-8              # |ray . normal| below this counts as parallel
DIV_GUARD = 1e-12                # guard for the 1/(1-w) backward term
GRAD_COLS = 20                   # per-entry gradient record width
