"""Grid-world natural-language grounding: environment, instruction grammar,
attention-fusion agent, A3C training, probes, and the episode wire protocol."""
import os

# Our GEMMs are small; BLAS thread pools only add contention, especially with
# multi-process training. Effective only if numpy is not yet loaded.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
