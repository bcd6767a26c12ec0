import os
import sys

# honor the thread cap before numpy is imported anywhere
_cap = os.environ.get("DUPL_THREADS")
if _cap:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

from dualcam.cli import main

sys.exit(main())
