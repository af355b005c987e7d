"""
Shared numerical defaults for the explicit DPC toolkit.

Values come from the environment (or a .env file next to the working directory)
and can be overridden per call or per CLI flag.

    DPC_TOL_RANK     relative singular-value factor of the rank convention
    DPC_TOL_OPT      feasibility / multiplier tolerance of the QP solver
    DPC_FACET_STEP   facet crossing step of the explicit solver
    DPC_MAX_WORKERS  threads used for facet exploration
    DPC_SEED         default seed of randomized routines
    DPC_MAX_RETRIES  retry budget of the excitation generator
    DEBUG            any value switches the CLI to DEBUG logging
"""

import os

# Try to load dotenv if available, otherwise rely on environment
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

TOL_RANK = float(os.getenv("DPC_TOL_RANK", "1e-12"))
TOL_OPT = float(os.getenv("DPC_TOL_OPT", "1e-9"))
FACET_STEP = float(os.getenv("DPC_FACET_STEP", "1e-7"))
MAX_WORKERS = int(os.getenv("DPC_MAX_WORKERS", "4"))
SEED = int(os.getenv("DPC_SEED", "0"))
MAX_RETRIES = int(os.getenv("DPC_MAX_RETRIES", "20"))
DEBUG = bool(os.getenv("DEBUG"))

# Point location and region validation
TOL_CONTAINS = 1e-9
TOL_REGION_RADIUS = 1e-8
