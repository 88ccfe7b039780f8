"""
Configuration template for the Prekopa identity verifier

Copy this file to 'config.py' to override the default tolerances for every
run on this machine. Per-run values go in a key = value run file (see
EXAMPLE_RUN_CONFIG below) and win over both.
"""

# Pass / fail thresholds
TOLERANCES = {
    # headline: |phi2_fd - phi2_moments| and |phi2_fd - phi2_decomposition|, relative
    'identity_rel': 1e-2,
    'solver_residual': 1e-10,
    'sign_slack': 1e-8,

    # error(h) / error(h/2) required when the resolution doubles
    'refinement_ratio': 3.0,
    # errors below this are at rounding level and pass the refinement check
    'refinement_floor': 1e-9,

    'ibp_rel': 1e-3,
    # max |du/dnu| / max |grad u| allowed before the boundary term is trusted
    'bc_relative': 0.1,
    'limit_error': 1e-3,
}

# Linear solver
SOLVER_CONFIG = {
    'method': 'direct',      # or 'cg'
    'workers': 1,
}

# Finite differences in t
FD_CONFIG = {
    # h_t defaults to 1e-3 * (1 + |t|)
    'richardson': False,
}

# Example run file, save as e.g. 'disk_verify.cfg' and run
#   python prekopa_cli.py verify --config disk_verify.cfg --out results
EXAMPLE_RUN_CONFIG = """
mode = verify
domain = disk
domain.center = 0, 0
domain.radius = 1
oracle = AnisotropicConvex
oracle.c = 1
oracle.v = 1, 0
beta = 5
t_values = 0
resolution = 64, 128

# optional
# h_t = 1e-3
# fd.richardson = false
# refine = true
# solver = direct
# workers = 4
# tol.identity_rel = 1e-2
"""
