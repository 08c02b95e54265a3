from platformdirs import user_data_path

DEFAULT_OUTPUT_PATH = user_data_path("crowdfuse")

# Any probability that ends up inside a log is clamped here first.
PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-9

# Exhaustive permutation search up to this many classes, Hungarian above.
BRUTE_FORCE_MAX_CLASSES = 8

DEFAULT_MIN_COLABELS = 20
DEFAULT_SPAMMER_THRESHOLD = 0.1
