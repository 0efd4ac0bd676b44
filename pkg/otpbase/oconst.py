from typing import Literal, TypeAlias

FORMAT_VERSION = 1

Technique: TypeAlias = Literal["knn", "ks", "lr", "krr"]

DesignKind: TypeAlias = Literal["grid", "farthest_point"]

AllocationRule: TypeAlias = Literal["optimal", "fixed_T"]

Split: TypeAlias = Literal["midpoint", "upper"]

LabelMode: TypeAlias = Literal["prsgd", "exact", "classical"]

Setting: TypeAlias = Literal["otp", "cr"]

Role: TypeAlias = Literal["design", "solve", "test", "labels", "pilot"]

Statistic: TypeAlias = Literal["mean", "sd", "min", "max", "offline_mean", "grand_mean"]

REPLICATION_STATS: tuple[str, ...] = ("mean", "sd", "min", "max")

EXPERIMENT_CSV_HEADER = [
    "technique",
    "rule",
    "gamma",
    "n",
    "T",
    "hyper",
    "replication",
    "stat",
    "value",
]

SWEEP_CSV_HEADER = ["technique", "gamma", "grand_mean_gap"]

TABLE_CSV_HEADER = ["technique", "gamma", "rule", "n", "T", "grand_mean_gap"]

EXIT_OK = 0
EXIT_INVALID_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

# newsvendor defaults
DEFAULT_SHORTAGE_COST = 3.0
DEFAULT_OVERAGE_COST = 1.0
DEFAULT_NOISE_SCALE = 0.3
DEFAULT_COVARIATE_HI = 3.0
DEFAULT_MU_MAX = 0.4

MAX_GRID_POINTS = 10_000_000
GAP_CLAMP = 1e-10
NEGATIVE_GAP_TOLERANCE = 1e-3

DEFAULT_N_TEST = 100
DEFAULT_TEST_MARGIN = 1.0 / 30.0
DEFAULT_REPLICATIONS = 20
FULL_SCALE_REPLICATIONS = 100
DEFAULT_POOL_FACTOR = 10
DEFAULT_T_BAR = 100
DEFAULT_PILOT_COVARIATES = 1024
DEFAULT_GAP_THRESHOLD = 0.02

GAMMA0_LOW_DIM = 0.8
GAMMA0_HIGH_DIM = 4.0

KRR_LENGTHSCALE_FRACTION = 1.0

ENV_SEED = "OTP_SEED"
ENV_WORKERS = "OTP_WORKERS"
ENV_LOG_LEVEL = "OTP_LOG_LEVEL"
