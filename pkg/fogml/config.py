"""Configuration defaults for fogml."""

from typing import Literal

# Wire precision used by payload accounting (parameters are float64 in memory)
DEFAULT_WIRE_BYTES = 4

# CSR byte model: value, column index and row pointer sizes
CSR_VALUE_BYTES = 4
CSR_COL_IDX_BYTES = 2
CSR_ROW_PTR_BYTES = 4

# Quantized payloads carry a float32 scale and offset
QUANT_HEADER_BYTES = 8
# Sparse payloads carry a 32-bit index per sent coordinate
SPARSE_INDEX_BYTES = 4
# Block header (round, winner, pow_time) and per-reward entry sizes
BLOCK_HEADER_BYTES = 16
BLOCK_REWARD_BYTES = 8

# Distillation
DEFAULT_ALPHA = 0.1
DEFAULT_TEMPERATURE = 2.0
DEFAULT_SEED_FRACTION = 0.02
DEFAULT_SERVER_EPOCHS = 50
# Server distillation stops once an epoch improves the seed loss by less than this
SERVER_LOSS_TOL = 1e-4

# Adaptive FL
# Cost units when no budget is configured (1:10 computation to communication)
DEFAULT_C_COMP = 1.0
DEFAULT_C_COMM = 10.0
SMOOTHING_FACTOR = 0.5
BETA_FLOOR = 1e-8
DEFAULT_TAU_MAX = 100

# GADMM
DEFAULT_RHO = 1.0
DEFAULT_INNER_STEPS = 20

# PCA power iteration
POWER_ITER_TOL = 1e-10
POWER_ITER_MAX = 10_000

# MultFAug
DEFAULT_D_MIN = 1
DEFAULT_SEEDS_PER_LABEL = 4
DEFAULT_COMPRESSION = 0.5
# Pseudo-count pulling per-label augmenter variances toward the pooled one
AUGMENTER_SHRINKAGE = 4.0

# BlockFL norm screen: reject updates above this multiple of the median norm
NORM_SCREEN_FACTOR = 10.0

METRICS_COLUMNS = (
    "round",
    "tau",
    "cum_uplink_bits",
    "cum_downlink_bits",
    "cum_cost",
    "train_loss",
    "test_acc",
    "sim_time",
)
LEDGER_COLUMNS = ("round", "src", "dst", "direction", "bytes", "sim_time")

SERVER = "server"

ProtocolName = Literal[
    "fedavg", "adaptive", "gadmm", "fd", "fld", "multfaug", "blockfl", "local"
]
Direction = Literal["uplink", "downlink"]
ModelKind = Literal["LR", "MLP1"]
Weighting = Literal["data", "uniform"]
