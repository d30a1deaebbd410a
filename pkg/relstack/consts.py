"""Stores useful constants."""
from datetime import datetime as dt

# Block and reward geometry (meters)
BLOCK_SIZE = 0.05
DELTA = 0.05
TABLE_Z = 0.0

MAX_BLOCKS = 9
STEPS_PER_BLOCK = 50
ACTION_DIM = 4
ACTION_SCALE = 0.05  # meters per unit delta per step
MAX_FINGER_GAP = 0.10
GRASP_GAP = 0.05
RELEASE_GAP = 0.06
GRASP_RADIUS = 0.025
GRASP_HEIGHT = 0.03
STABLE_OFFSET = 0.025
FINGER_SIZE = 0.02

# Feature layout
EE_DIM = 8
BLOCK_FEATURE_DIM = 15
GOAL_DIM = 3
BLOCK_INPUT_DIM = BLOCK_FEATURE_DIM + 2 * GOAL_DIM

# Numerics
LEAKY_SLOPE = 0.01
LAYER_NORM_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
STD_FLOOR = 1e-6

PARAMS_FORMAT_TAG = "relstack-params"
PARAMS_FORMAT_VERSION = 1


TIMESTAMP = dt.now().strftime("%Y-%m-%d--%H-%M-%S")
