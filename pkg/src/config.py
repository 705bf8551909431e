# GroupWeightOpt
# Copyright (C) 2024  GroupWeightOpt contributors

# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as
# published by the Free Software Foundation, either version 3 of the
# License, or (at your option) any later version.

# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.

# You should have received a copy of the GNU Affero General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

import configparser
from os import environ
from pathlib import Path

import core

# Dir and file paths
BASE_PATH = Path(__file__).parent.parent.absolute()
CONFIG_FILE = BASE_PATH / "config.ini"
EXPORT_PATH = BASE_PATH / "export"
TMP_LOG_FILEPATH = BASE_PATH / "tmp.log"

# General config
config = configparser.ConfigParser()
config.read(CONFIG_FILE)
for _section in ("BASE", "SOLVER", "BILEVEL", "RUN"):
    if not config.has_section(_section):
        config.add_section(_section)

LOG_LEVEL = config["BASE"].get("LOG_LEVEL", "INFO")
LOG_FILE_LEVEL = config["BASE"].get("LOG_FILE_LEVEL", "WARNING")
EXPORT_EXCEL = config["BASE"].getboolean("EXPORT_EXCEL", False)
WORKERS = config["BASE"].getint("WORKERS", 1)

MAX_ITERATIONS = config["SOLVER"].getint("MAX_ITERATIONS", 100)
GRADIENT_TOLERANCE = config["SOLVER"].getfloat("GRADIENT_TOLERANCE", 1e-8)
HESSIAN_DAMPING = config["SOLVER"].getfloat("HESSIAN_DAMPING", 1e-8)

LEARNING_RATE = config["BILEVEL"].getfloat("LEARNING_RATE", 0.1)
MOMENTUM = config["BILEVEL"].getfloat("MOMENTUM", 0.5)
MAX_STEPS = config["BILEVEL"].getint("MAX_STEPS", 100)
Q_LEARNING_RATE = config["BILEVEL"].getfloat("Q_LEARNING_RATE", 0.1)
IFT_DAMPING = config["BILEVEL"].getfloat("IFT_DAMPING", 1e-6)
try:
    PENALTY = core.PenaltyKind(config["BILEVEL"].get("PENALTY", "ridge"))
except ValueError as e:
    raise NotImplementedError(
        f"Unknown penalty {e}. Choose one of "
        f"{', '.join(kind.value for kind in core.PenaltyKind)}."
    )
PENALTY_STRENGTH = config["BILEVEL"].getfloat("PENALTY_STRENGTH", 1e-3)
SMOOTHING_EPSILON = config["BILEVEL"].getfloat("SMOOTHING_EPSILON", 1e-4)
RESPLIT_ATTEMPTS = config["BILEVEL"].getint("RESPLIT_ATTEMPTS", 10)

ENSEMBLE_SIZE = config["RUN"].getint("ENSEMBLE_SIZE", 10)
SEEDS = config["RUN"].getint("SEEDS", 5)
TRAIN_FRACTION = config["RUN"].getfloat("TRAIN_FRACTION", 0.5)

# Read in environmental variables.
if _env_log_level := environ.get("LOG_LEVEL"):
    LOG_LEVEL = _env_log_level
if _env_workers := environ.get("WORKERS"):
    try:
        WORKERS = int(_env_workers)
    except ValueError as e:
        raise ValueError(
            "Unable to convert environment variable `WORKERS` to int"
        ) from e

# Program specific constants.
PROGRAM = "GroupWeightOpt"
VERSION = "1.0.0"
# Relative tolerance of probability vectors right after construction and
# after repeated arithmetic (long exponentiated gradient runs).
CONSTRUCTION_TOLERANCE = 1e-12
ARITHMETIC_TOLERANCE = 1e-9
# Condition estimate above which a damped Hessian is refused.
MAX_CONDITION = 1e12
# Stationarity of the inner fit may exceed the solver tolerance by this factor.
STALENESS_FACTOR = 10.0
# Coefficient norm treated as divergence for unpenalized fits.
SEPARATION_GUARD = 1e6
JTT_UPWEIGHTS = (1.0, 2.0, 5.0, 10.0, 25.0)
