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

import logging
from logging import getLogger, shutdown  # noqa: F401

from config import LOG_FILE_LEVEL, LOG_LEVEL, TMP_LOG_FILEPATH

log = getLogger(None)
log.setLevel(LOG_LEVEL)

# Remove the handlers of the basic logger.
for handler in list(log.handlers):
    log.removeHandler(handler)

# Handler
ch = logging.StreamHandler()
ch.setLevel(logging.DEBUG)
# Opened on the first record, runs without warnings leave no log file.
fh = logging.FileHandler(TMP_LOG_FILEPATH, "w", delay=True)
fh.setLevel(LOG_FILE_LEVEL)

# Formatter
formatter = logging.Formatter(
    "%(asctime)s %(processName)-16s %(name)-12s %(levelname)-8s %(message)s"
)

handlers: list[logging.Handler] = [ch, fh]
for handler in handlers:
    handler.setFormatter(formatter)
    log.addHandler(handler)


def configure_worker() -> None:
    """Initializer of the process pools.

    Workers only log to stderr. The run log file is written by the main
    process alone.
    """
    root = getLogger(None)
    for handler in list(root.handlers):
        if isinstance(handler, logging.FileHandler):
            root.removeHandler(handler)
