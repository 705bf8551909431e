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

import collections
import hashlib
import json
import os
import re
import subprocess
import tempfile
from pathlib import Path
from typing import Any, Optional, Sequence, TypeVar, Union

import numpy as np

L = TypeVar("L", bound=list[Any])


def group_by(lst: L, key: str) -> dict[Any, L]:
    """Group a list of objects by `key`.

    Args:
        lst (L)
        key (str)

    Returns:
        dict[Any, L]: Dict with different `key` as keys, insertion ordered.
    """
    d = collections.defaultdict(list)
    for e in lst:
        d[getattr(e, key)].append(e)
    return dict(d)


def replication_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child seeds, one per replication/chunk/member.

    The i-th child only depends on (`seed`, i), so results do not depend on
    how the work is distributed over workers.
    """
    return np.random.SeedSequence(seed).spawn(count)


def to_jsonable(obj: Any) -> Any:
    """Convert numpy containers and scalars to plain python objects."""
    if isinstance(obj, np.ndarray):
        return [to_jsonable(x) for x in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        # JSON has no representation of nan/inf.
        return f if np.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(x) for x in obj]
    return obj


def stable_json(obj: Any, indent: Optional[int] = None) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=indent)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write_text(path: Path, text: str) -> Path:
    """Write `text` to `path` via a temporary file and rename.

    Readers either see the old or the complete new file.

    Args:
        path (Path)
        text (str)

    Returns:
        Path: `path`
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def get_next_file_path(
    path: Path, base_filename: str, extensions: Union[str, Sequence[str]]
) -> Path:
    """Looking for the next free filename in format {base_filename}_revXXX.

    The revision number starts with 001 and will always be +1 from the highest
    existing revision. An empty extension looks for directories.

    Args:
        path (Path)
        base_filename (str)
        extensions (Union[str, Sequence[str]])

    Raises:
        AssertionError: When {base_filename}_rev999 already exists.

    Returns:
        Path: Path to next free file or directory.
    """
    i = 1
    extensions = [extensions] if isinstance(extensions, str) else list(extensions)
    extension = extensions[0]
    suffix = "(\\." + "|\\.".join(extensions) + ")" if extension else ""
    regex = re.compile(re.escape(base_filename) + r"_rev(\d{3})" + suffix + "$")

    path.mkdir(parents=True, exist_ok=True)
    for p in path.iterdir():
        if m := regex.match(p.name):
            j = int(m.group(1)) + 1
            if j > i:
                i = j

    assert i < 1000

    name = f"{base_filename}_rev{i:03d}"
    file_path = Path(path, f"{name}.{extension}" if extension else name)
    assert not file_path.exists()
    return file_path


def get_current_commit_hash(default: Optional[str] = None) -> str:
    try:
        output = subprocess.check_output(
            ["git", "rev-parse", "HEAD"], stderr=subprocess.DEVNULL
        )
        commit = output.decode()
        commit = commit.strip()
        return commit
    except (FileNotFoundError, subprocess.CalledProcessError) as e:
        if default is None:
            raise RuntimeError("Unable to determine commit hash") from e
        return default
