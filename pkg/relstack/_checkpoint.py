"""Defines utility functions for saving and loading parameters, tables and checkpoint directories."""

from __future__ import annotations
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple, Union
import json
import os
import shutil
import numpy as np
import pandas as pd

# ----
from relstack._tensor import Parameter
from relstack.consts import PARAMS_FORMAT_TAG, PARAMS_FORMAT_VERSION
from relstack.error import CheckpointFormatError

PathLike = Union[str, Path]


def params_save(params: Union[Mapping[str, np.ndarray], Iterable[Parameter]], path: PathLike):
    """Saves named arrays to a parameter file

    Layout: a format tag line, a JSON manifest line of [name, shape] pairs,
    then raw little-endian float64 values in manifest order.

    Args:
        params (Mapping[str, np.ndarray] | Iterable[Parameter]): Values to store
        path (PathLike): Destination file
    """
    if isinstance(params, Mapping):
        items = [(k, np.asarray(v, dtype=np.float64)) for k, v in params.items()]
    else:
        items = [(p.name, p.value) for p in params]
    manifest = [[name, list(arr.shape)] for name, arr in items]
    with open(path, "wb") as fp:
        fp.write(f"{PARAMS_FORMAT_TAG} {PARAMS_FORMAT_VERSION}\n".encode("utf-8"))
        fp.write((json.dumps(manifest) + "\n").encode("utf-8"))
        for _, arr in items:
            fp.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def params_load(path: PathLike) -> Dict[str, np.ndarray]:
    """Loads a parameter file written by params_save

    Raises:
        CheckpointFormatError: Wrong tag, unsupported version or truncated payload

    Returns:
        Dict[str, np.ndarray]: name -> array, in manifest order
    """
    with open(path, "rb") as fp:
        header = fp.readline().decode("utf-8").split()
        if len(header) != 2 or header[0] != PARAMS_FORMAT_TAG:
            raise CheckpointFormatError(f"{path} is not a parameter file")
        if int(header[1]) != PARAMS_FORMAT_VERSION:
            raise CheckpointFormatError(f"{path} has unsupported format version {header[1]}")
        try:
            manifest: List[Tuple[str, List[int]]] = json.loads(fp.readline().decode("utf-8"))
        except json.JSONDecodeError as ex:
            raise CheckpointFormatError(f"{path} has a corrupt manifest") from ex
        payload = fp.read()

    out: Dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise CheckpointFormatError(f"{path} is truncated at '{name}'")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        out[name] = arr.astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointFormatError(f"{path} has {len(payload) - offset} trailing bytes")
    return out


def params_assign(params: Iterable[Parameter], values: Mapping[str, np.ndarray]):
    """Copies loaded values into Parameters, checking names and shapes

    Raises:
        CheckpointFormatError: A parameter is missing or has the wrong shape
    """
    for p in params:
        if p.name not in values:
            raise CheckpointFormatError(f"Parameter '{p.name}' missing from checkpoint")
        arr = values[p.name]
        if arr.shape != p.shape:
            raise CheckpointFormatError(
                f"Parameter '{p.name}' has shape {arr.shape}, expected {p.shape}"
            )
        p.value = np.array(arr, dtype=np.float64)


def json_load(path: PathLike) -> Optional[dict]:
    """Attempts to load a JSON document, None if not found"""
    try:
        with open(path, "r", encoding="utf-8") as fp:
            return json.load(fp)
    except FileNotFoundError:
        return None


def json_save(obj: dict, path: PathLike):
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(obj, fp, indent=4, sort_keys=True)


def table_load(path: PathLike) -> pd.DataFrame:
    """Loads a table stored at `path` in the serialization format given by its extension

    Supported formats are:
        - csv
        - parquet
        - feather
        - pkl | pickle
        - xlsx

    Raises:
        ValueError: In the event of an unsupported serialization format

    Returns:
        pd.DataFrame: Loaded table. Empty if nothing exists at path
    """
    path = str(path)
    ext = path.rsplit(".", 1)[-1].lower().strip()
    try:
        if ext == "csv":
            df = pd.read_csv(path)
        elif ext == "parquet":
            df = pd.read_parquet(path)
        elif ext == "feather":
            df = pd.read_feather(path)
        elif ext in ("pkl", "pickle"):
            df = pd.read_pickle(path)
        elif ext == "xlsx":
            df = pd.read_excel(path)
        else:
            raise ValueError(
                f"Invalid extension in path, '{ext}' is not a supported serialization format"
            )
    except FileNotFoundError:
        df = pd.DataFrame()
    return df


def table_save(data: pd.DataFrame, path: PathLike):
    """Saves a table in the serialization format given by the file extension

    Raises:
        ValueError: In the event of unsupported serialization format
    """
    path = str(path)
    ext = path.rsplit(".", 1)[-1].lower().strip()
    if ext == "csv":
        data.to_csv(path, index=False)
    elif ext == "parquet":
        data.to_parquet(path)
    elif ext == "feather":
        data.reset_index(drop=True).to_feather(path)
    elif ext in ("pkl", "pickle"):
        data.to_pickle(path)
    elif ext == "xlsx":
        data.to_excel(path, index=False)
    else:
        raise ValueError(
            f"Invalid extension in path, '{ext}' is not a supported serialization format"
        )


def checkpoint_name(step: int) -> str:
    return f"step_{step:09d}"


def write_checkpoint_dir(root: PathLike, step: int, writer: Callable[[Path], None]) -> Path:
    """Writes a checkpoint directory atomically and points `latest` at it

    `writer` fills a temporary directory which is then renamed into place,
    so a crash never leaves a half-written checkpoint under its final name.

    Args:
        root (PathLike): Checkpoint root (`<output>/checkpoints`)
        step (int): Environment step count, used for the directory name
        writer (Callable[[Path], None]): Fills the directory

    Returns:
        Path: Final checkpoint directory
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    final = root / checkpoint_name(step)
    tmp = root / f".tmp_{checkpoint_name(step)}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    writer(tmp)
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)

    latest_tmp = root / ".latest.tmp"
    latest_tmp.write_text(final.name + "\n", encoding="utf-8")
    os.replace(latest_tmp, root / "latest")
    return final


def latest_checkpoint(root: PathLike) -> Optional[Path]:
    """Resolves `<root>/latest`, None if no checkpoint was written yet"""
    root = Path(root)
    marker = root / "latest"
    if not marker.exists():
        return None
    target = root / marker.read_text(encoding="utf-8").strip()
    return target if target.is_dir() else None


def resolve_checkpoint(path: PathLike) -> Path:
    """Accepts a checkpoint directory, or a checkpoint root / run directory holding `latest`

    Raises:
        CheckpointFormatError: Nothing loadable at path
    """
    path = Path(path)
    if (path / "manifest.json").exists():
        return path
    for root in (path, path / "checkpoints"):
        found = latest_checkpoint(root)
        if found is not None:
            return found
    raise CheckpointFormatError(f"No checkpoint found at {path}")
