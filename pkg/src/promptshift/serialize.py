"""Deterministic on-disk container for named float arrays.

np.savez wraps arrays in a zip archive whose headers embed timestamps, so
its bytes differ across runs.  Artifacts here must be byte-identical when
regenerated from the same config and seed, so we use a minimal container:
one JSON meta line (sorted keys) followed by raw .npy blocks in the order
listed in the meta.  np.lib.format writes are fully deterministic.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import InputError

_MAGIC = b"PSNAP1\n"


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays plus a JSON-serializable meta dict to ``path``."""
    names = sorted(arrays)
    header = {"meta": meta or {}, "names": names, "version": 1}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name in names:
            np.lib.format.write_array(fh, np.ascontiguousarray(arrays[name]))


def load_arrays(path) -> tuple[dict, dict]:
    """Read back (arrays, meta) written by :func:`save_arrays`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise InputError(f"{path}: not a promptshift array container")
        header = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        for name in header["names"]:
            arrays[name] = np.lib.format.read_array(fh)
    return arrays, header["meta"]


def digest_arrays(arrays: dict) -> str:
    """SHA-256 over array bytes in sorted name order; detects any mutation."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


def canonical_json(obj) -> str:
    """Canonical JSON used for config hashing and reports."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def rng_state_to_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def rng_from_json(state_json: str) -> np.random.Generator:
    state = json.loads(state_json)
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def dumps_report(obj) -> str:
    """Pretty, key-sorted JSON with trailing newline for report files."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def np_tolist(arr) -> list:
    return np.asarray(arr).tolist()


def write_bytes_if_changed(path, data: bytes) -> None:
    """Write only when content differs; keeps rerun overwrites byte-stable."""
    try:
        with open(path, "rb") as fh:
            if fh.read() == data:
                return
    except OSError:
        pass
    with open(path, "wb") as fh:
        fh.write(data)
