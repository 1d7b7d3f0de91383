"""On-disk container plumbing shared by datasets and checkpoints.

A container is a directory holding raw little-endian float64 blobs, a
``manifest.json`` describing them (shapes, per-blob sha256), and a
``checksum.txt`` with the sha256 of the manifest bytes so manifest tampering
is detectable.  Manifests are serialized deterministically (sorted keys) so a
save/load/save round trip is byte-identical.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MANIFEST_NAME = "manifest.json"
CHECKSUM_NAME = "checksum.txt"
BLOB_DTYPE = "<f8"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def _manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()


def write_container(path, manifest: dict, arrays: dict) -> None:
    """Write ``arrays`` (name -> ndarray) plus a checksummed manifest.

    The manifest gains a ``blobs`` entry mapping each array name to its
    shape and sha256.  Existing keys in ``manifest`` are preserved.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes()
        (path / f"{name}.bin").write_bytes(data)
        blobs[name] = {"shape": list(arr.shape), "sha256": sha256_bytes(data)}
    manifest = dict(manifest)
    manifest["blobs"] = blobs
    data = _manifest_bytes(manifest)
    (path / MANIFEST_NAME).write_bytes(data)
    (path / CHECKSUM_NAME).write_text(sha256_bytes(data) + "\n")


def read_manifest(path) -> dict:
    """Load and checksum-verify a container manifest."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {path}")
    data = manifest_path.read_bytes()
    checksum_path = path / CHECKSUM_NAME
    if not checksum_path.exists():
        raise FormatError(f"no {CHECKSUM_NAME} in {path}")
    expected = checksum_path.read_text().strip()
    if sha256_bytes(data) != expected:
        raise FormatError(f"manifest checksum mismatch in {path}")
    return json.loads(data)


def load_blob(path, manifest: dict, name: str) -> np.ndarray:
    """Load one verified array from a container."""
    path = Path(path)
    entry = manifest.get("blobs", {}).get(name)
    if entry is None:
        raise FormatError(f"manifest has no blob entry '{name}'")
    blob_path = path / f"{name}.bin"
    if not blob_path.exists():
        raise FormatError(f"missing blob '{name}' in {path}")
    data = blob_path.read_bytes()
    if sha256_bytes(data) != entry["sha256"]:
        raise FormatError(f"corrupt blob '{name}' in {path}")
    arr = np.frombuffer(data, dtype=BLOB_DTYPE)
    shape = tuple(entry["shape"])
    if arr.size != int(np.prod(shape)):
        raise FormatError(f"blob '{name}' has {arr.size} values, expected shape {shape}")
    return arr.reshape(shape).copy()


def container_digest(path) -> str:
    """Digest identifying a container's full contents.

    The manifest embeds every blob's sha256, so hashing the manifest bytes
    covers the data transitively.
    """
    return sha256_file(Path(path) / MANIFEST_NAME)
