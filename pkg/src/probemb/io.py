"""Line-delimited embedding files, CSV/JSON reports and run manifests.

Embedding files start with a header line naming the format and version,
followed by one JSON object per embedding::

    {"format": "probemb.embeddings", "version": "1.0"}
    {"id": "img0000", "mu": [...], "log_var": [...], "normalized": true, "modality": "image"}

Reals are written with Python's shortest round-trip repr, so
write -> read -> write is byte-identical.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import io as _io
import json
import math
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ParseError, SchemaError
from .gauss import GaussianEmbedding

EMBEDDINGS_FORMAT = "probemb.embeddings"
MANIFEST_FORMAT = "probemb.manifest"
FORMAT_VERSION = "1.0"
MODALITIES = ("image", "text")
OUTPUT_DIR_ENV = "PROBEMB_OUTPUT_DIR"


@contextmanager
def locked_writer(path, newline=None):
    """Open ``path`` for writing under an exclusive advisory lock."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a+", encoding="utf-8", newline=newline) as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.seek(0)
            fh.truncate()
            yield fh
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(", ", ": "), allow_nan=False)


def _header(fmt) -> str:
    return _dumps({"format": fmt, "version": FORMAT_VERSION})


def _check_version(version, fmt, line):
    try:
        major = int(str(version).split(".")[0])
    except ValueError:
        raise SchemaError(f"unreadable {fmt} version {version!r}", line) from None
    if major != int(FORMAT_VERSION.split(".")[0]):
        raise SchemaError(f"unsupported {fmt} major version {version!r}", line)


def embedding_record(z: GaussianEmbedding) -> dict:
    if z.modality not in MODALITIES:
        raise SchemaError(f"embedding {z.id!r} has modality {z.modality!r}")
    return {"id": str(z.id), "mu": z.mu.tolist(), "log_var": z.log_var.tolist(),
            "normalized": bool(z.normalized), "modality": z.modality}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def save_embeddings(embeddings: Iterable[GaussianEmbedding], path) -> dict:
    """Write embeddings; returns a manifest entry ``{path, sha256, records}``."""
    records = [embedding_record(z) for z in embeddings]
    dims = {len(r["mu"]) for r in records}
    if len(dims) > 1:
        raise SchemaError(f"embeddings have mixed dimensions {sorted(dims)}")
    with locked_writer(path) as fh:
        fh.write(_header(EMBEDDINGS_FORMAT) + "\n")
        for r in records:
            fh.write(_dumps(r) + "\n")
    return {"path": str(path), "sha256": sha256_file(path), "records": len(records)}


def _record_to_embedding(rec, lineno) -> GaussianEmbedding:
    if not isinstance(rec, dict):
        raise SchemaError("record is not an object", lineno)
    missing = {"id", "mu", "log_var", "normalized", "modality"} - rec.keys()
    if missing:
        raise SchemaError(f"missing fields {sorted(missing)}", lineno)
    if rec["modality"] not in MODALITIES:
        raise SchemaError(f"modality must be one of {MODALITIES}", lineno)
    mu, lv = rec["mu"], rec["log_var"]
    if not (isinstance(mu, list) and isinstance(lv, list)):
        raise SchemaError("mu and log_var must be arrays", lineno)
    if len(mu) != len(lv):
        raise SchemaError(f"mu has {len(mu)} entries but log_var has {len(lv)}", lineno)
    if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in mu + lv):
        raise SchemaError("mu and log_var must hold finite numbers", lineno)
    if not isinstance(rec["normalized"], bool):
        raise SchemaError("normalized must be a boolean", lineno)
    try:
        return GaussianEmbedding(mu, lv, id=rec["id"], normalized=rec["normalized"],
                                 modality=rec["modality"])
    except ValueError as exc:
        raise SchemaError(str(exc), lineno) from None


def load_embeddings(path) -> list:
    """Read an embedding file; an empty file gives an empty list."""
    out = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return out
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
        if lineno == 1:
            if not isinstance(rec, dict) or rec.get("format") != EMBEDDINGS_FORMAT:
                raise SchemaError(f"first line must be a {EMBEDDINGS_FORMAT} header", lineno)
            _check_version(rec.get("version"), EMBEDDINGS_FORMAT, lineno)
            continue
        z = _record_to_embedding(rec, lineno)
        if dim is None:
            dim = z.dim
        elif z.dim != dim:
            raise SchemaError(f"dimension {z.dim} differs from earlier records ({dim})", lineno)
        out.append(z)
    return out


def write_json(obj, path) -> None:
    with locked_writer(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: malformed JSON ({exc.msg})", exc.lineno) from None


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_csv(rows: Sequence[dict], columns: Sequence[str], path) -> None:
    """CSV with a fixed column order; floats as shortest round-trip decimals."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    with locked_writer(path, newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def output_dir(explicit, command) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get(OUTPUT_DIR_ENV)
    base = Path(env) if env else Path("probemb-out")
    return base / command


def write_manifest(out_dir, command: Sequence[str], config: dict, seed, inputs: Sequence,
                   outputs: Sequence) -> Path:
    """Record the run: argv, config, seed and content digests of every file."""
    out_dir = Path(out_dir)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": FORMAT_VERSION,
        "command": list(command),
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
    }
    path = out_dir / "manifest.json"
    write_json(manifest, path)
    return path


def verify_manifest(path) -> dict:
    """Map output name -> (recorded digest, current digest) for a manifest."""
    path = Path(path)
    m = read_json(path)
    if m.get("format") != MANIFEST_FORMAT:
        raise SchemaError(f"{path} is not a manifest")
    _check_version(m.get("version"), MANIFEST_FORMAT, None)
    return {name: (digest, sha256_file(path.parent / name))
            for name, digest in m["outputs"].items()}
