import csv
import hashlib
import json
import logging
import platform
import socket
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from grid import Field, field_from_json, field_to_json, read_field, write_field
from kernels import KernelTable, write_table
from schemas import ReportEnvelope, ReportMetadata

logger = logging.getLogger(name=__name__)


class ArtifactStore:
    root: Optional[Path] = None

    @classmethod
    def open_store(cls, root: str | Path) -> None:
        """Create the artifact tree under root"""
        try:
            cls.root = Path(root)
            for sub in ("fields", "reports", "cache"):
                (cls.root / sub).mkdir(parents=True, exist_ok=True)
            logger.info(msg=f"Artifact store opened at {cls.root}")
        except OSError as e:
            logger.error(msg=f"Failed to open artifact store at {root}: {e}")
            raise

    @classmethod
    def close_store(cls) -> None:
        if cls.root:
            logger.info(msg=f"Artifact store at {cls.root} closed")
            cls.root = None

    @classmethod
    def get_root(cls) -> Path:
        if cls.root is None:
            raise RuntimeError("Artifact store not open. Call open_store() first.")
        return cls.root


def fields_dir() -> Path:
    return ArtifactStore.get_root() / "fields"


def reports_dir() -> Path:
    return ArtifactStore.get_root() / "reports"


def cache_dir() -> Path:
    return ArtifactStore.get_root() / "cache"


def _resolve(path: str | Path, default_dir) -> Path:
    path = Path(path)
    if path.is_absolute() or path.parent != Path("."):
        path.parent.mkdir(parents=True, exist_ok=True)
        return path
    if ArtifactStore.root is None:
        return path
    return default_dir() / path


def save_field(name: str | Path, f: Field) -> Path:
    """Binary field file (header dim, N, L; row-major float64), or JSON when the name ends in .json."""
    path = _resolve(name, fields_dir)
    if path.suffix == ".json":
        path.write_text(field_to_json(f))
    else:
        write_field(path, f)
    logger.info(msg=f"Wrote field {path}")
    return path


def load_field(path: str | Path, nonneg: bool = False) -> Field:
    path = Path(path)
    if path.suffix == ".json":
        return field_from_json(path.read_text(), nonneg=nonneg)
    return read_field(path, nonneg=nonneg)


def save_table(name: str | Path, table: KernelTable) -> Path:
    path = _resolve(name, fields_dir)
    write_table(path, table)
    logger.info(msg=f"Wrote kernel table {path}")
    return path


def payload_digest(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(text.encode()).hexdigest()


def build_envelope(payload: dict, started: datetime, finished: Optional[datetime] = None) -> ReportEnvelope:
    finished = finished or datetime.now(timezone.utc)
    metadata = ReportMetadata(
        started=started,
        finished=finished,
        duration_seconds=(finished - started).total_seconds(),
        host=socket.gethostname(),
        python=platform.python_version(),
        payload_sha256=payload_digest(payload),
    )
    return ReportEnvelope(payload=payload, metadata=metadata)


def save_report(name: str | Path, envelope: ReportEnvelope) -> Path:
    path = _resolve(name, reports_dir)
    path.write_text(envelope.model_dump_json(indent=2))
    logger.info(msg=f"Wrote report {path} (payload sha256 {envelope.metadata.payload_sha256[:12]})")
    return path


def save_rows_csv(name: str | Path, rows: list[dict]) -> Path:
    path = _resolve(name, reports_dir)
    with path.open("w", newline="") as handle:
        if rows:
            writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    logger.info(msg=f"Wrote {len(rows)} rows to {path}")
    return path


def save_histogram(name: str | Path, ratios: list[float], bins: int = 20) -> Path:
    """Gnuplot-ready ratio histogram: one `bin_lo bin_hi count` line per bin."""
    path = _resolve(name, reports_dir)
    finite = np.asarray([r for r in ratios if np.isfinite(r)])
    lines = ["# bin_lo bin_hi count"]
    if finite.size:
        counts, edges = np.histogram(finite, bins=bins)
        lines += [f"{lo:.10g} {hi:.10g} {int(c)}" for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    path.write_text("\n".join(lines) + "\n")
    logger.info(msg=f"Wrote histogram {path}")
    return path
