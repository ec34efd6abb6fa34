import csv
import hashlib
import json
import sys
from datetime import datetime
from loguru import logger
from pathlib import Path
from pydantic import BaseModel
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from tncompress.models import ManifestFile, RunManifest

DATETIME_FORMAT = "%Y-%m-%dT%H:%M:%S.%f"


def format_datetime(dt: datetime) -> str:
    return dt.strftime(DATETIME_FORMAT)


def now() -> str:
    return format_datetime(datetime.now())


def derive_seed(master: int, consumer: str) -> int:
    """Split the master seed deterministically per consumer ("init", "batching", "subset", ...)"""
    digest = hashlib.sha256(consumer.encode("utf-8")).digest()
    key = int.from_bytes(digest[:4], "little")
    return int(np.random.SeedSequence([int(master), key]).generate_state(1)[0])


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def sha256_json(data: Dict) -> str:
    return sha256_bytes(json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def write_csv(path: Path, rows: Sequence[Dict], columns: Optional[List[str]] = None) -> Path:
    """Header row, then one record per line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(key for key in row if key not in columns)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logger.debug(f"Wrote {len(rows)} rows to {path}")
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def manifest_files(paths: Iterable[Path]) -> List[ManifestFile]:
    return [ManifestFile(path=str(path), sha256=sha256_file(path)) for path in paths if Path(path).exists()]


def write_manifest(manifest: RunManifest, output_dir: Path) -> Path:
    path = Path(output_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2))
    logger.info(f"Run manifest written to {path}")
    return path


def model_rows(models: Sequence[BaseModel], exclude: Optional[set] = None) -> List[Dict]:
    return [model.model_dump(mode="json", exclude=exclude) for model in models]


def setup_logging(level: str = "INFO", log_file: Optional[Path] = None) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level)
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        logger.add(log_file, level="DEBUG")
