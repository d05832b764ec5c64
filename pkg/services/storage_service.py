"""
Storage Service - run directories and file formats.

Depth frames use a small binary container (PMDI): a 16-byte
little-endian header (magic b'PMDI', u32 width, u32 height, u32
reserved) followed by uint16 millimetres, row-major. Poses and
intrinsics are JSON, streams are JSON Lines validated by the record
schemas, traces are CSV.
"""

import csv
import hashlib
import json
import logging
import struct
from datetime import datetime
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Type, TypeVar

import numpy as np
from pydantic import BaseModel

from backend.errors import ValidationError
from backend.models.geometry import CameraIntrinsics, DepthImage, Pose
from backend.schemas.records import PoseRecord

logger = logging.getLogger(__name__)

DEPTH_MAGIC = b'PMDI'
# magic, width, height, reserved (written as 0, ignored on read)
DEPTH_HEADER = struct.Struct('<4sIII')
MAX_DEPTH_MM = 65535

R = TypeVar('R', bound=BaseModel)


def write_depth(path, image: DepthImage) -> Path:
    """Write a depth frame; depths are rounded to millimetres and clipped at 65.535 m."""
    path = Path(path)
    mm = np.clip(np.rint(image.data * 1000.0), 0, MAX_DEPTH_MM).astype('<u2')
    with open(path, 'wb') as f:
        f.write(DEPTH_HEADER.pack(DEPTH_MAGIC, image.width, image.height, 0))
        f.write(mm.tobytes())
    return path


def read_depth(path) -> DepthImage:
    """
    Read a PMDI depth frame.

    Raises:
        ValidationError: bad magic, empty frame or truncated payload
    """
    data = Path(path).read_bytes()
    if len(data) < DEPTH_HEADER.size:
        raise ValidationError(f"{path}: file too short for a depth header")
    magic, width, height, _reserved = DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise ValidationError(f"{path}: not a depth frame (magic {magic!r})")
    if width == 0 or height == 0:
        raise ValidationError(f"{path}: empty depth frame ({width}x{height})")
    expected = DEPTH_HEADER.size + 2 * width * height
    if len(data) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, got {len(data)}")
    mm = np.frombuffer(data, dtype='<u2', offset=DEPTH_HEADER.size).reshape(height, width)
    return DepthImage(mm.astype(float) / 1000.0)


def write_pose(path, pose: Pose) -> Path:
    path = Path(path)
    path.write_text(PoseRecord.from_pose(pose).model_dump_json(indent=2))
    return path


def read_pose(path) -> Pose:
    return PoseRecord.model_validate_json(Path(path).read_text()).to_pose()


def write_intrinsics(path, intr: CameraIntrinsics) -> Path:
    path = Path(path)
    path.write_text(intr.model_dump_json(indent=2))
    return path


def read_intrinsics(path) -> CameraIntrinsics:
    return CameraIntrinsics.model_validate_json(Path(path).read_text())


def write_jsonl(path, records: Iterable[BaseModel]) -> int:
    """Write one JSON object per line. Returns the number of records."""
    count = 0
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(record.model_dump_json())
            f.write('\n')
            count += 1
    logger.debug(f"Wrote {count} records to {path}")
    return count


def read_jsonl(path, schema: Type[R]) -> List[R]:
    """
    Read and validate a JSON Lines file.

    Raises:
        ValidationError: a line fails validation (line number in the message)
    """
    records = []
    with open(path, encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(schema.model_validate_json(line))
            except ValueError as e:
                raise ValidationError(f"{path}:{lineno}: {e}") from e
    return records


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> int:
    count = 0
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
            count += 1
    return count


def write_dict_csv(path, rows: List[dict]) -> int:
    if not rows:
        Path(path).write_text('')
        return 0
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return len(rows)


class StorageService:
    """
    Output directory management for runs.

    Each run gets its own timestamped directory below the output root;
    a manifest with SHA-256 digests is written when the run is closed.
    """

    def __init__(self, output_dir: str = 'runs/'):
        """
        Initialize storage service.

        Args:
            output_dir: Root directory for run outputs (default: 'runs/')
        """
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        logger.debug(f"Storage directory ensured: {self.output_dir}")

    def create_run_dir(self, name: str, stamp: Optional[datetime] = None) -> Path:
        """Create <output_dir>/<name>-<YYYYmmdd-HHMMSS>, suffixing on collision."""
        stamp = stamp or datetime.now()
        base = self.output_dir / f"{name}-{stamp.strftime('%Y%m%d-%H%M%S')}"
        path, suffix = base, 1
        while path.exists():
            path = base.with_name(f"{base.name}-{suffix}")
            suffix += 1
        path.mkdir(parents=True)
        logger.info(f"Run directory: {path}")
        return path

    @staticmethod
    def compute_file_hash(file_path, algorithm: str = 'sha256') -> str:
        """
        Compute hash of a file.

        Args:
            file_path: Path to file
            algorithm: Hash algorithm ('sha256', 'md5', 'sha1')

        Returns:
            Hex digest of file hash
        """
        if algorithm not in ('sha256', 'md5', 'sha1'):
            raise ValueError(f"Unsupported hash algorithm: {algorithm}")
        hasher = hashlib.new(algorithm)
        with open(file_path, 'rb') as f:
            for block in iter(lambda: f.read(65536), b''):
                hasher.update(block)
        return hasher.hexdigest()

    def write_manifest(self, run_dir: Path) -> Path:
        """manifest.json listing every file of the run with its digest and size."""
        entries = []
        for path in sorted(p for p in run_dir.rglob('*') if p.is_file() and p.name != 'manifest.json'):
            entries.append({
                'file': str(path.relative_to(run_dir)),
                'sha256': self.compute_file_hash(path),
                'bytes': path.stat().st_size,
            })
        manifest = run_dir / 'manifest.json'
        manifest.write_text(json.dumps({'files': entries}, indent=2))
        return manifest

    def list_runs(self) -> List[Path]:
        return sorted(p for p in self.output_dir.iterdir() if p.is_dir())
