"""
File formats and run directories.
"""

import json
import struct
from datetime import datetime

import numpy as np
import pytest

from backend.errors import ValidationError
from backend.models.geometry import CameraIntrinsics, DepthImage, Frame, Pose
from backend.models.perception import PlaneModel, PolygonSegment
from backend.schemas import OdomRecord, PolygonRecord, PoseRecord
from services.storage_service import (
    DEPTH_HEADER, StorageService, read_depth, read_intrinsics, read_jsonl, read_pose, write_csv,
    write_depth, write_dict_csv, write_intrinsics, write_jsonl, write_pose
)


class TestDepthFormat:
    """Test write_depth() / read_depth()"""

    def test_millimetre_rounding(self, tmp_path):
        data = np.array([[0.0, 1.2344], [1.2346, 2.0]])
        image = read_depth(write_depth(tmp_path / 'd.pmdi', DepthImage(data)))
        assert image.width == 2 and image.height == 2
        np.testing.assert_allclose(image.data, [[0.0, 1.234], [1.235, 2.0]], atol=1e-12)
        assert not image.valid[0, 0]

    def test_clipped_at_max_range(self, tmp_path):
        image = read_depth(write_depth(tmp_path / 'd.pmdi', DepthImage(np.full((1, 3), 70.0))))
        assert np.all(image.data == 65.535)

    def test_header_layout(self, tmp_path):
        path = write_depth(tmp_path / 'd.pmdi', DepthImage(np.ones((3, 5))))
        raw = path.read_bytes()
        assert DEPTH_HEADER.size == 16
        assert raw[:4] == b'PMDI'
        assert struct.unpack_from('<III', raw, 4) == (5, 3, 0)
        assert len(raw) == 16 + 2 * 15

    def test_reads_hand_packed_frame(self, tmp_path):
        path = tmp_path / 'hand.pmdi'
        payload = np.array([[1000, 2500], [0, 65535], [1, 2]], dtype='<u2')
        path.write_bytes(struct.pack('<4sIII', b'PMDI', 2, 3, 0) + payload.tobytes())
        image = read_depth(path)
        assert (image.width, image.height) == (2, 3)
        np.testing.assert_allclose(image.data, payload / 1000.0)

    def test_reserved_field_ignored(self, tmp_path):
        path = tmp_path / 'reserved.pmdi'
        path.write_bytes(struct.pack('<4sIII', b'PMDI', 1, 1, 7) + struct.pack('<H', 1500))
        assert read_depth(path).data[0, 0] == pytest.approx(1.5)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'bad.pmdi'
        path.write_bytes(DEPTH_HEADER.pack(b'XXXX', 1, 1, 0) + b'\x00\x00')
        with pytest.raises(ValidationError, match='magic'):
            read_depth(path)

    def test_empty_frame(self, tmp_path):
        path = tmp_path / 'empty.pmdi'
        path.write_bytes(DEPTH_HEADER.pack(b'PMDI', 0, 4, 0))
        with pytest.raises(ValidationError, match='empty'):
            read_depth(path)

    def test_truncated(self, tmp_path):
        path = write_depth(tmp_path / 'd.pmdi', DepthImage(np.ones((4, 4))))
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(ValidationError, match='expected'):
            read_depth(path)

    def test_too_short(self, tmp_path):
        path = tmp_path / 'short.pmdi'
        path.write_bytes(b'PMD')
        with pytest.raises(ValidationError, match='too short'):
            read_depth(path)


class TestPoseAndIntrinsics:
    """Test the JSON pose and intrinsics files."""

    def test_pose_round_trip(self, tmp_path):
        pose = Pose.from_xyz_yaw(1.0, -2.0, 0.8, 0.7, Frame.W, Frame.B)
        back = read_pose(write_pose(tmp_path / 'pose.json', pose))
        np.testing.assert_allclose(back.as_matrix(), pose.as_matrix(), atol=1e-12)
        assert back.parent is Frame.W and back.child is Frame.B

    def test_pose_quaternion_positive_w(self, tmp_path):
        pose = Pose.from_xyz_yaw(0.0, 0.0, 0.0, 3.0)
        record = json.loads(write_pose(tmp_path / 'pose.json', pose).read_text())
        assert record['q'][0] >= 0.0

    def test_pose_rejects_short_translation(self, tmp_path):
        path = tmp_path / 'pose.json'
        path.write_text(json.dumps({'t': [0.0, 1.0], 'q': [1.0, 0.0, 0.0, 0.0]}))
        with pytest.raises(ValueError):
            read_pose(path)

    def test_intrinsics_round_trip(self, tmp_path, small_intrinsics):
        assert read_intrinsics(write_intrinsics(tmp_path / 'intr.json', small_intrinsics)) == small_intrinsics

    def test_intrinsics_principal_point_checked(self, tmp_path):
        path = tmp_path / 'intr.json'
        path.write_text(json.dumps({'cx': 700.0}))
        with pytest.raises(ValueError, match='principal point'):
            read_intrinsics(path)

    def test_default_intrinsics(self, tmp_path):
        path = tmp_path / 'intr.json'
        path.write_text('{}')
        assert read_intrinsics(path) == CameraIntrinsics()


class TestJsonl:
    """Test write_jsonl() / read_jsonl()"""

    def test_round_trip(self, tmp_path):
        records = [
            OdomRecord(stamp=0.1 * k, source='kinematic', t=[k, 0.0, 0.8], q=[1.0, 0.0, 0.0, 0.0])
            for k in range(3)
        ]
        assert write_jsonl(tmp_path / 'odom.jsonl', records) == 3
        assert read_jsonl(tmp_path / 'odom.jsonl', OdomRecord) == records

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / 'poses.jsonl'
        line = PoseRecord(t=[0.0, 0.0, 0.0], q=[1.0, 0.0, 0.0, 0.0]).model_dump_json()
        path.write_text(f"{line}\n\n{line}\n")
        assert len(read_jsonl(path, PoseRecord)) == 2

    def test_error_names_line(self, tmp_path):
        path = tmp_path / 'odom.jsonl'
        good = OdomRecord(stamp=0.0, source='lio', t=[0.0, 0.0, 0.0], q=[1.0, 0.0, 0.0, 0.0])
        path.write_text(good.model_dump_json() + '\n' + '{"stamp": "soon"}\n')
        with pytest.raises(ValidationError, match=r'odom\.jsonl:2'):
            read_jsonl(path, OdomRecord)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / 'odom.jsonl'
        path.write_text('{not json\n')
        with pytest.raises(ValidationError, match=':1'):
            read_jsonl(path, OdomRecord)


class TestPolygonRecord:
    """Test the polygons.jsonl line layout."""

    def _segment(self) -> PolygonSegment:
        plane = PlaneModel(np.array([0.0, 0.0, 1.0]), -0.13, 412, 0.0015)
        vertices = np.array([[0.3, -0.5, 0.13], [0.58, -0.5, 0.13], [0.58, 0.5, 0.13]])
        return PolygonSegment(vertices, plane, 1.25, True, Frame.W)

    def test_flat_keys(self):
        line = json.loads(PolygonRecord.from_segment(self._segment()).model_dump_json())
        assert list(line)[:6] == ['stamp', 'vertices', 'normal', 'd', 'inliers', 'rms']
        assert line['normal'] == [0.0, 0.0, 1.0]
        assert line['d'] == pytest.approx(-0.13)
        assert line['inliers'] == 412
        assert line['rms'] == pytest.approx(0.0015)
        assert 'plane' not in line

    def test_reads_minimal_line(self, tmp_path):
        path = tmp_path / 'polygons.jsonl'
        path.write_text(json.dumps({
            'stamp': 0.5, 'vertices': [[0, 0, 0.26], [1, 0, 0.26], [1, 1, 0.26]],
            'normal': [0, 0, 2], 'd': -0.26, 'inliers': 80, 'rms': 0.002,
        }) + '\n')
        segment = read_jsonl(path, PolygonRecord)[0].to_segment()
        np.testing.assert_allclose(segment.plane.normal, [0.0, 0.0, 1.0])
        assert segment.plane.inlier_count == 80
        assert segment.mean_height == pytest.approx(0.26)
        assert not segment.is_tread and segment.frame is Frame.W

    def test_rejects_nested_plane(self, tmp_path):
        path = tmp_path / 'polygons.jsonl'
        path.write_text(json.dumps({
            'stamp': 0.0, 'vertices': [[0, 0, 0], [1, 0, 0], [1, 1, 0]],
            'plane': {'n': [0, 0, 1], 'd': 0.0},
        }) + '\n')
        with pytest.raises(ValidationError, match='polygons.jsonl:1'):
            read_jsonl(path, PolygonRecord)


class TestCsv:
    """Test write_csv() / write_dict_csv()"""

    def test_write_csv(self, tmp_path):
        path = tmp_path / 'drift.csv'
        assert write_csv(path, ['t', 'x'], [(0.0, 1.0), (0.1, 2.0)]) == 2
        assert path.read_text().splitlines() == ['t,x', '0.0,1.0', '0.1,2.0']

    def test_dict_csv(self, tmp_path):
        path = tmp_path / 'steps.csv'
        assert write_dict_csv(path, [{'index': 0, 'side': 'L'}, {'index': 1, 'side': 'R'}]) == 2
        assert path.read_text().splitlines() == ['index,side', '0,L', '1,R']

    def test_dict_csv_empty(self, tmp_path):
        path = tmp_path / 'steps.csv'
        assert write_dict_csv(path, []) == 0
        assert path.read_text() == ''


class TestStorageService:
    """Test StorageService run directories and manifests."""

    STAMP = datetime(2024, 6, 11, 9, 30, 0)

    def test_creates_output_root(self, tmp_path):
        StorageService(str(tmp_path / 'runs' / 'nested'))
        assert (tmp_path / 'runs' / 'nested').is_dir()

    def test_run_dir_name(self, tmp_path):
        storage = StorageService(str(tmp_path))
        path = storage.create_run_dir('noisy', self.STAMP)
        assert path.name == 'noisy-20240611-093000'
        assert path.is_dir()

    def test_run_dir_collision_suffix(self, tmp_path):
        storage = StorageService(str(tmp_path))
        names = [storage.create_run_dir('run', self.STAMP).name for _ in range(3)]
        assert names == ['run-20240611-093000', 'run-20240611-093000-1', 'run-20240611-093000-2']
        assert [p.name for p in storage.list_runs()] == sorted(names)

    def test_file_hash(self, tmp_path):
        path = tmp_path / 'empty.bin'
        path.write_bytes(b'')
        digest = StorageService.compute_file_hash(path)
        assert digest == 'e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855'

    def test_file_hash_unknown_algorithm(self, tmp_path):
        path = tmp_path / 'x.bin'
        path.write_bytes(b'x')
        with pytest.raises(ValueError, match='Unsupported'):
            StorageService.compute_file_hash(path, 'crc32')

    def test_manifest(self, tmp_path):
        storage = StorageService(str(tmp_path))
        run_dir = storage.create_run_dir('run', self.STAMP)
        (run_dir / 'report.json').write_text('{}')
        (run_dir / 'frames').mkdir()
        (run_dir / 'frames' / 'a.bin').write_bytes(b'abc')

        manifest = json.loads(storage.write_manifest(run_dir).read_text())
        files = {entry['file']: entry for entry in manifest['files']}
        assert set(files) == {'report.json', 'frames/a.bin'}
        assert files['frames/a.bin']['bytes'] == 3
        assert files['report.json']['sha256'] == StorageService.compute_file_hash(run_dir / 'report.json')

    def test_manifest_excludes_itself(self, tmp_path):
        storage = StorageService(str(tmp_path))
        run_dir = storage.create_run_dir('run', self.STAMP)
        (run_dir / 'a.txt').write_text('a')
        storage.write_manifest(run_dir)
        manifest = json.loads(storage.write_manifest(run_dir).read_text())
        assert [entry['file'] for entry in manifest['files']] == ['a.txt']
