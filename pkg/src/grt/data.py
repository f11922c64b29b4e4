"""Radar scans: containers, file I/O, sensor merging and a synthetic generator."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

NUM_CLASSES = 6
STATIC, CAR, PEDESTRIAN, PEDESTRIAN_GROUP, BIKE, TRUCK = range(NUM_CLASSES)
SENSOR_IDS = (1, 2, 3, 4)

SCAN_MAGIC = "#grt-scan"
SCAN_VERSION = 1
SCAN_COLUMNS = ("x_cc", "y_cc", "vr_compensated", "rcs", "label_id", "track_id",
                "sensor_id", "timestamp")
LABEL_SPACES = ("classes", "radarscenes")


class DataError(ValueError):
    """Malformed or inconsistent radar data."""


def load_class_map() -> dict[int, tuple[str, int]]:
    text = resources.files("grt").joinpath("resources/class_map.tsv").read_text()
    table = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        raw_id, name, cls = line.split("\t")
        table[int(raw_id)] = (name, int(cls))
    return table


CLASS_MAP = load_class_map()
_BY_NAME = {name: cls for name, cls in CLASS_MAP.values()}


def map_classes(raw_label) -> int:
    """Map a raw RadarScenes label (id or enum name) to a six-class id."""
    if isinstance(raw_label, str):
        key = raw_label.strip().upper()
        if key in _BY_NAME:
            return _BY_NAME[key]
        if not key.lstrip("-").isdigit():
            raise DataError(f"unknown raw label {raw_label!r}")
        raw_label = int(key)
    try:
        return CLASS_MAP[int(raw_label)][1]
    except KeyError:
        raise DataError(f"unknown raw label {raw_label!r}") from None


@dataclass
class RadarDetection:
    x: float
    y: float
    v: float
    rcs: float
    label: int
    track_id: int = -1
    sensor_id: int = 1
    timestamp: int = 0


@dataclass
class RadarPointCloud:
    """Struct-of-arrays radar cloud; ``padding`` marks duplicated filler points."""

    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    rcs: np.ndarray
    label: np.ndarray
    track_id: np.ndarray
    sensor_id: np.ndarray
    timestamp: np.ndarray
    padding: np.ndarray = None

    def __post_init__(self):
        n = len(self.x)
        for f in ("x", "y", "v", "rcs"):
            arr = np.asarray(getattr(self, f), dtype=np.float64).reshape(-1)
            if len(arr) != n:
                raise DataError(f"field {f} has {len(arr)} entries, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"field {f} has non-finite values")
            setattr(self, f, arr)
        for f in ("label", "track_id", "sensor_id", "timestamp"):
            arr = np.asarray(getattr(self, f), dtype=np.int64).reshape(-1)
            if len(arr) != n:
                raise DataError(f"field {f} has {len(arr)} entries, expected {n}")
            setattr(self, f, arr)
        if self.label.size and (self.label.min() < 0 or self.label.max() >= NUM_CLASSES):
            raise DataError(f"labels must lie in [0, {NUM_CLASSES})")
        self.padding = np.zeros(n, dtype=bool) if self.padding is None \
            else np.asarray(self.padding, dtype=bool).reshape(-1)

    def __len__(self):
        return len(self.x)

    @classmethod
    def empty(cls) -> "RadarPointCloud":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z, z, z)

    @classmethod
    def from_detections(cls, detections) -> "RadarPointCloud":
        detections = list(detections)
        if not detections:
            return cls.empty()
        cols = {f.name: [getattr(d, f.name) for d in detections] for f in fields(RadarDetection)}
        return cls(**cols)

    def detections(self) -> list[RadarDetection]:
        return [
            RadarDetection(float(self.x[i]), float(self.y[i]), float(self.v[i]), float(self.rcs[i]),
                           int(self.label[i]), int(self.track_id[i]), int(self.sensor_id[i]),
                           int(self.timestamp[i]))
            for i in range(len(self))
        ]

    @property
    def coords(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=1)

    @property
    def features(self) -> np.ndarray:
        """(N, 4) grid of x, y, Doppler velocity and RCS."""
        return np.stack([self.x, self.y, self.v, self.rcs], axis=1)

    def subset(self, index) -> "RadarPointCloud":
        return RadarPointCloud(**{f.name: getattr(self, f.name)[index] for f in fields(self)})

    def copy(self) -> "RadarPointCloud":
        return RadarPointCloud(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    @staticmethod
    def concat(clouds) -> "RadarPointCloud":
        clouds = list(clouds)
        if not clouds:
            return RadarPointCloud.empty()
        return RadarPointCloud(**{
            f.name: np.concatenate([getattr(c, f.name) for c in clouds])
            for f in fields(RadarPointCloud)
        })

    def padded(self, min_points: int) -> "RadarPointCloud":
        """Cyclically duplicate points up to ``min_points``; copies are flagged."""
        n = len(self)
        if n == 0:
            raise DataError("cannot pad an empty cloud")
        if n >= min_points:
            return self
        extra = np.arange(min_points - n) % n
        out = RadarPointCloud.concat([self, self.subset(extra)])
        out.padding[n:] = True
        return out

    def equals(self, other: "RadarPointCloud") -> bool:
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name))
                   for f in fields(self))


# -- scan files -----------------------------------------------------------

def _split_scans(cloud: RadarPointCloud) -> list[RadarPointCloud]:
    if not len(cloud):
        return []
    key = np.stack([cloud.sensor_id, cloud.timestamp], axis=1)
    breaks = np.flatnonzero(np.any(key[1:] != key[:-1], axis=1)) + 1
    bounds = np.concatenate([[0], breaks, [len(cloud)]])
    return [cloud.subset(slice(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]


def read_scan_file(path) -> RadarPointCloud:
    """Parse a scan file into one cloud, keeping record order."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read scan file {path}: {exc}") from None
    if not lines:
        return RadarPointCloud.empty()
    header = lines[0].split()
    meta = dict(tok.split("=", 1) for tok in header[1:] if "=" in tok)
    if not header or header[0] != SCAN_MAGIC:
        raise DataError(f"{path}:1: missing {SCAN_MAGIC} header")
    if meta.get("version") != str(SCAN_VERSION):
        raise DataError(f"{path}:1: unsupported schema version {meta.get('version')!r}")
    space = meta.get("labels", "classes")
    if space not in LABEL_SPACES:
        raise DataError(f"{path}:1: unknown label space {space!r}")
    if len(lines) < 2 or tuple(lines[1].split("\t")) != SCAN_COLUMNS:
        raise DataError(f"{path}:2: column header must be {' '.join(SCAN_COLUMNS)}")

    tracks: dict[str, int] = {}
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(SCAN_COLUMNS):
            raise DataError(f"{path}:{lineno}: expected {len(SCAN_COLUMNS)} fields, got {len(parts)}")
        rec = dict(zip(SCAN_COLUMNS, parts))
        try:
            x, y, v, rcs = (float(rec[c]) for c in SCAN_COLUMNS[:4])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad float ({exc})") from None
        if not all(math.isfinite(t) for t in (x, y, v, rcs)):
            raise DataError(f"{path}:{lineno}: non-finite value")
        try:
            label = map_classes(rec["label_id"]) if space == "radarscenes" else int(rec["label_id"])
        except (ValueError, DataError):
            raise DataError(f"{path}:{lineno}: field label_id has invalid value {rec['label_id']!r}") from None
        if not 0 <= label < NUM_CLASSES:
            raise DataError(f"{path}:{lineno}: field label_id={label} outside [0, {NUM_CLASSES})")
        track = rec["track_id"].strip()
        if track in ("", "-1"):
            track_id = -1
        elif track.lstrip("-").isdigit():
            track_id = int(track)
        else:
            track_id = tracks.setdefault(track, len(tracks))
        try:
            sensor, stamp = int(rec["sensor_id"]), int(rec["timestamp"])
        except ValueError:
            raise DataError(f"{path}:{lineno}: sensor_id and timestamp must be integers") from None
        if sensor not in SENSOR_IDS:
            raise DataError(f"{path}:{lineno}: field sensor_id={sensor} not in {SENSOR_IDS}")
        rows.append((x, y, v, rcs, label, track_id, sensor, stamp))
    if not rows:
        return RadarPointCloud.empty()
    cols = list(zip(*rows))
    return RadarPointCloud(*[np.array(c) for c in cols])


def load_scans(path) -> list[RadarPointCloud]:
    """Per-sensor scans of a file: consecutive records sharing sensor and timestamp."""
    return _split_scans(read_scan_file(path))


def write_scans(path, scans) -> None:
    """Write scans in file order; floats use shortest round-trip repr."""
    path = Path(path)
    out = [f"{SCAN_MAGIC} version={SCAN_VERSION} labels=classes", "\t".join(SCAN_COLUMNS)]
    for scan in scans:
        for i in range(len(scan)):
            out.append("\t".join([
                repr(float(scan.x[i])), repr(float(scan.y[i])), repr(float(scan.v[i])),
                repr(float(scan.rcs[i])), str(int(scan.label[i])), str(int(scan.track_id[i])),
                str(int(scan.sensor_id[i])), str(int(scan.timestamp[i])),
            ]))
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


# -- sensor poses and merging ---------------------------------------------

@dataclass(frozen=True)
class SensorPose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def apply(self, coords: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return coords @ rot.T + np.array([self.x, self.y])


def read_poses(path) -> dict[int, SensorPose]:
    poses = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 'id x y yaw'")
        try:
            sid = int(parts[0])
            pose = SensorPose(*(float(p) for p in parts[1:]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed pose") from None
        if sid not in SENSOR_IDS:
            raise DataError(f"{path}:{lineno}: unknown sensor id {sid}")
        poses[sid] = pose
    return poses


def write_poses(path, poses: dict[int, SensorPose]) -> None:
    lines = [f"{sid} {p.x!r} {p.y!r} {p.yaw!r}" for sid, p in sorted(poses.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def latest_per_sensor(scans, until: int | None = None, window: int | None = None):
    """Latest scan of every sensor at or before ``until`` within ``window`` microseconds."""
    chosen: dict[int, RadarPointCloud] = {}
    for scan in scans:
        if not len(scan):
            continue
        sid, ts = int(scan.sensor_id[0]), int(scan.timestamp[0])
        if until is not None and ts > until:
            continue
        if until is not None and window is not None and ts < until - window:
            continue
        if sid not in chosen or ts >= int(chosen[sid].timestamp[0]):
            chosen[sid] = scan
    return [chosen[s] for s in sorted(chosen)]


def merge_four_scans(scans, poses: dict[int, SensorPose] | None = None) -> RadarPointCloud:
    """Transform one scan per sensor into the common frame and concatenate.

    Only coordinates change; Doppler, RCS, labels and ids are carried over.
    """
    by_sensor: dict[int, RadarPointCloud] = {}
    for scan in scans:
        ids = set(np.unique(scan.sensor_id).tolist())
        if len(ids) != 1:
            raise DataError(f"a scan must come from exactly one sensor, got ids {sorted(ids)}")
        sid = ids.pop()
        if sid in by_sensor:
            raise DataError(f"sensor {sid} appears in more than one scan")
        by_sensor[sid] = scan
    missing = [s for s in SENSOR_IDS if s not in by_sensor]
    if missing:
        raise DataError(f"missing scans for sensor id(s) {missing}")
    poses = poses or {}
    parts = []
    for sid in SENSOR_IDS:
        scan = by_sensor[sid].copy()
        xy = poses.get(sid, SensorPose()).apply(scan.coords)
        scan.x, scan.y = xy[:, 0].copy(), xy[:, 1].copy()
        parts.append(scan)
    return RadarPointCloud.concat(parts)


# -- synthetic scenes -------------------------------------------------------

def _default(d):
    return field(default_factory=lambda: dict(d))


@dataclass
class SyntheticSceneConfig:
    """Parameters of the synthetic radar scene generator (ranges are inclusive)."""

    n_scenes: int = 10
    extent: float = 30.0
    min_range: float = 2.0
    clutter_count: tuple[int, int] = (170, 210)
    parked_count: tuple[int, int] = (1, 3)
    parked_points: tuple[int, int] = (4, 10)
    static_rcs: tuple[float, float] = (-15.0, 20.0)
    static_velocity_noise: float = 0.15
    velocity_noise: float = 0.2
    object_counts: dict = _default({CAR: (1, 3), PEDESTRIAN: (1, 3), PEDESTRIAN_GROUP: (0, 2),
                                    BIKE: (0, 2), TRUCK: (0, 2)})
    object_points: dict = _default({CAR: (6, 14), PEDESTRIAN: (1, 4), PEDESTRIAN_GROUP: (4, 10),
                                    BIKE: (2, 6), TRUCK: (10, 20)})
    object_size: dict = _default({CAR: (4.5, 1.8), PEDESTRIAN: (0.6, 0.6),
                                  PEDESTRIAN_GROUP: (2.5, 2.5), BIKE: (1.8, 0.7), TRUCK: (10.0, 2.6)})
    object_speed: dict = _default({CAR: (3.0, 15.0), PEDESTRIAN: (0.6, 2.0),
                                   PEDESTRIAN_GROUP: (0.5, 1.8), BIKE: (2.5, 8.0), TRUCK: (3.0, 12.0)})
    object_rcs: dict = _default({CAR: (0.0, 15.0), PEDESTRIAN: (-15.0, -3.0),
                                 PEDESTRIAN_GROUP: (-10.0, 2.0), BIKE: (-10.0, 3.0), TRUCK: (8.0, 25.0)})

    def __post_init__(self):
        for name in ("object_counts", "object_points", "object_size", "object_speed", "object_rcs"):
            table = {int(k): tuple(v) for k, v in getattr(self, name).items()}
            setattr(self, name, table)
        self.clutter_count = tuple(self.clutter_count)
        self.parked_count = tuple(self.parked_count)
        self.parked_points = tuple(self.parked_points)
        self.static_rcs = tuple(self.static_rcs)
        self.validate()

    def validate(self):
        pairs = {"clutter_count": self.clutter_count, "parked_count": self.parked_count,
                 "parked_points": self.parked_points, "static_rcs": self.static_rcs}
        for table in ("object_counts", "object_points", "object_speed", "object_rcs"):
            for cls, rng in getattr(self, table).items():
                pairs[f"{table}[{cls}]"] = rng
        for name, (lo, hi) in pairs.items():
            if lo > hi:
                raise ValueError(f"{name}: range ({lo}, {hi}) is not ordered")
        for name in ("clutter_count", "parked_count", "parked_points"):
            if pairs[name][0] < 0:
                raise ValueError(f"{name} must be non-negative")
        for cls, (lo, _) in self.object_points.items():
            if lo < 1:
                raise ValueError(f"object_points[{cls}] must be at least 1")
        if self.n_scenes < 1 or self.extent <= self.min_range or self.min_range < 0:
            raise ValueError("need n_scenes >= 1 and extent > min_range >= 0")
        if min(self.static_velocity_noise, self.velocity_noise) < 0:
            raise ValueError("noise levels must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("object_counts", "object_points", "object_size", "object_speed", "object_rcs"):
            d[name] = {str(k): list(v) for k, v in d[name].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)


def _box_points(rng, n, center, heading, size):
    length, width = size
    local = rng.uniform(-0.5, 0.5, (n, 2)) * np.array([length, width])
    c, s = math.cos(heading), math.sin(heading)
    return local @ np.array([[c, s], [-s, c]]) + center


def _place(rng, cfg, taken, radius):
    for _ in range(50):
        center = rng.uniform(-cfg.extent, cfg.extent, 2)
        if np.linalg.norm(center) < cfg.min_range + radius:
            continue
        if all(np.linalg.norm(center - c) > radius + r + 1.0 for c, r in taken):
            taken.append((center, radius))
            return center
    return None


def _radial(coords, velocity):
    los = coords / np.maximum(np.linalg.norm(coords, axis=1, keepdims=True), 1e-9)
    return los @ velocity


def generate_scene(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> RadarPointCloud:
    parts = []
    taken: list = []
    track = 0

    n = int(rng.integers(cfg.clutter_count[0], cfg.clutter_count[1] + 1))
    r = np.sqrt(rng.uniform(cfg.min_range ** 2, cfg.extent ** 2, n))
    phi = rng.uniform(0, 2 * np.pi, n)
    clutter = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    parts.append((clutter, rng.normal(0, cfg.static_velocity_noise, n),
                  rng.uniform(*cfg.static_rcs, n), STATIC, -1))

    # parked vehicles: car-shaped static clusters
    for _ in range(int(rng.integers(cfg.parked_count[0], cfg.parked_count[1] + 1))):
        size = cfg.object_size.get(CAR, (4.5, 1.8))
        center = _place(rng, cfg, taken, 0.5 * math.hypot(*size))
        if center is None:
            continue
        k = int(rng.integers(cfg.parked_points[0], cfg.parked_points[1] + 1))
        pts = _box_points(rng, k, center, rng.uniform(0, 2 * np.pi), size)
        parts.append((pts, rng.normal(0, cfg.static_velocity_noise, k),
                      rng.uniform(*cfg.object_rcs.get(CAR, cfg.static_rcs), k), STATIC, -1))

    for cls in sorted(cfg.object_counts):
        lo, hi = cfg.object_counts[cls]
        for _ in range(int(rng.integers(lo, hi + 1))):
            size = cfg.object_size[cls]
            center = _place(rng, cfg, taken, 0.5 * math.hypot(*size))
            if center is None:
                continue
            heading = rng.uniform(0, 2 * np.pi)
            speed = rng.uniform(*cfg.object_speed[cls])
            velocity = speed * np.array([math.cos(heading), math.sin(heading)])
            k = int(rng.integers(cfg.object_points[cls][0], cfg.object_points[cls][1] + 1))
            pts = _box_points(rng, k, center, heading, size)
            v = _radial(pts, velocity) + rng.normal(0, cfg.velocity_noise, k)
            parts.append((pts, v, rng.uniform(*cfg.object_rcs[cls], k), cls, track))
            track += 1

    coords = np.concatenate([p[0] for p in parts])
    count = len(coords)
    return RadarPointCloud(
        x=coords[:, 0], y=coords[:, 1],
        v=np.concatenate([p[1] for p in parts]),
        rcs=np.concatenate([p[2] for p in parts]),
        label=np.concatenate([np.full(len(p[0]), p[3]) for p in parts]),
        track_id=np.concatenate([np.full(len(p[0]), p[4]) for p in parts]),
        sensor_id=np.ones(count), timestamp=np.zeros(count),
    )


def synth_generate(cfg: SyntheticSceneConfig, seed: int = 0) -> list[RadarPointCloud]:
    """``cfg.n_scenes`` scenes; scene i only depends on ``(seed, i)``."""
    cfg.validate()
    return [generate_scene(cfg, np.random.default_rng([seed, i])) for i in range(cfg.n_scenes)]


def label_balance(clouds) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for c in clouds:
        counts += np.bincount(c.label[~c.padding], minlength=NUM_CLASSES)
    return counts


# -- datasets on disk -------------------------------------------------------

MANIFEST = "manifest.json"


def write_dataset(out_dir, clouds, config_echo: dict, prefix: str = "scene") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, cloud in enumerate(clouds):
        name = f"{prefix}_{i:05d}.tsv"
        write_scans(out_dir / name, [cloud])
        files.append(name)
    manifest = {"config": config_echo, "scenes": files,
                "label_balance": label_balance(clouds).tolist()}
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> list[RadarPointCloud]:
    """Scenes listed in a manifest (file or its directory), or every scan file of a directory."""
    path = Path(path)
    if path.is_dir() and (path / MANIFEST).exists():
        path = path / MANIFEST
    if path.is_file() and path.suffix == ".json":
        manifest = json.loads(path.read_text())
        files = [path.parent / f for f in manifest["scenes"]]
    elif path.is_dir():
        files = sorted(path.glob("*.tsv"))
    elif path.is_file():
        files = [path]
    else:
        raise DataError(f"no dataset at {path}")
    clouds = [read_scan_file(f) for f in files]
    empty = [str(f) for f, c in zip(files, clouds) if not len(c)]
    if empty:
        raise DataError(f"empty scene file(s): {empty}")
    return clouds
