import json
import math
import os
import threading
from collections import OrderedDict

import numpy as np
from PIL import Image

import worldsim
from Geo_Math import ShapeMismatchError


MANIFEST_NAME = "manifest.json"
FRAMES_DIR = "frames"
DEFAULT_MAX_GAP = 10
CACHE_FRAMES = 64

ORBIT_RADIUS = 1.2
CATEGORY_NAMES = {1: "one_box", 2: "two_boxes", 3: "three_boxes"}


class DatasetError(RuntimeError):
    """Base class for dataset problems"""


class MissingRootError(DatasetError):
    pass


class MalformedManifestError(DatasetError):
    def __init__(self, sequence_id, message):
        super().__init__(f"sequence {sequence_id}: {message}")
        self.sequence_id = sequence_id


class EmptyDatasetError(DatasetError):
    pass


class DatasetWriteError(DatasetError):
    pass


def load_frame(path, size=None):
    """
    8-bit RGB PNG -> H x W x 3 float32 image scaled by 1/255

    Args:
        path: PNG path
        size: Optional square side; frames of any other size are resampled
            bilinearly to size x size
    """
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        data = np.asarray(img, dtype=np.float32)
    return data / 255.0


def save_frame(path, image):
    """Write an H x W x 3 image in [0, 1] as 8-bit RGB PNG"""
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


class SequenceManifest:
    """One orbit video: ordered frame paths of a single sequence"""

    def __init__(self, sequence_id, category, frame_paths, cache_frames=CACHE_FRAMES):
        self.sequence_id = sequence_id
        self.category = category
        self.frame_paths = list(frame_paths)
        self.cache_frames = cache_frames
        self._cache = OrderedDict()
        self._lock = threading.Lock()

    @property
    def frame_count(self):
        return len(self.frame_paths)

    def load_frame(self, index, size=None):
        """Decoded frame, kept in a small LRU cache keyed by (index, size)"""
        key = (index, size)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        frame = load_frame(self.frame_paths[index], size)
        with self._lock:
            self._cache[key] = frame
            self._cache.move_to_end(key)
            while len(self._cache) > self.cache_frames:
                self._cache.popitem(last=False)
        return frame

    def to_json(self, root_dir):
        return {
            "sequence_id": self.sequence_id,
            "category": self.category,
            "frame_count": self.frame_count,
            "frames": [os.path.relpath(p, root_dir).replace(os.sep, "/") for p in self.frame_paths],
        }

    def __repr__(self):
        return f"SequenceManifest({self.category}/{self.sequence_id}, {self.frame_count} frames)"


class ViewPair:
    def __init__(self, i_src, i_tgt, sequence_id, frame_gap, src_index=None, tgt_index=None):
        if frame_gap < 1:
            raise ValueError(f"frame_gap must be >= 1, got {frame_gap}")
        self.i_src = i_src
        self.i_tgt = i_tgt
        self.sequence_id = sequence_id
        self.frame_gap = frame_gap
        self.src_index = src_index
        self.tgt_index = tgt_index


def _read_manifest(seq_dir, sequence_id, category):
    path = os.path.join(seq_dir, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise MalformedManifestError(sequence_id, f"missing {MANIFEST_NAME}")
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedManifestError(sequence_id, f"unreadable manifest: {e}")

    for field in ("sequence_id", "category", "frame_count", "frames"):
        if field not in data:
            raise MalformedManifestError(sequence_id, f"manifest lacks '{field}'")
    frames = data["frames"]
    if not isinstance(frames, list) or data["frame_count"] != len(frames):
        raise MalformedManifestError(sequence_id, "frame_count does not match the frame list")
    if len(frames) < 2:
        raise MalformedManifestError(sequence_id, "a sequence needs at least 2 frames")

    paths = [os.path.join(seq_dir, rel) for rel in frames]
    for p in paths:
        if not os.path.isfile(p):
            raise MalformedManifestError(sequence_id, f"missing frame {os.path.relpath(p, seq_dir)}")
    return SequenceManifest(data["sequence_id"], data["category"], paths)


def scan_dataset(root_path):
    """
    Find every sequence under root/<category>/<sequence_id>/manifest.json

    Args:
        root_path: Dataset root

    Returns:
        List of SequenceManifest sorted by (category, sequence_id)
    """
    if not root_path or not os.path.isdir(root_path):
        raise MissingRootError(f"dataset root {root_path!r} does not exist")

    manifests = []
    for category in sorted(os.listdir(root_path)):
        cat_dir = os.path.join(root_path, category)
        if not os.path.isdir(cat_dir):
            continue
        for sequence_id in sorted(os.listdir(cat_dir)):
            seq_dir = os.path.join(cat_dir, sequence_id)
            if os.path.isdir(seq_dir):
                manifests.append(_read_manifest(seq_dir, sequence_id, category))

    manifests.sort(key=lambda m: (m.category, m.sequence_id))
    return manifests


def sample_pair(manifests, rng, max_gap=DEFAULT_MAX_GAP, image_size=None):
    """
    Draw a (source, target) view pair from one sequence

    Args:
        manifests: List of SequenceManifest
        rng: numpy Generator
        max_gap: Largest frame distance between source and target (no wrapping)
        image_size: Optional square side frames are resampled to

    Returns:
        ViewPair
    """
    if max_gap < 1:
        raise ValueError(f"max_gap must be >= 1, got {max_gap}")
    eligible = [m for m in manifests if m.frame_count >= 2]
    if not eligible:
        raise EmptyDatasetError("no sequence with at least 2 frames")

    manifest = eligible[int(rng.integers(len(eligible)))]
    n_frames = manifest.frame_count
    src = int(rng.integers(n_frames))
    candidates = [src + g for g in range(1, max_gap + 1) if src + g < n_frames]
    candidates += [src - g for g in range(1, max_gap + 1) if src - g >= 0]
    tgt = candidates[int(rng.integers(len(candidates)))]
    return ViewPair(manifest.load_frame(src, image_size), manifest.load_frame(tgt, image_size),
                    manifest.sequence_id, abs(tgt - src), src, tgt)


def sample_pair_batch(manifests, rng, batch_size, max_gap=DEFAULT_MAX_GAP, image_size=None):
    """
    Stacked (N, H, W, 3) source and target arrays

    Without image_size every sampled frame must already share one resolution.
    """
    pairs = [sample_pair(manifests, rng, max_gap, image_size) for _ in range(batch_size)]
    shapes = {p.i_src.shape for p in pairs} | {p.i_tgt.shape for p in pairs}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"frames of different sizes {sorted(shapes)}; pass image_size to resample")
    return np.stack([p.i_src for p in pairs]), np.stack([p.i_tgt for p in pairs])


def random_scene(rng):
    """1-3 randomly colored, sized and posed boxes on the table"""
    n_boxes = int(rng.integers(1, 4))
    scene = [worldsim.Table()]
    for _ in range(n_boxes):
        half = rng.uniform(0.03, 0.09, size=3)
        half[2] = rng.uniform(0.03, 0.12)
        center = [rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), half[2]]
        color = rng.uniform(0.1, 0.95, size=3)
        scene.append(worldsim.Box(center, half, color, yaw=rng.uniform(0.0, math.pi)))
    return scene, n_boxes


def generate_orbit_dataset(n_scenes, views, image_size, seed, out_path, arc_degrees=120.0):
    """
    Render orbit videos around random box scenes in the dataset layout

    Args:
        n_scenes: Number of sequences (>= 1)
        views: Frames per orbit (>= 2)
        image_size: Square resolution
        seed: RNG seed; identical seeds give identical bytes
        out_path: Dataset root to write
        arc_degrees: Azimuth span covered by one orbit

    Returns:
        List of SequenceManifest sorted by (category, sequence_id)
    """
    if n_scenes < 1:
        raise ValueError(f"scene count must be >= 1, got {n_scenes}")
    if views < 2:
        raise ValueError(f"views per orbit must be >= 2 to form pairs, got {views}")
    if image_size < 1:
        raise ValueError(f"image size must be >= 1, got {image_size}")

    rng = np.random.default_rng(seed)
    manifests = []
    try:
        os.makedirs(out_path, exist_ok=True)
        for scene_index in range(n_scenes):
            scene, n_boxes = random_scene(rng)
            elevation = rng.uniform(15.0, 40.0)
            start = rng.uniform(0.0, 360.0)
            category = CATEGORY_NAMES[n_boxes]
            sequence_id = f"seq{scene_index:04d}"
            seq_dir = os.path.join(out_path, category, sequence_id)
            frame_dir = os.path.join(seq_dir, FRAMES_DIR)
            os.makedirs(frame_dir, exist_ok=True)

            paths = []
            for k in range(views):
                azimuth = start + arc_degrees * k / (views - 1)
                cam = worldsim.CameraSpec(azimuth, elevation, ORBIT_RADIUS, look_at=(0.0, 0.0, 0.05))
                path = os.path.join(frame_dir, f"{k:05d}.png")
                save_frame(path, worldsim.render(scene, cam, image_size))
                paths.append(path)

            manifest = SequenceManifest(sequence_id, category, paths)
            with open(os.path.join(seq_dir, MANIFEST_NAME), "w") as f:
                json.dump(manifest.to_json(seq_dir), f, indent=2, sort_keys=True)
            manifests.append(manifest)
    except OSError as e:
        raise DatasetWriteError(f"cannot write dataset to {out_path}: {e}")

    manifests.sort(key=lambda m: (m.category, m.sequence_id))
    return manifests


def dataset_size_bytes(root_path):
    total = 0
    for dirpath, _, filenames in os.walk(root_path):
        for name in filenames:
            total += os.path.getsize(os.path.join(dirpath, name))
    return total
