"""Synthetic shapes scenes, classifier patches and netpbm image I/O.

Scene generation uses integer arithmetic only (SplitMix64 stream, integer
rasterisation, 8-bit intensities), so a seed reproduces the same bytes on
every platform.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


class ConfigError(ValueError):
    pass


class NetpbmError(ValueError):
    pass


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """SplitMix64 generator; ``block`` draws many values at once."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def block(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        out = _mix(np.uint64(self.state) + steps)
        self.state = (self.state + n * _GAMMA) & _MASK
        return out

    def next(self) -> int:
        return int(self.block(1)[0])

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi]`` inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next() % (hi - lo + 1)

    def randints(self, lo: int, hi: int, n: int) -> np.ndarray:
        span = np.uint64(hi - lo + 1)
        return (self.block(n) % span).astype(np.int64) + lo


# ---------------------------------------------------------------- scenes


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    channels: int = 3
    class_names: tuple[str, ...] = ("circle", "square", "triangle")
    min_objects: int = 1
    max_objects: int = 3
    min_object_size: int = 10
    max_object_size: int = 22
    noise: int = 16
    object_noise: int = 0
    gap: int = 2

    def validate(self) -> None:
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")
        if not 3 <= self.min_object_size <= self.max_object_size <= self.size:
            raise ConfigError("object sizes must satisfy 3 <= min <= max <= image size")
        unknown = set(self.class_names) - set(_RENDERERS)
        if unknown or not self.class_names:
            raise ConfigError(f"unknown shape classes {sorted(unknown)}")
        side = self.max_object_size + self.gap
        if self.max_objects * side * side > self.size * self.size // 2:
            raise ConfigError(
                f"{self.max_objects} objects of size {self.max_object_size} cannot be placed "
                f"reliably in a {self.size}x{self.size} image")

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SceneConfig":
        obj = dict(obj)
        obj["class_names"] = tuple(obj["class_names"])
        return cls(**obj)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


Box = tuple[float, float, float, float]


@dataclass
class Scene:
    """An 8-bit-valued image ``[c, h, w]`` in [0, 1] plus ``(class_id, box)`` annotations.

    Boxes are ``(x_min, y_min, x_max, y_max)`` in pixel-edge coordinates:
    pixel column ``i`` spans ``[i, i + 1)``.
    """

    image: np.ndarray
    annotations: list[tuple[int, Box]]
    seed: int

    @property
    def boxes(self) -> np.ndarray:
        return np.array([b for _, b in self.annotations], dtype=np.float64).reshape(-1, 4)

    @property
    def classes(self) -> np.ndarray:
        return np.array([c for c, _ in self.annotations], dtype=np.intp)


def _circle(rng: SplitMix64, size: int) -> np.ndarray:
    r = size // 2
    d = 2 * r + 1
    yy, xx = np.mgrid[0:d, 0:d]
    return (xx - r) ** 2 + (yy - r) ** 2 <= r * r + r


def _square(rng: SplitMix64, size: int) -> np.ndarray:
    return np.ones((size, size), dtype=bool)


def _triangle(rng: SplitMix64, size: int) -> np.ndarray:
    base = size | 1
    height = max(3, base - rng.randint(0, base // 4))
    t, x = np.mgrid[0:height, 0:base]
    mask = np.abs(2 * x + 1 - base) * height <= base * (t + 1)
    return mask[::-1] if rng.randint(0, 1) else mask


_RENDERERS = {"circle": _circle, "square": _square, "triangle": _triangle}


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Render one scene; the same ``(seed, config)`` always gives the same bytes."""
    config.validate()
    rng = SplitMix64(seed)
    n, c = config.size, config.channels
    base = rng.randints(10, 70, c)
    noise = rng.randints(-config.noise, config.noise, c * n * n).reshape(c, n, n)
    cells = -(-n // 8)
    blocks = rng.randints(-12, 12, cells * cells).reshape(cells, cells)
    texture = np.kron(blocks, np.ones((8, 8), dtype=np.int64))[:n, :n]
    img = np.clip(base[:, None, None] + noise + texture[None], 0, 255)

    count = rng.randint(config.min_objects, config.max_objects)
    annotations: list[tuple[int, Box]] = []
    occupied: list[tuple[int, int, int, int]] = []
    for _ in range(count):
        for _attempt in range(200):
            cls_id = rng.randint(0, len(config.class_names) - 1)
            size = rng.randint(config.min_object_size, config.max_object_size)
            shape = _RENDERERS[config.class_names[cls_id]](rng, size)
            h, w = shape.shape
            if h > n or w > n:
                continue
            y0, x0 = rng.randint(0, n - h), rng.randint(0, n - w)
            g = config.gap
            if any(x0 < bx1 + g and bx0 < x0 + w + g and y0 < by1 + g and by0 < y0 + h + g
                   for bx0, by0, bx1, by1 in occupied):
                continue
            colour = rng.randints(140, 255, c)
            grain = rng.randints(-config.object_noise, config.object_noise, h * w).reshape(h, w)
            region = img[:, y0:y0 + h, x0:x0 + w]
            region[:, shape] = np.clip(colour[:, None] + grain[shape][None], 0, 255)
            ys, xs = np.nonzero(shape)
            box = (x0 + int(xs.min()), y0 + int(ys.min()), x0 + int(xs.max()) + 1, y0 + int(ys.max()) + 1)
            occupied.append(box)
            annotations.append((cls_id, tuple(float(v) for v in box)))
            break
        else:
            raise ConfigError(f"seed {seed}: could not place object {len(annotations) + 1} of {count}")
    return Scene(img.astype(np.float64) / 255.0, annotations, int(seed))


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetManifest:
    config: SceneConfig
    entries: list[tuple[int, str]] = field(default_factory=list)

    @property
    def class_names(self) -> list[str]:
        return list(self.config.class_names)

    def seeds(self, split: str) -> list[int]:
        return [s for s, sp in self.entries if sp == split]

    def stem(self, seed: int) -> str:
        split = dict(self.entries)[seed]
        return f"{split}_{seed:016x}"

    def to_json(self) -> dict:
        return {"config_hash": self.config.digest(), "config": self.config.to_json(),
                "class_names": self.class_names,
                "entries": [{"seed": s, "split": sp} for s, sp in self.entries]}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        config = SceneConfig.from_json(obj["config"])
        if config.digest() != obj["config_hash"]:
            raise ConfigError("manifest config hash does not match its config")
        return cls(config, [(int(e["seed"]), e["split"]) for e in obj["entries"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def make_manifest(seed: int, n_train: int, n_test: int,
                  config: SceneConfig = SceneConfig()) -> DatasetManifest:
    """Draw distinct scene seeds for the train and test splits."""
    config.validate()
    if n_train < 1 or n_test < 0:
        raise ConfigError("need at least one training scene")
    rng = SplitMix64(seed)
    seen: set[int] = set()
    entries = []
    for split, count in (("train", n_train), ("test", n_test)):
        while sum(1 for _, sp in entries if sp == split) < count:
            s = rng.next() >> 1
            if s not in seen:
                seen.add(s)
                entries.append((s, split))
    return DatasetManifest(config, entries)


def load_scenes(manifest: DatasetManifest, split: str) -> list[Scene]:
    return [generate_scene(s, manifest.config) for s in manifest.seeds(split)]


def write_annotations(path, manifest: DatasetManifest, scenes: Sequence[Scene]) -> None:
    names = manifest.class_names
    with open(path, "w") as fh:
        for scene in scenes:
            objs = [{"class": names[c], "box": list(b)} for c, b in scene.annotations]
            fh.write(json.dumps({"image": manifest.stem(scene.seed), "objects": objs}) + "\n")


def read_annotations(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- patches


def _box_overlap(a, b) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0.0) * max(h, 0.0)


def _resample(image: np.ndarray, x0: int, y0: int, width: int, height: int, out: int) -> np.ndarray:
    # nearest neighbour at pixel centres
    ix = (2 * np.arange(out) + 1) * width // (2 * out)
    iy = (2 * np.arange(out) + 1) * height // (2 * out)
    return image[:, y0 + iy][:, :, x0 + ix]


@dataclass
class PatchSet:
    images: np.ndarray
    labels: np.ndarray
    windows: list[tuple[int, tuple[int, int, int, int]]]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)


def classification_patches(scenes: Sequence[Scene], class_names: Sequence[str],
                           patch_size: int = 16, context: float = 0.96,
                           backgrounds_per_scene: int = 1, seed: int = 0) -> PatchSet:
    """Crops around each object plus object-free background crops.

    An object crop covers at most ``1 + context`` times the box area. The
    extra area is split at random between the two axes, so some crops add
    context left and right and others above and below. Sizes are rounded
    down, the crop is centred on the box, shifted inside the image and
    resampled, nearest neighbour, to ``patch_size`` squared. With
    ``context`` at most 1 the object box fills at least half of every crop.
    Label 0 is background; object class ``k`` becomes label ``k + 1``.
    ``windows`` records ``(scene index, (x0, y0, x1, y1))`` for every crop.
    """
    if not 0.0 <= context <= 1.0:
        raise ConfigError("context must lie in [0, 1] so the object fills half the crop")
    rng = SplitMix64(seed)
    images, labels, windows = [], [], []
    for si, scene in enumerate(scenes):
        _, h, w = scene.image.shape
        sides = []
        for cls_id, box in scene.annotations:
            bw, bh = int(box[2] - box[0]), int(box[3] - box[1])
            mx = context * rng.randint(0, 1000) / 1000
            my = (1 + context) / (1 + mx) - 1
            if rng.randint(0, 1):
                mx, my = my, mx
            ww = min(max(bw, int(np.floor(bw * (1 + mx)))), w)
            wh = min(max(bh, int(np.floor(bh * (1 + my)))), h)
            x0 = int(min(max(int(box[0]) - (ww - bw) // 2, 0), w - ww))
            y0 = int(min(max(int(box[1]) - (wh - bh) // 2, 0), h - wh))
            images.append(_resample(scene.image, x0, y0, ww, wh, patch_size))
            labels.append(cls_id + 1)
            windows.append((si, (x0, y0, x0 + ww, y0 + wh)))
            sides.append(max(ww, wh))
        lo = min(sides, default=patch_size)
        hi = max(sides, default=2 * patch_size)
        for _ in range(backgrounds_per_scene):
            for _attempt in range(50):
                side = min(rng.randint(lo, hi), h, w)
                x0, y0 = rng.randint(0, w - side), rng.randint(0, h - side)
                win = (x0, y0, x0 + side, y0 + side)
                if all(_box_overlap(win, b) == 0.0 for _, b in scene.annotations):
                    images.append(_resample(scene.image, x0, y0, side, side, patch_size))
                    labels.append(0)
                    windows.append((si, win))
                    break
    c = scenes[0].image.shape[0] if scenes else 3
    arr = np.stack(images) if images else np.zeros((0, c, patch_size, patch_size))
    return PatchSet(arr, np.array(labels, dtype=np.intp), windows, ["background", *class_names])


# ---------------------------------------------------------------- netpbm


def to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _write_netpbm(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + arr.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write a ``[3, h, w]`` image (float in [0, 1] or uint8) as binary P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise NetpbmError(f"PPM needs a [3, h, w] image, got {image.shape}")
    _write_netpbm(path, b"P6", np.ascontiguousarray(to_uint8(image).transpose(1, 2, 0)))


def write_pgm(path, image: np.ndarray) -> None:
    """Write an ``[h, w]`` (or ``[1, h, w]``) image as binary P5."""
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise NetpbmError(f"PGM needs an [h, w] image, got {image.shape}")
    _write_netpbm(path, b"P5", np.ascontiguousarray(to_uint8(image)))


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _parse_netpbm(raw: bytes, magic: bytes, channels: int) -> np.ndarray:
    pos, fields = 0, []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise NetpbmError("header ended early")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != magic:
        raise NetpbmError(f"expected {magic!r}, found {fields[0]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise NetpbmError(f"non-numeric header field in {fields}") from exc
    if w < 1 or h < 1 or maxval != 255:
        raise NetpbmError(f"unsupported geometry {w}x{h} maxval {maxval}")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise NetpbmError("missing whitespace after header")
    pos += 1
    need = w * h * channels
    if len(raw) - pos < need:
        raise NetpbmError(f"payload truncated: {len(raw) - pos} of {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, channels)


def read_ppm(path) -> np.ndarray:
    """Read binary P6 into a uint8 ``[3, h, w]`` array."""
    return _parse_netpbm(Path(path).read_bytes(), b"P6", 3).transpose(2, 0, 1).copy()


def read_pgm(path) -> np.ndarray:
    """Read binary P5 into a uint8 ``[h, w]`` array."""
    return _parse_netpbm(Path(path).read_bytes(), b"P5", 1)[:, :, 0].copy()


def to_rgb(image: np.ndarray) -> np.ndarray:
    """Repeat a one-channel ``[1, h, w]`` image to three channels."""
    image = np.asarray(image)
    return np.repeat(image, 3, axis=0) if image.shape[0] == 1 else image


def draw_boxes(image: np.ndarray, boxes: Sequence[Sequence[float]],
               colour: Sequence[float] = (1.0, 0.2, 0.2)) -> np.ndarray:
    """Copy of a ``[3, h, w]`` float image with one-pixel box outlines drawn in."""
    out = np.array(to_rgb(image), dtype=np.float64)
    _, h, w = out.shape
    col = np.asarray(colour, dtype=np.float64)[:, None]
    for box in boxes:
        x0, y0 = int(np.clip(np.floor(box[0]), 0, w - 1)), int(np.clip(np.floor(box[1]), 0, h - 1))
        x1, y1 = int(np.clip(np.ceil(box[2]) - 1, 0, w - 1)), int(np.clip(np.ceil(box[3]) - 1, 0, h - 1))
        out[:, y0, x0:x1 + 1] = col
        out[:, y1, x0:x1 + 1] = col
        out[:, y0:y1 + 1, x0] = col
        out[:, y0:y1 + 1, x1] = col
    return out
