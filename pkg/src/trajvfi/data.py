"""Synthetic sprite triplets with exact flow, and the on-disk triplet layout."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import InvalidArgument, InvalidData, NotFound
from .flow import read_flo, write_flo

FRAME_NAMES = ("im1.png", "im2.png", "im3.png")
DIFFICULTY_SPEEDS = {"static": (0.0, 0.0), "easy": (0.0, 2.0), "medium": (2.0, 6.0), "hard": (6.0, 12.0), "extreme": (12.0, 24.0)}


@dataclass
class Sprite:
    shape: str  # "disk" or "rect"
    radius: float
    position: tuple  # centre (x, y) at time 0
    velocity: tuple  # (vx, vy) in px per frame interval
    texture_seed: int = 0


@dataclass
class SceneSpec:
    size: tuple = (64, 64)  # (H, W)
    background_seed: int = 0
    sprites: list = field(default_factory=list)
    t: float = 0.5
    seed: int = 0


@dataclass
class TripletSample:
    """Frames are ``(H, W, 3)`` float32 arrays in [0, 1]; flows are ``(H, W, 2)``."""

    i0: np.ndarray
    it: np.ndarray
    i1: np.ndarray
    t: float = 0.5
    flows: dict | None = None  # keys: o01, o10, o_t0, o_t1
    valid: dict | None = None  # keys: t0, t1 -> bool (H, W) masks on the time-t grid
    provenance: str = "synthetic"
    sample_id: str = ""

    @property
    def size(self):
        return self.i0.shape[:2]


def _texture(rng, shape, sigma=2.0, contrast=0.35):
    base = rng.uniform(0.25, 0.75, size=3)
    noise = ndimage.gaussian_filter(rng.standard_normal((shape[0], shape[1], 3)), (sigma, sigma, 0))
    noise /= noise.std() + 1e-8
    return np.clip(base + contrast * 0.5 * noise, 0.02, 0.98)


def _sprite_alpha(sprite: Sprite, lx, ly):
    r = sprite.radius
    if sprite.shape == "disk":
        return np.clip(r - np.hypot(lx, ly) + 0.5, 0.0, 1.0)
    if sprite.shape == "rect":
        return np.clip(r - np.abs(lx) + 0.5, 0.0, 1.0) * np.clip(r - np.abs(ly) + 0.5, 0.0, 1.0)
    raise InvalidArgument(f"unknown sprite shape {sprite.shape!r}")


def _check_in_canvas(sprite: Sprite, size):
    h, w = size
    for tau in (0.0, 1.0):
        cx = sprite.position[0] + tau * sprite.velocity[0]
        cy = sprite.position[1] + tau * sprite.velocity[1]
        r = sprite.radius + 1
        if cx - r < 0 or cy - r < 0 or cx + r > w - 1 or cy + r > h - 1:
            raise InvalidArgument(f"sprite leaves the {h}x{w} canvas at time {tau}")


def _render_layers(spec: SceneSpec, tau: float, textures, background):
    """Composite frame at time ``tau`` plus per-sprite alpha maps."""
    h, w = spec.size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    frame = background.copy()
    alphas = []
    for sprite, tex in zip(spec.sprites, textures):
        cx = sprite.position[0] + tau * sprite.velocity[0]
        cy = sprite.position[1] + tau * sprite.velocity[1]
        lx, ly = xs - cx, ys - cy
        alpha = _sprite_alpha(sprite, lx, ly)
        pad = (tex.shape[0] - 1) / 2.0
        coords = [ly + pad, lx + pad]
        colour = np.stack(
            [ndimage.map_coordinates(tex[..., c], coords, order=1, mode="nearest") for c in range(3)], -1
        )
        frame = frame * (1 - alpha[..., None]) + colour * alpha[..., None]
        alphas.append(alpha)
    return frame.astype(np.float32), alphas


def _ownership(alphas, size):
    """Index of the fully-opaque unoccluded sprite per pixel, -1 for clean background, -2 for mixed pixels."""
    owner = np.full(size, -1, dtype=np.int64)
    for k, a in enumerate(alphas):
        owner[a > 0] = -2
        owner[a >= 1.0] = k
    return owner


def render_triplet(spec: SceneSpec) -> TripletSample:
    """Render frames at times 0, t, 1 with exact piecewise-constant flows.

    Flows on a sprite's support are its (scaled) velocity, zero elsewhere.
    ``valid`` masks mark pixels of the time-t frame whose backward flow is
    well defined: clean background or sprite interior at both ends, eroded by
    one pixel to keep bilinear footprints inside.
    """
    h, w = spec.size
    t = float(spec.t)
    if not 0.0 < t < 1.0:
        raise InvalidArgument(f"t must lie in (0, 1), got {t}")
    for sprite in spec.sprites:
        _check_in_canvas(sprite, spec.size)
    rng = np.random.default_rng(spec.background_seed)
    background = _texture(rng, (h, w)).astype(np.float64)
    textures = []
    for sprite in spec.sprites:
        n = int(np.ceil(sprite.radius)) * 2 + 7
        textures.append(_texture(np.random.default_rng(sprite.texture_seed), (n, n)))

    frames, owners = {}, {}
    for tau in (0.0, t, 1.0):
        frames[tau], alphas = _render_layers(spec, tau, textures, background)
        owners[tau] = _ownership(alphas, (h, w))

    flows = {k: np.zeros((h, w, 2), np.float32) for k in ("o01", "o10", "o_t0", "o_t1")}
    for k, sprite in enumerate(spec.sprites):
        v = np.asarray(sprite.velocity, np.float32)
        flows["o01"][owners[0.0] == k] = v
        flows["o10"][owners[1.0] == k] = -v
        on_t = owners[t] == k
        flows["o_t0"][on_t] = -t * v
        flows["o_t1"][on_t] = (1 - t) * v

    valid = {}
    for key, tau in (("t0", 0.0), ("t1", 1.0)):
        ok = owners[t] == -1
        ok &= owners[tau] == -1
        for k, sprite in enumerate(spec.sprites):
            on_t = owners[t] == k
            shift = np.asarray(sprite.velocity) * (tau - t)
            # sprite interior pixels stay owned by the sprite at the source time
            src = ndimage.shift((owners[tau] == k).astype(float), (-shift[1], -shift[0]), order=0, mode="constant")
            ok |= on_t & (src > 0.5)
        valid[key] = ndimage.binary_erosion(ok, np.ones((3, 3)), border_value=0)

    return TripletSample(frames[0.0], frames[t], frames[1.0], t, flows, valid, "synthetic", "")


def random_scene(rng: np.random.Generator, size=(64, 64), difficulty="medium", t=0.5, max_sprites=3) -> SceneSpec:
    if difficulty not in DIFFICULTY_SPEEDS:
        raise InvalidArgument(f"unknown difficulty {difficulty!r}")
    lo, hi = DIFFICULTY_SPEEDS[difficulty]
    h, w = size
    sprites = []
    for _ in range(int(rng.integers(1, max_sprites + 1))):
        for _attempt in range(100):
            radius = float(rng.uniform(0.08, 0.2) * min(h, w))
            speed = float(rng.uniform(lo, hi))
            angle = float(rng.uniform(0, 2 * np.pi))
            vel = (speed * np.cos(angle), speed * np.sin(angle))
            margin = radius + 1
            x_lo, x_hi = margin - min(0, vel[0]), w - 1 - margin - max(0, vel[0])
            y_lo, y_hi = margin - min(0, vel[1]), h - 1 - margin - max(0, vel[1])
            if x_lo + 1 < x_hi and y_lo + 1 < y_hi:
                # integer start position: frame 0 holds the raw sprite raster
                pos = (float(np.ceil(rng.uniform(x_lo, x_hi - 1))), float(np.ceil(rng.uniform(y_lo, y_hi - 1))))
                shape = "disk" if rng.random() < 0.5 else "rect"
                sprites.append(Sprite(shape, radius, pos, vel, int(rng.integers(2**31))))
                break
    return SceneSpec(tuple(size), int(rng.integers(2**31)), sprites, t, 0)


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def sample_id(difficulty, seed, index) -> str:
    return f"{difficulty}-{seed}-{index:05d}"


def parse_sample_id(sid: str):
    difficulty, seed, index = sid.rsplit("-", 2)
    return difficulty, int(seed), int(index)


def scene_from_id(sid: str, size=(64, 64)) -> SceneSpec:
    difficulty, seed, index = parse_sample_id(sid)
    s = scene_seed(seed, index)
    spec = random_scene(np.random.default_rng(s), size, difficulty)
    return replace(spec, seed=s)


@dataclass
class Manifest:
    split: str
    difficulty: str
    ids: list
    seed: int = 0
    size: tuple = (64, 64)
    fingerprint: str | None = None

    def header(self) -> str:
        fields_ = [f"split={self.split}", f"difficulty={self.difficulty}", f"seed={self.seed}",
                   f"size={self.size[0]}x{self.size[1]}", f"count={len(self.ids)}"]
        if self.fingerprint:
            fields_.append(f"fingerprint={self.fingerprint}")
        return "# " + " ".join(fields_)

    def to_text(self) -> str:
        return "\n".join([self.header(), *self.ids]) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise NotFound(f"manifest not found: {path}")
        lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("#"):
            raise InvalidData(f"{path}: missing manifest header")
        meta = dict(item.split("=", 1) for item in lines[0][1:].split())
        try:
            h, w = (int(v) for v in meta.get("size", "64x64").split("x"))
            m = cls(meta["split"], meta["difficulty"], lines[1:], int(meta.get("seed", 0)), (h, w),
                    meta.get("fingerprint"))
        except (KeyError, ValueError) as exc:
            raise InvalidData(f"{path}: bad manifest header ({exc})") from exc
        if "count" in meta and int(meta["count"]) != len(m.ids):
            raise InvalidData(f"{path}: header count {meta['count']} != {len(m.ids)} ids")
        return m


def make_split(count: int, seed: int, difficulty: str = "medium", val_fraction: float = 0.2, size=(64, 64)):
    """Return ``(train, val)`` manifests; validation takes the last indices, so their scene seeds are disjoint."""
    if difficulty not in DIFFICULTY_SPEEDS:
        raise InvalidArgument(f"unknown difficulty {difficulty!r}")
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    n_val = int(round(count * val_fraction))
    n_train = count - n_val
    ids = [sample_id(difficulty, seed, i) for i in range(count)]
    return (Manifest("train", difficulty, ids[:n_train], seed, tuple(size)),
            Manifest("val", difficulty, ids[n_train:], seed, tuple(size)))


def _to_uint8(img):
    return (np.clip(img, 0, 1) * 255.0 + 0.5).astype(np.uint8)


def save_triplet_dir(sample: TripletSample, path) -> Path:
    """Write ``im1/im2/im3.png`` plus ``im1.fwd.flo`` / ``im1.bwd.flo`` when flows are known."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, img in zip(FRAME_NAMES, (sample.i0, sample.it, sample.i1)):
        Image.fromarray(_to_uint8(img)).save(path / name)
    if sample.flows:
        write_flo(path / "im1.fwd.flo", sample.flows["o01"])
        write_flo(path / "im1.bwd.flo", sample.flows["o10"])
    return path


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path, img) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(img)).save(path)


def load_triplet_dir(path, t: float = 0.5) -> TripletSample:
    path = Path(path)
    missing = [n for n in FRAME_NAMES if not (path / n).is_file()]
    if missing:
        raise NotFound(f"{path}: missing {', '.join(missing)}")
    frames = [load_image(path / n) for n in FRAME_NAMES]
    if len({f.shape for f in frames}) != 1:
        raise InvalidData(f"{path}: frame sizes differ {[f.shape for f in frames]}")
    flows = None
    fwd, bwd = path / "im1.fwd.flo", path / "im1.bwd.flo"
    if fwd.is_file() and bwd.is_file():
        flows = {"o01": read_flo(fwd), "o10": read_flo(bwd)}
        if any(f.shape[:2] != frames[0].shape[:2] for f in flows.values()):
            raise InvalidData(f"{path}: sidecar flow size does not match frames")
    return TripletSample(*frames, t=t, flows=flows, provenance="disk", sample_id=path.name)


def augment(sample: TripletSample, rng: np.random.Generator, crop=None) -> TripletSample:
    """Random crop, horizontal/vertical flips and temporal reversal."""
    s = sample
    if crop is not None:
        h, w = s.size
        ch, cw = crop
        if ch > h or cw > w:
            raise InvalidArgument(f"crop {crop} larger than {h}x{w}")
        y, x = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
        s = _map_sample(s, lambda a: a[y:y + ch, x:x + cw], lambda f: f[y:y + ch, x:x + cw])
    if rng.random() < 0.5:
        s = flip_sample(s, horizontal=True)
    if rng.random() < 0.5:
        s = flip_sample(s, horizontal=False)
    if rng.random() < 0.5:
        s = reverse_sample(s)
    return s


def _map_sample(s: TripletSample, img_fn, flow_fn, mask_fn=None) -> TripletSample:
    mask_fn = mask_fn or img_fn
    return replace(
        s,
        i0=np.ascontiguousarray(img_fn(s.i0)), it=np.ascontiguousarray(img_fn(s.it)),
        i1=np.ascontiguousarray(img_fn(s.i1)),
        flows={k: np.ascontiguousarray(flow_fn(v)) for k, v in s.flows.items()} if s.flows else None,
        valid={k: np.ascontiguousarray(mask_fn(v)) for k, v in s.valid.items()} if s.valid else None,
    )


def flip_sample(s: TripletSample, horizontal=True) -> TripletSample:
    axis, comp = (1, 0) if horizontal else (0, 1)

    def flip_flow(f):
        f = np.flip(f, axis).copy()
        f[..., comp] *= -1
        return f

    return _map_sample(s, lambda a: np.flip(a, axis), flip_flow)


def reverse_sample(s: TripletSample) -> TripletSample:
    """Swap the two inputs; the middle frame stays, ``t`` becomes ``1 - t``."""
    flows = None
    if s.flows:
        swap = {"o01": "o10", "o10": "o01", "o_t0": "o_t1", "o_t1": "o_t0"}
        flows = {swap[k]: v for k, v in s.flows.items()}
    valid = {"t0": s.valid["t1"], "t1": s.valid["t0"]} if s.valid else None
    return replace(s, i0=s.i1, i1=s.i0, t=1.0 - s.t, flows=flows, valid=valid)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """``(H, W, C)`` array -> ``(1, C, H, W)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().unsqueeze(0)


def to_image(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().float()[0].numpy().transpose(1, 2, 0)


def collate(samples):
    """Stack samples into a batch dict of tensors; all samples must share ``t``."""
    ts = {s.t for s in samples}
    if len(ts) != 1:
        raise InvalidArgument("a batch must share a single t")
    batch = {k: torch.cat([to_tensor(getattr(s, k)) for s in samples]) for k in ("i0", "it", "i1")}
    batch["t"] = ts.pop()
    if all(s.flows for s in samples):
        batch["flows"] = {k: torch.cat([to_tensor(s.flows[k]) for s in samples])
                          for k in samples[0].flows if all(k in s.flows for s in samples)}
    batch["ids"] = [s.sample_id for s in samples]
    return batch


class SyntheticTriplets:
    """Renders triplets for a manifest on demand and caches them."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._cache = {}

    def __len__(self):
        return len(self.manifest.ids)

    def __getitem__(self, i) -> TripletSample:
        sid = self.manifest.ids[i]
        if sid not in self._cache:
            s = render_triplet(scene_from_id(sid, self.manifest.size))
            s.sample_id = sid
            self._cache[sid] = s
        return self._cache[sid]


class DiskTriplets:
    """Triplet directories ``<root>/<id>/`` listed in a manifest."""

    def __init__(self, root, manifest: Manifest):
        self.root = Path(root)
        self.manifest = manifest

    def __len__(self):
        return len(self.manifest.ids)

    def __getitem__(self, i) -> TripletSample:
        return load_triplet_dir(self.root / self.manifest.ids[i])


def open_dataset(manifest_path):
    """Disk triplets when the id directories exist next to the manifest, else synthetic rendering."""
    manifest_path = Path(manifest_path)
    m = Manifest.load(manifest_path)
    root = manifest_path.parent
    if m.ids and (root / m.ids[0]).is_dir():
        return DiskTriplets(root, m)
    return SyntheticTriplets(m)
