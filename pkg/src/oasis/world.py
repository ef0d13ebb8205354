"""Procedural labeled street scenes with controllable domain shift.

Scenes are built from a handful of smoothly drifting geometric primitives
(horizon band, perspective road, flanking sidewalks, building skyline,
tree canopies, poles, cars, pedestrians), each painted into the class
mask and the image from the same geometry, so masks are pixel-perfect by
construction. An appearance "condition" transform is applied to the image
last and never moves class boundaries.

Environment presets come in three disjoint pools (source / validation /
deployment), as do conditions, so the deployment distribution is held out
from everything that came before it.
"""

from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_for

CLASS_NAMES = ("sky", "road", "sidewalk", "building", "vegetation", "pole", "car", "pedestrian")
N_CLASSES = len(CLASS_NAMES)
SKY, ROAD, SIDEWALK, BUILDING, VEGETATION, POLE, CAR, PEDESTRIAN = range(N_CLASSES)
DW = np.float64  # world images are rendered in doubles; the model may downcast

DROPPABLE_CLASSES = ("pedestrian", "car", "pole")

SOURCE_ENVIRONMENTS = ("suburb", "avenue")
VAL_ENVIRONMENTS = ("highway", "town", "city")
DEPLOY_ENVIRONMENTS = ("rural", "boulevard", "downtown")

SOURCE_CONDITIONS = ("clear",)
VAL_CONDITIONS = ("clear", "fog", "rain")
DEPLOY_CONDITIONS = ("dusk", "night", "winter")

# layout family parameters: road half-width / sidewalk width as fractions of
# the image width, horizon as a fraction of height, object inventories and a
# palette accent per family.
ENVIRONMENTS = {
    "suburb":    dict(road=0.26, walk=0.09, horizon=0.36, n_buildings=3, b_h=(0.12, 0.30),
                      n_trees=4, n_cars=2, n_peds=3, n_poles=3,
                      building_rgb=(0.62, 0.52, 0.42), grass_rgb=(0.22, 0.46, 0.20), road_gray=0.27),
    "avenue":    dict(road=0.34, walk=0.12, horizon=0.33, n_buildings=5, b_h=(0.18, 0.42),
                      n_trees=2, n_cars=3, n_peds=3, n_poles=4,
                      building_rgb=(0.58, 0.40, 0.34), grass_rgb=(0.24, 0.44, 0.21), road_gray=0.25),
    "highway":   dict(road=0.46, walk=0.05, horizon=0.30, n_buildings=1, b_h=(0.10, 0.20),
                      n_trees=5, n_cars=4, n_peds=2, n_poles=5,
                      building_rgb=(0.50, 0.40, 0.34), grass_rgb=(0.25, 0.42, 0.18), road_gray=0.30),
    "town":      dict(road=0.24, walk=0.10, horizon=0.35, n_buildings=4, b_h=(0.15, 0.35),
                      n_trees=3, n_cars=2, n_peds=3, n_poles=3,
                      building_rgb=(0.68, 0.58, 0.44), grass_rgb=(0.21, 0.47, 0.22), road_gray=0.26),
    "city":      dict(road=0.22, walk=0.14, horizon=0.38, n_buildings=8, b_h=(0.25, 0.62),
                      n_trees=1, n_cars=3, n_peds=4, n_poles=4,
                      building_rgb=(0.48, 0.47, 0.50), grass_rgb=(0.23, 0.43, 0.20), road_gray=0.24),
    "rural":     dict(road=0.20, walk=0.06, horizon=0.33, n_buildings=1, b_h=(0.10, 0.18),
                      n_trees=6, n_cars=2, n_peds=2, n_poles=2,
                      building_rgb=(0.55, 0.44, 0.33), grass_rgb=(0.26, 0.48, 0.19), road_gray=0.29),
    "boulevard": dict(road=0.38, walk=0.13, horizon=0.31, n_buildings=4, b_h=(0.16, 0.38),
                      n_trees=4, n_cars=4, n_peds=3, n_poles=5,
                      building_rgb=(0.64, 0.55, 0.47), grass_rgb=(0.22, 0.45, 0.21), road_gray=0.26),
    "downtown":  dict(road=0.24, walk=0.15, horizon=0.40, n_buildings=9, b_h=(0.28, 0.66),
                      n_trees=1, n_cars=3, n_peds=4, n_poles=4,
                      building_rgb=(0.44, 0.44, 0.48), grass_rgb=(0.22, 0.42, 0.20), road_gray=0.23),
}

CONDITION_NAMES = ("clear", "fog", "rain", "dusk", "night", "winter")

CAR_COLORS = np.array([
    (0.80, 0.12, 0.10), (0.15, 0.30, 0.72), (0.88, 0.87, 0.84),
    (0.78, 0.62, 0.10), (0.20, 0.55, 0.50), (0.55, 0.16, 0.45),
])
PED_COLORS = np.array([
    (0.95, 0.45, 0.10), (0.92, 0.20, 0.15), (0.95, 0.75, 0.10), (0.85, 0.30, 0.40),
])

SKY_RGB = np.array((0.56, 0.74, 0.93))
SIDEWALK_RGB = np.array((0.56, 0.55, 0.52))
POLE_RGB = np.array((0.14, 0.14, 0.16))


@dataclass(frozen=True)
class DomainSpec:
    environment: str
    condition: str
    severity: float = 1.0


@dataclass(frozen=True)
class SubSequence:
    domain: DomainSpec
    frames: int
    dropped_classes: tuple = ()


@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: str
    subsequences: tuple
    seed: int
    height: int = 48
    width: int = 64

    @property
    def total_frames(self):
        return sum(s.frames for s in self.subsequences)


@dataclass
class LabeledFrame:
    image: np.ndarray          # (H, W, 3) floats in [0, 1]
    mask: np.ndarray           # (H, W) int class ids
    domain_tag: tuple          # (environment, condition)
    n_classes: int = N_CLASSES


# ---------------------------------------------------------------------------
# scene rendering
# ---------------------------------------------------------------------------

def _paint(mask, image, sel, class_id, color):
    mask[sel] = class_id
    image[sel] = color


def _trapezoid(h, horizon, center_bottom, vanish_x, half_bottom):
    rows = np.arange(h, dtype=DW)
    frac = np.clip((rows - horizon) / max(h - 1 - horizon, 1.0), 0.0, None)
    center = vanish_x + (center_bottom - vanish_x) * frac
    half = 0.6 + (half_bottom - 0.6) * frac
    return frac, center, half


def render(spec, t, seed, height=48, width=64, dropped_classes=()):
    """Deterministic labeled frame for (spec, t, seed).

    Layout constants are drawn once from the seed; positions are smooth
    closed-form functions of t, so consecutive frames are temporally
    correlated. Dropped classes keep their layout draws (the rest of the
    scene is unchanged) but are simply never painted.
    """
    env = ENVIRONMENTS[spec.environment]
    h, w = height, width
    # layout is independent of the condition: appearance never moves geometry
    lay = rng_for(seed, "layout", spec.environment)

    yy = np.arange(h, dtype=DW)[:, None]
    xx = np.arange(w, dtype=DW)[None, :]
    mask = np.zeros((h, w), dtype=np.int64)
    image = np.empty((h, w, 3), dtype=DW)

    # camera / global drift
    pan_speed = lay.uniform(0.05, 0.18) * lay.choice((-1.0, 1.0))
    pan = pan_speed * t
    hor_phase = lay.uniform(0, 2 * np.pi)
    horizon = int(round(h * (env["horizon"] + 0.025 * np.sin(2 * np.pi * t / 140.0 + hor_phase))))

    # sky with a mild vertical gradient
    image[:] = SKY_RGB * (1.0 - 0.10 * (yy / h))[:, :, None]

    # ground vegetation
    ground = yy >= horizon
    grass = np.asarray(env["grass_rgb"])
    _paint(mask, image, np.broadcast_to(ground, (h, w)), VEGETATION, grass)

    # buildings rise from the horizon; a slight footer keeps them grounded
    b_lo, b_hi = env["b_h"]
    b_color = np.asarray(env["building_rgb"])
    for i in range(env["n_buildings"]):
        bx = lay.uniform(-0.1, 1.1) * w
        bw = lay.uniform(0.07, 0.18) * w
        bh = lay.uniform(b_lo, b_hi) * h
        tint = lay.uniform(0.82, 1.12)
        x0 = (bx + pan * 0.35) % (1.25 * w) - 0.12 * w
        sel = (xx >= x0) & (xx < x0 + bw) & (yy >= horizon - bh) & (yy < horizon + 0.045 * h)
        _paint(mask, image, sel, BUILDING, np.clip(b_color * tint, 0, 1))
        # window grid: image-only texture anchored to the facade
        windows = sel & (((xx - x0).astype(np.int64) % 4) < 2) & ((yy.astype(np.int64) % 5) < 2)
        image[windows] *= 0.55

    # tree canopies straddle the horizon line
    for i in range(env["n_trees"]):
        cx = lay.uniform(0, 1.2) * w
        cy = horizon - lay.uniform(0.02, 0.10) * h
        rx = lay.uniform(0.04, 0.10) * w
        ry = lay.uniform(0.05, 0.12) * h
        shade = lay.uniform(0.8, 1.15)
        x0 = (cx + pan * 0.55) % (1.25 * w) - 0.12 * w
        sel = ((xx - x0) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        _paint(mask, image, sel, VEGETATION, np.clip(grass * shade * 0.9, 0, 1))

    # road and sidewalks: two nested perspective trapezoids
    road_half = env["road"] * w / 2
    walk_width = env["walk"] * w
    wobble = lay.uniform(0, 2 * np.pi)
    center_bottom = w * 0.5 + 0.06 * w * np.sin(2 * np.pi * t / 90.0 + wobble)
    vanish_x = w * 0.5 + 0.12 * w * np.sin(2 * np.pi * t / 170.0 + wobble * 0.7)
    frac, center, half_road = _trapezoid(h, horizon, center_bottom, vanish_x, road_half)
    half_walk = half_road + np.maximum(frac * walk_width, 0.8)

    below = yy >= horizon
    walk_sel = below & (np.abs(xx - center[:, None]) <= half_walk[:, None])
    _paint(mask, image, walk_sel, SIDEWALK, SIDEWALK_RGB)
    road_sel = below & (np.abs(xx - center[:, None]) <= half_road[:, None])
    road_rgb = np.full(3, env["road_gray"])
    road_rgb[2] += 0.02
    _paint(mask, image, road_sel, ROAD, road_rgb)
    # lane dashes: image-only detail inside the road region
    dash = road_sel & (np.abs(xx - center[:, None]) <= np.maximum(half_road[:, None] * 0.04, 0.5)) \
        & (((yy + (t * 2.0)) % 12) < 5)
    image[dash] = road_rgb + 0.35

    depth_span = max(h - 1 - horizon, 1)

    # poles march along the sidewalk's outer edge
    pole_offset = lay.uniform(0, 1)
    pole_side = lay.choice((-1.0, 1.0))
    for k in range(env["n_poles"]):
        fr = (pole_offset + k / env["n_poles"] + t / 260.0) % 1.0
        fr = 0.12 + 0.85 * fr
        py = horizon + fr * depth_span
        iy = int(py)
        px = center[min(iy, h - 1)] + pole_side * (half_walk[min(iy, h - 1)] + 1.5)
        ph = max(int(fr * 0.38 * h), 2)
        pw = 1 + (fr > 0.55)
        if "pole" not in dropped_classes:
            sel = (xx >= int(px)) & (xx < int(px) + pw) & (yy >= iy - ph) & (yy < iy)
            _paint(mask, image, sel, POLE, POLE_RGB)

    # cars travel the road at drifting depths
    for i in range(env["n_cars"]):
        phase = lay.uniform(0, 2 * np.pi)
        speed = lay.uniform(0.5, 1.4)
        lane = lay.uniform(-0.55, 0.55)
        color = CAR_COLORS[lay.integers(0, len(CAR_COLORS))]
        fr = 0.18 + 0.72 * (0.5 + 0.5 * np.sin(2 * np.pi * (t * speed) / 230.0 + phase))
        cy = horizon + fr * depth_span
        iy = min(int(cy), h - 1)
        cx = center[iy] + lane * half_road[iy]
        cw = max(fr * 0.14 * w, 3.0)
        ch = max(fr * 0.09 * h, 2.0)
        if "car" not in dropped_classes:
            body = (np.abs(xx - cx) <= cw / 2) & (yy >= cy - ch) & (yy < cy)
            cabin = (np.abs(xx - cx) <= cw / 3.2) & (yy >= cy - 1.6 * ch) & (yy < cy - ch)
            _paint(mask, image, body, CAR, color)
            _paint(mask, image, cabin, CAR, np.clip(color * 0.55 + 0.38, 0, 1))

    # pedestrians on the sidewalks
    for j in range(env["n_peds"]):
        phase = lay.uniform(0, 2 * np.pi)
        side = lay.choice((-1.0, 1.0))
        color = PED_COLORS[lay.integers(0, len(PED_COLORS))]
        fr = 0.25 + 0.62 * (0.5 + 0.5 * np.sin(2 * np.pi * t / 150.0 * lay.uniform(0.6, 1.3) + phase))
        pyf = horizon + fr * depth_span
        iy = min(int(pyf), h - 1)
        px = center[iy] + side * (half_road[iy] + 0.5 * (half_walk[iy] - half_road[iy]))
        ph = max(fr * 0.16 * h, 2.2)
        pw = max(fr * 0.02 * w, 1.1)
        if "pedestrian" not in dropped_classes:
            sel = ((xx - px) / pw) ** 2 + ((yy - (pyf - ph / 2)) / (ph / 2)) ** 2 <= 1.0
            _paint(mask, image, sel, PEDESTRIAN, color)

    # static texture field (constant in t: detail, not motion), stronger on
    # organic/structured classes so they stay locally recognizable
    noise = rng_for(seed, "texture", spec.environment).normal(0.0, 0.016, size=(h, w, 1))
    noise_gain = np.array((0.7, 0.8, 1.0, 1.7, 2.4, 0.5, 0.6, 0.5))[mask][:, :, None]
    image += noise * noise_gain
    image *= (0.94 + 0.10 * (yy / h))[:, :, None]

    image = apply_condition(image, spec.condition, spec.severity, seed, t)
    np.clip(image, 0.0, 1.0, out=image)
    return LabeledFrame(image=image, mask=mask, domain_tag=(spec.environment, spec.condition))


LUMA = np.array((0.299, 0.587, 0.114))


def apply_condition(image, condition, severity, seed, t):
    """Appearance-only weather/daylight transform; geometry untouched."""
    s = float(severity)
    if condition == "clear" or s == 0.0:
        return image
    if condition == "fog":
        f = min(0.55 * s, 0.95)
        haze = np.array((0.79, 0.80, 0.82))
        return image * (1 - f) + haze * f
    if condition == "rain":
        # overcast darkening with a cold cast, plus drifting streak speckle
        h, w = image.shape[:2]
        streaks = rng_for(seed, "rain", 0).normal(0, 1.0, size=(2 * h, w))
        off = int(t * 2.3) % h
        window = streaks[off:off + h]
        cast = 1 + (np.array((-0.10, -0.05, 0.06)) * s)
        wet = image * (1 - 0.42 * s) * cast + 0.03 * s
        drop = np.clip(window - 1.6, 0, None)[:, :, None]
        return wet + 0.50 * s * drop
    if condition == "dusk":
        gain = 1 - 0.35 * s
        cast = 1 + (np.array((0.12, -0.03, -0.12)) * s)
        return image * gain * cast
    if condition == "night":
        gain = 1 - 0.75 * s  # drastic: global gain 0.25 at full severity
        cast = 1 + (np.array((-0.10, -0.04, 0.22)) * s)
        return image * gain * cast
    if condition == "winter":
        y = image @ LUMA
        pale = y[:, :, None] * np.array((0.96, 0.98, 1.06)) + 0.22
        return image * (1 - 0.55 * s) + pale * (0.55 * s)
    raise ValueError(f"unknown condition {condition!r}")


# ---------------------------------------------------------------------------
# domain randomization transforms
# ---------------------------------------------------------------------------

DR_TRANSFORMS = ("identity", "brightness", "color", "contrast", "rgb_shift", "grayscale")


def apply_dr_transform(image, transform_id, intensity, rng):
    """One photometric training-time transform; output clamped to [0, 1]."""
    if transform_id == "identity":
        return image
    if transform_id == "brightness":
        return np.clip(image * intensity, 0, 1)
    if transform_id == "color":
        gray = (image @ LUMA)[:, :, None]
        return np.clip(gray + (image - gray) * intensity, 0, 1)
    if transform_id == "contrast":
        mean = image @ LUMA
        pivot = mean.mean()
        return np.clip(pivot + (image - pivot) * intensity, 0, 1)
    if transform_id == "rgb_shift":
        # per-channel offsets on the 8-bit [0, 120] scale, rescaled to unit range
        offsets = rng.uniform(0.0, intensity * 120.0 / 255.0, size=3)
        return np.clip(image + offsets, 0, 1)
    if transform_id == "grayscale":
        gray = image @ LUMA
        return np.repeat(gray[:, :, None], 3, axis=2)
    raise ValueError(f"unknown transform {transform_id!r}")


def sample_transforms(k, rng):
    """K distinct transform ids, order randomized, no replacement."""
    if not 1 <= k <= len(DR_TRANSFORMS):
        raise ValueError(f"K must be in [1, {len(DR_TRANSFORMS)}], got {k}")
    picks = rng.choice(len(DR_TRANSFORMS), size=k, replace=False)
    return [DR_TRANSFORMS[int(i)] for i in picks]


def randomize(image, k, rng):
    """Compose K distinct transforms sampled without replacement."""
    out = image
    for name in sample_transforms(k, rng):
        intensity = rng.uniform(0.2, 1.8) if name in ("brightness", "color", "contrast") else 1.0
        out = apply_dr_transform(out, name, intensity, rng)
    return out


# ---------------------------------------------------------------------------
# benchmark construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WorldConfig:
    height: int = 48
    width: int = 64
    classes: int = N_CLASSES
    n_train: int = 2000
    n_source_memory: int = 64
    n_source_eval: int = 32
    val_episodes: int = 4
    deploy_episodes: int = 4
    subsequences: int = 4
    frames_per_subsequence: int = 100
    severity: float = 1.0

    def __post_init__(self):
        if self.classes != N_CLASSES:
            raise ValueError(f"the scene generator defines exactly {N_CLASSES} classes")


@dataclass
class Benchmark:
    train_set: list
    source_memory: list
    source_eval: list
    val_episodes: list
    deploy_episodes: list
    seed: int = 0


def _source_frames(cfg, seed, tag, count):
    frames = []
    rng = rng_for(seed, tag)
    for i in range(count):
        env = SOURCE_ENVIRONMENTS[int(rng.integers(0, len(SOURCE_ENVIRONMENTS)))]
        t = float(rng.uniform(0, 600))
        spec = DomainSpec(env, "clear", cfg.severity)
        frames.append(render(spec, t, int(rng.integers(0, 2 ** 31)), cfg.height, cfg.width))
    return frames


def _random_episode(cfg, seed, episode_id, env_pool, cond_pool):
    rng = rng_for(seed, "episode", episode_id)
    subs = []
    for _ in range(cfg.subsequences):
        env = env_pool[int(rng.integers(0, len(env_pool)))]
        cond = cond_pool[int(rng.integers(0, len(cond_pool)))]
        subs.append(SubSequence(DomainSpec(env, cond, cfg.severity), cfg.frames_per_subsequence))
    return EpisodeSpec(episode_id, tuple(subs), seed=int(rng.integers(0, 2 ** 31)),
                       height=cfg.height, width=cfg.width)


def forgetting_episode(cfg, seed):
    """Deploy episode with a 2F-frame pedestrian-absent window, then reappearance."""
    f = cfg.frames_per_subsequence
    sev = cfg.severity
    subs = (
        SubSequence(DomainSpec("rural", "dusk", sev), f),
        SubSequence(DomainSpec("downtown", "night", sev), f, dropped_classes=("pedestrian",)),
        SubSequence(DomainSpec("boulevard", "night", sev), f, dropped_classes=("pedestrian",)),
        SubSequence(DomainSpec("rural", "dusk", sev), f),
    )
    rng = rng_for(seed, "episode", "deploy-forgetting")
    return EpisodeSpec("deploy-forgetting", subs, seed=int(rng.integers(0, 2 ** 31)),
                       height=cfg.height, width=cfg.width)


def make_benchmark(cfg, seed):
    """Source training frames plus validation and held-out deployment episodes."""
    val = [_random_episode(cfg, rng_for(seed, "val", e).integers(0, 2 ** 31), f"val-{e}",
                           VAL_ENVIRONMENTS, VAL_CONDITIONS)
           for e in range(cfg.val_episodes)]
    deploy = [forgetting_episode(cfg, seed)]
    for e in range(1, cfg.deploy_episodes):
        deploy.append(_random_episode(cfg, rng_for(seed, "deploy", e).integers(0, 2 ** 31),
                                      f"deploy-{e}", DEPLOY_ENVIRONMENTS, DEPLOY_CONDITIONS))
    return Benchmark(
        train_set=_source_frames(cfg, seed, "train", cfg.n_train),
        source_memory=_source_frames(cfg, seed, "memory", cfg.n_source_memory),
        source_eval=_source_frames(cfg, seed, "source-eval", cfg.n_source_eval),
        val_episodes=val,
        deploy_episodes=deploy,
        seed=seed,
    )


def episode_frames(episode):
    """Yield (frame_index, sub_index, LabeledFrame) over an episode in order."""
    idx = 0
    for s, sub in enumerate(episode.subsequences):
        t0 = float(rng_for(episode.seed, "t0", s).uniform(0, 500))
        sub_seed = int(rng_for(episode.seed, "sub", s).integers(0, 2 ** 31))
        for local in range(sub.frames):
            frame = render(sub.domain, t0 + local, sub_seed, episode.height, episode.width,
                           dropped_classes=sub.dropped_classes)
            yield idx, s, frame
            idx += 1


class MaterializedEpisode:
    """An episode rendered up front so several runs can share the frames."""

    def __init__(self, episode):
        self.spec = episode
        self.episode_id = episode.episode_id
        self.items = [(i, s, f) for i, s, f in episode_frames(episode)]

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)


# ---------------------------------------------------------------------------
# export formats
# ---------------------------------------------------------------------------

def write_ppm(image, path):
    """Binary P6, 8-bit, from a unit-range float image."""
    h, w = image.shape[:2]
    data = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        assert fh.readline().strip() == b"P6"
        w, h = map(int, fh.readline().split())
        assert fh.readline().strip() == b"255"
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(DW) / 255.0


def write_pgm(mask, path):
    """Binary P5 with pixel value = class id."""
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(mask.astype(np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        assert fh.readline().strip() == b"P5"
        w, h = map(int, fh.readline().split())
        assert fh.readline().strip() == b"255"
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).astype(np.int64)


def episode_manifest(episode):
    """Structured description of an episode's sub-sequences."""
    return {
        "episode_id": episode.episode_id,
        "seed": episode.seed,
        "height": episode.height,
        "width": episode.width,
        "subsequences": [
            {
                "index": i,
                "environment": sub.domain.environment,
                "condition": sub.domain.condition,
                "severity": sub.domain.severity,
                "frame_count": sub.frames,
                "dropped_classes": list(sub.dropped_classes),
            }
            for i, sub in enumerate(episode.subsequences)
        ],
    }
