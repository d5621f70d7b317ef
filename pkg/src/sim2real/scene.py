"""Procedural RGB-D scene rendering in two domains.

The "sim" domain is flat-shaded and noise free. The "surrogate_real" domain
stands in for a physical camera: lighting-modulated colors, cast shadows, a
cluttered wall band behind the board, pixel and depth noise, and a small
fixed camera offset. Labels (the target position on the board) are identical
across domains for the same scene.

Geometry is an oblique parallel projection: world x (board width, cm) maps
affinely to image columns, world y (board depth) to rows, and height z shears
rows upward. Everything is analytic, so tests can invert it.

World frame: x in [0, 45] left-to-right, y in [0, 30] front-to-back (y = 0
nearest the camera), z up. Images are (H, W, 4) float32 arrays, channels
R, G, B, depth, all in [0, 1]; depth 1.0 means "beyond camera range".
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

BOARD_W_CM = 45.0
BOARD_H_CM = 30.0

DOMAIN_SIM = "sim"
DOMAIN_REAL = "surrogate_real"
DOMAINS = (DOMAIN_SIM, DOMAIN_REAL)


@dataclass(frozen=True)
class ObjectSpec:
    """One catalog object. size_cm is the cube edge, or (radius, height)."""
    id: int
    color: tuple
    shape: str  # cube | cylinder | triangular_prism
    size_cm: tuple

    @property
    def height(self):
        if self.shape == "cube":
            return self.size_cm[0]
        return self.size_cm[1]

    @property
    def half_extent(self):
        """Half side of the bounding square used for margins and overlap."""
        if self.shape == "cube":
            return self.size_cm[0] / 2.0
        return self.size_cm[0]  # cylinder/prism radius

    @property
    def footprint_cm(self):
        return 2.0 * self.half_extent


CATALOG = {
    1: ObjectSpec(1, (1.0, 0.0, 0.0), "cube", (5.0,)),
    2: ObjectSpec(2, (0.0, 1.0, 0.0), "cube", (4.0,)),
    3: ObjectSpec(3, (0.0, 0.0, 0.0), "cylinder", (3.5, 1.0)),
    4: ObjectSpec(4, (0.0, 0.0, 1.0), "triangular_prism", (4.5, 1.0)),
    5: ObjectSpec(5, (1.0, 0.0, 0.0), "cube", (4.0,)),
}


@dataclass(frozen=True)
class Lighting:
    """Directional-plus-ambient lighting for the surrogate-real domain.

    azimuth_deg is the direction shadows fall toward (degrees, 0 = +x).
    """
    ambient: float = 0.62
    directional: float = 0.25
    azimuth_deg: float = 20.0
    elevation_deg: float = 55.0
    shadow_factor: float = 1.1
    shadow_darkness: float = 0.55
    tint: tuple = (1.0, 0.98, 0.94)

    @property
    def top_factor(self):
        return self.ambient + self.directional * math.sin(math.radians(self.elevation_deg))

    @property
    def side_factor(self):
        return self.ambient + 0.35 * self.directional * math.cos(math.radians(self.elevation_deg))


LIGHTING_DEFAULT = Lighting()
LIGHTING_SHIFTED = Lighting(ambient=0.50, directional=0.45, azimuth_deg=140.0,
                            elevation_deg=35.0, shadow_factor=2.0,
                            shadow_darkness=0.45, tint=(0.92, 0.96, 1.0))


@dataclass(frozen=True)
class NoiseSpec:
    rgb_sigma: float = 0.02
    depth_sigma: float = 0.01


@dataclass
class SceneSpec:
    target: ObjectSpec
    position: tuple                  # (tx, ty) cm on the board
    domain: str = DOMAIN_SIM
    lighting: Lighting = LIGHTING_DEFAULT
    distractors: list = field(default_factory=list)   # [(ObjectSpec, (x, y)), ...]
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0

    def validate(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        tx, ty = self.position
        h = self.target.half_extent
        if not (h <= tx <= BOARD_W_CM - h and h <= ty <= BOARD_H_CM - h):
            raise ValueError(
                f"target footprint leaves the board: ({tx:.2f}, {ty:.2f}) cm, half extent {h}")
        for obj, (dx, dy) in self.distractors:
            if not (obj.half_extent <= dx <= BOARD_W_CM - obj.half_extent
                    and obj.half_extent <= dy <= BOARD_H_CM - obj.half_extent):
                raise ValueError(f"distractor {obj.id} leaves the board at ({dx:.2f}, {dy:.2f})")
            if _squares_overlap((tx, ty), h, (dx, dy), obj.half_extent):
                raise ValueError(f"distractor {obj.id} overlaps the target footprint")


def _squares_overlap(c1, h1, c2, h2):
    return abs(c1[0] - c2[0]) < h1 + h2 and abs(c1[1] - c2[1]) < h1 + h2


@dataclass(frozen=True)
class RenderParams:
    """Projection constants, palette, and surrogate-domain perturbations."""
    image_h: int = 32
    image_w: int = 64
    supersample: int = 4
    # projection: u = u0 + sx*x ; v = v0 - sy*y - kz*z (pixels)
    u0: float = 2.0
    sx: float = 60.0 / 45.0
    v0: float = 29.75
    sy: float = 0.8
    kz: float = 0.55
    # depth model: 1 - base - cz*z - cy*(30 - y); background exactly 1.0
    depth_base: float = 0.005
    depth_cz: float = 0.03
    depth_cy: float = 0.0005
    board_color: tuple = (1.0, 1.0, 1.0)
    sim_background: tuple = (0.02, 0.02, 0.02)
    desk_color: tuple = (0.50, 0.47, 0.44)
    wall_color: tuple = (0.26, 0.24, 0.22)
    wall_depth: float = 0.90
    desk_depth: float = 0.97
    # fixed clutter rectangles on the wall band: (x0, x1 cm, v0, v1 rows, delta)
    wall_clutter: tuple = ((4.0, 14.0, 0.0, 4.0, 0.14), (21.0, 29.0, 1.0, 6.0, -0.10),
                          (34.0, 44.0, 0.0, 2.5, 0.22))
    cam_offset_cm: tuple = (0.4, 0.3)   # surrogate-real only


DEFAULT_PARAMS = RenderParams()


def project_point(x, y, z, params=DEFAULT_PARAMS, real=False):
    """World (cm) to image (col, row) in float pixels."""
    dx, dy = params.cam_offset_cm if real else (0.0, 0.0)
    u = params.u0 + params.sx * (x + dx)
    v = params.v0 - params.sy * (y + dy) - params.kz * z
    return u, v


def _footprint_mask(obj, dx, dy):
    if obj.shape == "cube":
        h = obj.size_cm[0] / 2.0
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if obj.shape == "cylinder":
        r = obj.size_cm[0]
        return dx * dx + dy * dy <= r * r
    # triangular prism, apex toward the camera (-y)
    r = obj.size_cm[0]
    wx = r * math.sqrt(3.0) / 2.0
    front = -r + np.abs(dx) * math.sqrt(3.0)
    return (np.abs(dx) <= wx) & (dy >= front) & (dy <= r / 2.0)


def _front_edge(obj, dx):
    """y of the front silhouette boundary at lateral offset dx (relative cm).

    Returns +inf outside the lateral extent so comparisons vanish there.
    """
    if obj.shape == "cube":
        h = obj.size_cm[0] / 2.0
        y = np.full_like(dx, -h)
        y[np.abs(dx) > h] = np.inf
        return y
    if obj.shape == "cylinder":
        r = obj.size_cm[0]
        inside = np.abs(dx) <= r
        y = np.full_like(dx, np.inf)
        y[inside] = -np.sqrt(np.maximum(r * r - dx[inside] ** 2, 0.0))
        return y
    r = obj.size_cm[0]
    wx = r * math.sqrt(3.0) / 2.0
    y = np.full_like(dx, np.inf)
    inside = np.abs(dx) <= wx
    y[inside] = -r + np.abs(dx[inside]) * math.sqrt(3.0)
    return y


def _depth_at(params, y, z):
    return 1.0 - params.depth_base - params.depth_cz * z - params.depth_cy * (BOARD_H_CM - y)


def render(spec, params=DEFAULT_PARAMS):
    """Render one scene to an (H, W, 4) float32 image in [0, 1].

    Pure function of (spec, spec.seed): identical inputs give bit-identical
    images.
    """
    spec.validate()
    real = spec.domain == DOMAIN_REAL
    ss = params.supersample
    H, W = params.image_h, params.image_w
    hs, ws = H * ss, W * ss

    u = (np.arange(ws, dtype=np.float64) + 0.5) / ss
    v = (np.arange(hs, dtype=np.float64) + 0.5) / ss
    U = np.broadcast_to(u, (hs, ws))
    V = np.broadcast_to(v[:, None], (hs, ws))

    cam_dx, cam_dy = params.cam_offset_cm if real else (0.0, 0.0)
    u0 = params.u0 + params.sx * cam_dx
    v0 = params.v0 - params.sy * cam_dy

    x0 = (U - u0) / params.sx                # world x at z=0
    y0 = (v0 - V) / params.sy                # world y at z=0

    rgb = np.empty((hs, ws, 3), dtype=np.float64)
    depth = np.empty((hs, ws), dtype=np.float64)

    light = spec.lighting if real else None
    top_f = light.top_factor if real else 1.0
    side_f = light.side_factor if real else 1.0

    # background
    if real:
        wall = y0 > BOARD_H_CM
        rgb[:] = params.desk_color
        depth[:] = params.desk_depth
        rgb[wall] = params.wall_color
        depth[wall] = params.wall_depth
        for cx0, cx1, r0, r1, delta in params.wall_clutter:
            m = wall & (x0 >= cx0) & (x0 <= cx1) & (V >= r0) & (V <= r1)
            rgb[m] = np.clip(np.asarray(params.wall_color) + delta, 0.0, 1.0)
    else:
        rgb[:] = params.sim_background
        depth[:] = 1.0

    # board top
    board = (x0 >= 0) & (x0 <= BOARD_W_CM) & (y0 >= 0) & (y0 <= BOARD_H_CM)
    rgb[board] = np.asarray(params.board_color) * top_f
    depth[board] = _depth_at(params, y0[board], 0.0)

    objects = [(spec.target, spec.position)] + list(spec.distractors)

    # cast shadows (surrogate-real only), before the objects that throw them
    if real and light.shadow_factor > 0:
        az = math.radians(light.azimuth_deg)
        for obj, (cx, cy) in objects:
            shift = obj.height * light.shadow_factor
            sx_cm, sy_cm = shift * math.cos(az), shift * math.sin(az)
            m = _footprint_mask(obj, x0 - cx - sx_cm, y0 - cy - sy_cm) & board
            rgb[m] *= light.shadow_darkness

    # objects, back to front
    for obj, (cx, cy) in sorted(objects, key=lambda oc: -oc[1][1]):
        color = np.asarray(obj.color, dtype=np.float64)
        h = obj.height
        dx = x0 - cx
        # front wall: between the base edge and the sheared top edge
        yf = _front_edge(obj, dx) + cy
        with np.errstate(invalid="ignore"):
            v_base = v0 - params.sy * yf
            wall_m = np.isfinite(yf) & (V <= v_base) & (V > v_base - params.kz * h)
        if wall_m.any():
            z_at = (v_base[wall_m] - V[wall_m]) / params.kz
            rgb[wall_m] = color * side_f
            depth[wall_m] = _depth_at(params, yf[wall_m], z_at)
        # top face, sheared up by kz*h
        y_top = (v0 - V - params.kz * h) / params.sy
        top_m = _footprint_mask(obj, dx, y_top - cy)
        if top_m.any():
            rgb[top_m] = color * top_f
            depth[top_m] = _depth_at(params, y_top[top_m], h)

    # box-average the supersamples
    rgb = rgb.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    depth = depth.reshape(H, ss, W, ss).mean(axis=(1, 3))

    if real:
        rgb *= np.asarray(light.tint)
        rng = np.random.default_rng(spec.seed)
        rgb += rng.normal(0.0, spec.noise.rgb_sigma, size=rgb.shape)
        depth += rng.normal(0.0, spec.noise.depth_sigma, size=depth.shape)

    out = np.concatenate([rgb, depth[:, :, None]], axis=2)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def target_region_mask(spec, params=DEFAULT_PARAMS, margin_cm=3.0):
    """Boolean (H, W) mask covering the target's silhouette plus a margin.

    Used to score off-target image content (distractor leakage) at final
    resolution, so the mask is computed at pixel centers without noise.
    """
    H, W = params.image_h, params.image_w
    u = np.arange(W, dtype=np.float64) + 0.5
    v = np.arange(H, dtype=np.float64) + 0.5
    U = np.broadcast_to(u, (H, W))
    V = np.broadcast_to(v[:, None], (H, W))
    cx, cy = spec.position
    half = spec.target.half_extent + margin_cm
    height = spec.target.height
    # conservative screen-space box: base rectangle plus the vertical shear
    for real in (False, True):
        u_lo, v_hi = project_point(cx - half, cy - half, 0.0, params, real)
        u_hi, v_lo = project_point(cx + half, cy + half, height, params, real)
        m = (U >= u_lo) & (U <= u_hi) & (V >= v_lo - 0.5) & (V <= v_hi + 0.5)
        if real:
            mask |= m
        else:
            mask = m
    return mask


def grid_positions(grid_cm, object_size_cm, board=(BOARD_W_CM, BOARD_H_CM)):
    """Regular grid with half-footprint margins, row-major (y outer, x inner)."""
    if not 0 < grid_cm <= board[0]:
        raise ValueError(f"grid_cm must be in (0, {board[0]}], got {grid_cm}")
    s = object_size_cm
    nx = int(math.floor((board[0] - s) / grid_cm + 1e-9)) + 1
    ny = int(math.floor((board[1] - s) / grid_cm + 1e-9)) + 1
    return [(s / 2.0 + i * grid_cm, s / 2.0 + j * grid_cm)
            for j in range(ny) for i in range(nx)]


def sample_random_scene(rng, domain, obj, distractor_count=0, lighting_shift=False,
                        distractor_pool=None, noise=NoiseSpec(), seed=0):
    """Uniform target position; distractors rejection-sampled off the target.

    Raises after 1000 failed placement attempts (board too crowded).
    """
    if not 0 <= distractor_count <= 3:
        raise ValueError("distractor_count must be in 0..3")
    h = obj.half_extent
    tx = rng.uniform(h, BOARD_W_CM - h)
    ty = rng.uniform(h, BOARD_H_CM - h)
    placed = [(obj, (tx, ty))]
    pool = distractor_pool or [o for i, o in sorted(CATALOG.items()) if o.id != obj.id]
    distractors = []
    for k in range(distractor_count):
        d = pool[k % len(pool)]
        for attempt in range(1000):
            dx = rng.uniform(d.half_extent, BOARD_W_CM - d.half_extent)
            dy = rng.uniform(d.half_extent, BOARD_H_CM - d.half_extent)
            if all(not _squares_overlap((dx, dy), d.half_extent, pos, o.half_extent)
                   for o, pos in placed):
                placed.append((d, (dx, dy)))
                distractors.append((d, (dx, dy)))
                break
        else:
            raise RuntimeError("could not place distractor after 1000 attempts")
    lighting = LIGHTING_SHIFTED if lighting_shift else LIGHTING_DEFAULT
    return SceneSpec(target=obj, position=(tx, ty), domain=domain, lighting=lighting,
                     distractors=distractors, noise=noise, seed=seed)


@dataclass
class LabeledDataset:
    """Images plus centimeter position labels for one object in one domain."""
    images: np.ndarray       # (N, H, W, 4) float32
    labels: np.ndarray       # (N, 2) float64 cm
    object_id: int
    domain: str
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)


@dataclass
class PairedDataset:
    """The same scenes rendered in both domains; labels are shared."""
    sim: LabeledDataset
    real: LabeledDataset

    def __post_init__(self):
        if not np.array_equal(self.sim.labels, self.real.labels):
            raise ValueError("paired datasets must carry identical labels")

    def __len__(self):
        return len(self.sim)


def build_dataset(obj, domain=DOMAIN_SIM, grid_cm=None, random_count=None, seed=0,
                  paired=False, distractor_count=0, lighting_shift=False,
                  params=DEFAULT_PARAMS):
    """Render a labeled dataset on a grid or at random positions.

    paired=True renders every SceneSpec in both domains and returns a
    PairedDataset; per-scene noise seeds derive as seed + index.
    """
    if (grid_cm is None) == (random_count is None):
        raise ValueError("specify exactly one of grid_cm or random_count")
    specs = []
    if grid_cm is not None:
        for i, pos in enumerate(grid_positions(grid_cm, obj.footprint_cm)):
            specs.append(SceneSpec(target=obj, position=pos, domain=domain, seed=seed + i))
        meta = {"grid_cm": grid_cm, "seed": seed}
    else:
        rng = np.random.default_rng(seed)
        for i in range(random_count):
            s = sample_random_scene(rng, domain, obj, distractor_count=distractor_count,
                                    lighting_shift=lighting_shift, seed=seed + i)
            specs.append(s)
        meta = {"random_count": random_count, "seed": seed,
                "distractor_count": distractor_count, "lighting_shift": lighting_shift}
    if lighting_shift:
        specs = [replace(s, lighting=LIGHTING_SHIFTED) for s in specs]

    labels = np.array([s.position for s in specs], dtype=np.float64)

    def rendered(dom):
        imgs = np.stack([render(replace(s, domain=dom), params) for s in specs])
        return LabeledDataset(imgs, labels.copy(), obj.id, dom, dict(meta, paired=paired))

    if paired:
        return PairedDataset(sim=rendered(DOMAIN_SIM), real=rendered(DOMAIN_REAL))
    return rendered(domain)


def check_rgbd(img, params=DEFAULT_PARAMS):
    """Validate one RGB-D image: shape (H, W, 4), finite, in [0, 1]."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 4:
        raise ValueError(f"expected (H, W, 4) RGB-D image, got shape {arr.shape}")
    if arr.shape[:2] != (params.image_h, params.image_w):
        raise ValueError(f"expected {params.image_h}x{params.image_w} image, got {arr.shape[:2]}")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite values in RGB-D image")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("RGB-D values must lie in [0, 1]")
    return arr
