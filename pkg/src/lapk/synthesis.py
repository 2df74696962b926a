"""Synthetic volumes, ground-truth flows and patch-dataset export.

Phantoms stand in for anatomy: a handful of soft ellipsoids, a bright curved
diaphragm-like interface and band-limited texture, all smooth enough that
almost no spectral energy sits above |k| = pi/4.  Ground-truth deformations
come in three recipes: ``smooth`` (rescaled filtered noise), ``augmented``
(smooth flows passed through random smoothing / translation / rotation /
modulation) and ``real`` (multi-resolution image registration between two
deformed phantom states).  Pairs and patch datasets feed both the k-space
estimators and the companion trainer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate, map_coordinates

from .core import FlowField, fft3, ifft3, k_grids, warp
from .errors import FormatError
from .lap_kspace import Taper, _windowed_crop, make_taper
from .sampling import apply_mask

__all__ = [
    "FlowRecipe",
    "SynthPair",
    "TrainingSample",
    "gen_phantom",
    "gen_smooth_flow",
    "augment_flow",
    "make_pair",
    "gen_real_pair",
    "build_pair_pool",
    "export_patch_dataset",
    "read_patch_dataset",
    "DatasetReader",
]

RECIPE_WEIGHTS = {"real": 0.4, "smooth": 0.2, "augmented": 0.4}
MASK_KIND_CODES = {"full": 0, "vdpd": 1, "center": 2}
MASK_KIND_NAMES = {v: k for k, v in MASK_KIND_CODES.items()}

PHANTOM_SMOOTH_SIGMA = 2.5  # voxels; keeps spectral energy below pi/4
TEXTURE_LEVEL = 0.05


@dataclass
class FlowRecipe:
    kind: str = "smooth"
    max_disp: float = 10.0
    smoothing_sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in RECIPE_WEIGHTS:
            raise ValueError(f"unknown recipe '{self.kind}'")
        if self.max_disp <= 0:
            raise ValueError("max_disp must be positive")


@dataclass
class SynthPair:
    """Fully sampled k-space pair with its reference flow and recipe tag."""

    v_f: np.ndarray
    v_m: np.ndarray
    u_ref: FlowField
    recipe: str


@dataclass
class TrainingSample:
    center: tuple
    orientation: int
    mask_kind: str
    r: float
    fixed_patch: np.ndarray
    moving_patch: np.ndarray
    flow: np.ndarray


def _spectral_gaussian(dims, sigma: float) -> np.ndarray:
    kx, ky, kz = k_grids(dims)
    return np.exp(-0.5 * sigma**2 * (kx**2 + ky**2 + kz**2))


def _smooth_periodic(vol: np.ndarray, sigma: float) -> np.ndarray:
    return ifft3(fft3(vol) * _spectral_gaussian(vol.shape, sigma)).real


def gen_phantom(dims, seed: int) -> np.ndarray:
    """Random smooth phantom normalised to [0, 1]."""
    dims = tuple(int(n) for n in dims)
    if any(n < 32 for n in dims):
        raise ValueError("phantom dims must be >= 32 per axis")
    rng = np.random.default_rng(seed)
    grids = np.meshgrid(*(np.arange(n, dtype=float) for n in dims), indexing="ij")
    vol = np.zeros(dims)

    for _ in range(int(rng.integers(5, 13))):
        center = [rng.uniform(0.2, 0.8) * n for n in dims]
        semi = [rng.uniform(0.08, 0.25) * n for n in dims]
        intensity = rng.uniform(0.3, 1.0)
        m2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi))
        edge = np.mean(semi) / 1.5
        vol += intensity / (1.0 + np.exp(np.clip((np.sqrt(m2) - 1.0) * edge, -40, 40)))

    # bright curved interface across the volume
    zc = (
        0.55 * dims[2]
        + 0.10 * dims[2] * np.sin(2 * np.pi * grids[0] / dims[0] + rng.uniform(0, 2 * np.pi))
        + 0.08 * dims[2] * np.cos(2 * np.pi * grids[1] / dims[1] + rng.uniform(0, 2 * np.pi))
    )
    vol += 0.9 * np.exp(-((grids[2] - zc) ** 2) / (2 * 2.5**2))

    vol = _smooth_periodic(vol, PHANTOM_SMOOTH_SIGMA)

    noise = rng.standard_normal(dims)
    kx, ky, kz = k_grids(dims)
    lowpass = (kx**2 + ky**2 + kz**2) <= (np.pi / 4) ** 2
    texture = ifft3(fft3(noise) * lowpass).real
    texture *= TEXTURE_LEVEL / max(texture.std(), 1e-12)
    vol += texture

    vol -= vol.min()
    vol /= vol.max()
    return vol


def gen_smooth_flow(dims, max_disp: float, seed: int) -> FlowField:
    """Smoothly varying random flow with peak magnitude ``max_disp``.

    Each component is white noise convolved with an isotropic Gaussian of
    width ``min(dims)/8``; the field is rescaled so the largest voxel-wise
    Euclidean norm equals ``max_disp`` exactly.
    """
    dims = tuple(int(n) for n in dims)
    if max_disp <= 0:
        raise ValueError("max_disp must be positive")
    rng = np.random.default_rng(seed)
    sigma = min(dims) / 8.0
    gauss = _spectral_gaussian(dims, sigma)
    comps = [ifft3(fft3(rng.standard_normal(dims)) * gauss).real for _ in range(3)]
    vecs = np.stack(comps, axis=-1)
    mag = np.linalg.norm(vecs, axis=-1).max()
    vecs *= max_disp / max(mag, 1e-300)
    return FlowField(vecs)


def _gaussian_kernel_5(sigma: float = 1.0) -> np.ndarray:
    t = np.arange(-2, 3, dtype=float)
    g1 = np.exp(-(t**2) / (2 * sigma**2))
    g = g1.reshape(-1, 1, 1) * g1.reshape(1, -1, 1) * g1.reshape(1, 1, -1)
    return g / g.sum()


def _rotation_matrix(angles_deg) -> np.ndarray:
    a, b, c = np.radians(angles_deg)
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rx = np.array([[1, 0, 0], [0, cc, -sc], [0, sc, cc]])
    return rz @ ry @ rx


def augment_flow(
    flow: FlowField,
    seed: int,
    transforms=None,
    translation=None,
    angles=None,
) -> FlowField:
    """Randomly augment a flow field.

    A random non-empty subset of four transforms is applied, in order:
    5^3 Gaussian smoothing of each component, a constant translation in
    [-10, 10] per axis, a rigid rotation of the whole vector field by Euler
    angles in [-25, 25] degrees (z, y, x order), and voxel-wise modulation by
    a smooth positive field in [0.5, 1.5].  Tests may pin the subset and the
    translation/rotation parameters.
    """
    rng = np.random.default_rng(seed)
    all_t = ("smooth", "translate", "rotate", "multiply")
    if transforms is None:
        chosen = ()
        while not chosen:
            chosen = tuple(t for t in all_t if rng.random() < 0.5)
    else:
        chosen = tuple(transforms)
        unknown = set(chosen) - set(all_t)
        if unknown:
            raise ValueError(f"unknown transforms {sorted(unknown)}")

    vecs = flow.vectors.copy()
    dims = flow.dims

    if "smooth" in chosen:
        kern = _gaussian_kernel_5()
        vecs = np.stack(
            [correlate(vecs[..., c], kern, mode="nearest") for c in range(3)], axis=-1
        )
    if "translate" in chosen:
        t = np.asarray(
            translation if translation is not None else rng.uniform(-10, 10, 3),
            dtype=float,
        )
        vecs = vecs + t
    if "rotate" in chosen:
        ang = np.asarray(
            angles if angles is not None else rng.uniform(-25, 25, 3), dtype=float
        )
        rot = _rotation_matrix(ang)
        ctr = np.array([(n - 1) / 2.0 for n in dims])
        ix, iy, iz = np.meshgrid(*(np.arange(n, dtype=float) for n in dims), indexing="ij")
        rel = np.stack([ix - ctr[0], iy - ctr[1], iz - ctr[2]])
        coords = np.einsum("ij,j...->i...", rot.T, rel) + ctr[:, None, None, None]
        sampled = np.stack(
            [map_coordinates(vecs[..., c], coords, order=1, mode="nearest") for c in range(3)]
        )
        vecs = np.moveaxis(np.einsum("ij,j...->i...", rot, sampled), 0, -1)
    if "multiply" in chosen:
        m = gen_smooth_flow(dims, 1.0, int(rng.integers(0, 2**31))).vectors[..., 0]
        m = (m - m.min()) / max(m.max() - m.min(), 1e-300) + 0.5
        vecs = vecs * m[..., None]

    return FlowField(vecs, flow.reliability.copy())


def make_pair(phantom: np.ndarray, flow: FlowField, mask_f=None, mask_m=None):
    """Fixed/moving k-space pair under a known deformation.

    ``v_f`` transforms the phantom itself, ``v_m`` the phantom deformed by
    ``flow``; either side may be retrospectively undersampled.  The returned
    reference flow displaces phantom content onto the deformed state, so an
    estimator that treats the deformed volume as its warp target recovers it.
    """
    v_f = fft3(np.asarray(phantom, dtype=float))
    v_m = fft3(warp(phantom, flow))
    if mask_f is not None:
        v_f = apply_mask(v_f, mask_f)
    if mask_m is not None:
        v_m = apply_mask(v_m, mask_m)
    return v_f, v_m, flow


def gen_real_pair(phantom: np.ndarray, seed: int, max_disp: float = 6.0) -> SynthPair:
    """A pair whose reference is itself a registration output.

    Two smooth deformations of the same phantom are registered with the
    multi-resolution image-space method; the estimated field is the reference
    carried by the pair ("realistic" motion rather than a synthetic formula).
    """
    from .lap_image import estimate_flow_multires

    rng = np.random.default_rng(seed)
    dims = phantom.shape
    f1 = gen_smooth_flow(dims, rng.uniform(0.3, 0.7) * max_disp, int(rng.integers(2**31)))
    f2 = gen_smooth_flow(dims, rng.uniform(0.5, 1.0) * max_disp, int(rng.integers(2**31)))
    state_a = warp(phantom, f1)
    state_b = warp(phantom, f2)
    u_real = estimate_flow_multires(state_b, state_a)
    return SynthPair(fft3(state_a), fft3(state_b), u_real, "real")


def build_pair_pool(dims, counts: dict, max_disp: float, seed: int) -> list:
    """Pool of synthetic pairs per recipe, e.g. ``{"smooth": 2, ...}``."""
    pool = []
    idx = 0
    for recipe in ("real", "smooth", "augmented"):
        for _ in range(int(counts.get(recipe, 0))):
            sub = np.random.SeedSequence([seed, idx]).generate_state(1)[0]
            rng = np.random.default_rng(sub)
            phantom = gen_phantom(dims, int(rng.integers(2**31)))
            if recipe == "real":
                pool.append(gen_real_pair(phantom, int(rng.integers(2**31)), max_disp))
            else:
                flow = gen_smooth_flow(dims, max_disp, int(rng.integers(2**31)))
                if recipe == "augmented":
                    flow = augment_flow(flow, int(rng.integers(2**31)))
                v_f, v_m, u_ref = make_pair(phantom, flow)
                pool.append(SynthPair(v_f, v_m, u_ref, recipe))
            idx += 1
    return pool


def _record_dtype(w: int) -> np.dtype:
    return np.dtype(
        [
            ("center", "<i4", 3),
            ("orientation", "<i4"),
            ("mask_kind", "<i4"),
            ("r", "<f4"),
            ("patches", "<f4", (4, w**3)),
            ("flow", "<f4", 3),
        ]
    )


def _patch_channels(img: np.ndarray, center, taper: Taper) -> np.ndarray:
    patch = fft3(_windowed_crop(img, center, taper)).astype(np.complex64)
    flat_re = patch.real.ravel(order="F")
    flat_im = patch.imag.ravel(order="F")
    return flat_re, flat_im


def export_patch_dataset(
    pairs,
    n_samples: int,
    w: int,
    seed: int,
    path,
    masks=None,
    taper: Taper | None = None,
) -> None:
    """Write a LAPK-DS v1 patch dataset drawn from a pool of pairs.

    Samples are drawn at uniformly random interior centres.  Recipes follow
    the 40/20/40 real/smooth/augmented mixture restricted to the recipes
    present in the pool; masks (acceleration and kind) are drawn uniformly
    from ``masks`` (``None`` entries mean fully sampled).  Consecutive even/
    odd samples share their centre and differ only in slicing orientation
    (1: along z, 2: along x) so orthogonal runs can be merged downstream.
    Deterministic and byte-identical for a fixed seed.
    """
    if w % 2 == 0:
        raise ValueError("patch size must be odd")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one pair")
    if masks is None:
        masks = [None]
    if taper is None:
        taper = make_taper(w)
    if taper.support != w:
        raise ValueError("taper support must equal patch size")

    recipes = sorted({p.recipe for p in pairs})
    weights = np.array([RECIPE_WEIGHTS[r] for r in recipes])
    weights = weights / weights.sum()
    by_recipe = {r: [i for i, p in enumerate(pairs) if p.recipe == r] for r in recipes}

    dims = pairs[0].v_f.shape
    margin = w // 2
    if any(n <= 2 * margin for n in dims):
        raise ValueError("volume too small for interior patch centres")

    n_events = (int(n_samples) + 1) // 2
    events = []
    for e in range(n_events):
        rng = np.random.default_rng(np.random.SeedSequence([seed, e]))
        recipe = recipes[rng.choice(len(recipes), p=weights)]
        pair_idx = int(rng.choice(by_recipe[recipe]))
        mask_idx = int(rng.integers(len(masks)))
        center = tuple(int(rng.integers(margin, n - margin)) for n in dims)
        events.append((pair_idx, mask_idx, center))

    rec_dtype = _record_dtype(w)
    header = f"LAPK-DS v1\ncount={int(n_samples)} w={w} channels=4\n".encode("ascii")

    # group sample indices by (pair, mask) so zero-filled images are reused
    groups: dict = {}
    for i in range(int(n_samples)):
        pair_idx, mask_idx, center = events[i // 2]
        groups.setdefault((pair_idx, mask_idx), []).append(i)

    with open(path, "wb") as f:
        f.write(header)
        base = f.tell()
        for (pair_idx, mask_idx), indices in groups.items():
            pair = pairs[pair_idx]
            mask = masks[mask_idx]
            if mask is None:
                v_f, v_m = pair.v_f, pair.v_m
                kind, r_val = "full", 1.0
            else:
                v_f = apply_mask(pair.v_f, mask)
                v_m = apply_mask(pair.v_m, mask)
                kind, r_val = mask.kind, mask.r_actual
            img_f = ifft3(v_f)
            img_m = ifft3(v_m)
            for i in indices:
                _, _, center = events[i // 2]
                rec = np.zeros(1, dtype=rec_dtype)
                rec["center"][0] = center
                rec["orientation"][0] = 1 if i % 2 == 0 else 2
                rec["mask_kind"][0] = MASK_KIND_CODES[kind]
                rec["r"][0] = r_val
                fr, fi = _patch_channels(img_f, center, taper)
                mr, mi = _patch_channels(img_m, center, taper)
                rec["patches"][0, 0] = fr
                rec["patches"][0, 1] = fi
                rec["patches"][0, 2] = mr
                rec["patches"][0, 3] = mi
                rec["flow"][0] = pair.u_ref.vectors[center]
                f.seek(base + i * rec_dtype.itemsize)
                f.write(rec.tobytes())

    counts = {r: 0 for r in recipes}
    kind_counts: dict = {}
    for i in range(int(n_samples)):
        pair_idx, mask_idx, _ = events[i // 2]
        counts[pairs[pair_idx].recipe] += 1
        mk = "full" if masks[mask_idx] is None else masks[mask_idx].kind
        kind_counts[mk] = kind_counts.get(mk, 0) + 1
    with open(str(path) + ".manifest.csv", "w", newline="") as mf:
        writer = csv.writer(mf)
        writer.writerow(["key", "value"])
        writer.writerow(["seed", seed])
        writer.writerow(["n_samples", int(n_samples)])
        writer.writerow(["w", w])
        writer.writerow(["n_pairs", len(pairs)])
        writer.writerow(["n_masks", len(masks)])
        for r in recipes:
            writer.writerow([f"count_{r}", counts[r]])
        for k in sorted(kind_counts):
            writer.writerow([f"count_mask_{k}", kind_counts[k]])


class DatasetReader:
    """Memory-mapped view of a LAPK-DS v1 file."""

    def __init__(self, path):
        self.path = path
        with open(path, "rb") as f:
            magic = f.readline().decode("ascii").strip()
            if magic != "LAPK-DS v1":
                raise FormatError(f"expected 'LAPK-DS v1', got '{magic}'")
            meta = f.readline().decode("ascii").strip()
            fields = dict(tok.split("=", 1) for tok in meta.split())
            self.count = int(fields["count"])
            self.w = int(fields["w"])
            self.channels = int(fields["channels"])
            self._offset = f.tell()
        if self.channels != 4:
            raise FormatError(f"expected 4 channels, got {self.channels}")
        self._dtype = _record_dtype(self.w)
        if self.count:
            self._records = np.memmap(
                path, dtype=self._dtype, mode="r", offset=self._offset, shape=(self.count,)
            )
        else:
            self._records = np.empty(0, dtype=self._dtype)

    def __len__(self):
        return self.count

    def sample(self, i: int) -> TrainingSample:
        rec = self._records[i]
        w = self.w
        chans = [
            rec["patches"][c].reshape((w, w, w), order="F").astype(np.float64)
            for c in range(4)
        ]
        return TrainingSample(
            center=tuple(int(c) for c in rec["center"]),
            orientation=int(rec["orientation"]),
            mask_kind=MASK_KIND_NAMES[int(rec["mask_kind"])],
            r=float(rec["r"]),
            fixed_patch=chans[0] + 1j * chans[1],
            moving_patch=chans[2] + 1j * chans[3],
            flow=rec["flow"].astype(np.float64),
        )

    def flows(self) -> np.ndarray:
        return self._records["flow"].astype(np.float64)

    def __iter__(self):
        for i in range(self.count):
            yield self.sample(i)


def read_patch_dataset(path) -> DatasetReader:
    return DatasetReader(path)
