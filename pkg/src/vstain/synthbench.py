"""Synthetic paired benchmark with analytic targets.

Sources are smooth RGB blob fields: per channel, a clipped sum of Gaussian
bumps defined on the continuous [-1, 1]^2 domain and sampled at pixel
centers, so one seed yields the same underlying field at every resolution.
Targets are deterministic functions of the clean source:

``pointwise``
    ``t(x) = 1 - s(x)`` with channels permuted (R, G, B) <- (B, R, G).
``contextual``
    The 3 x 3 mean of the channel-averaged source (edge replicated) is
    compared with 0.5; above it the pixel gets ``HIGH_CODE`` (a brown,
    DAB-like color), otherwise ``LOW_CODE`` (pale background).
``longrange``
    ``t(x) = s(x)`` when the image-wide red mean is at least the
    image-wide green mean, else black. No bounded neighborhood of ``x``
    determines the gate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .imagecore import RasterImage, make_grid, read_image, write_image
from .training import PairedPatch

MAPPINGS = ("pointwise", "contextual", "longrange")
CHANNEL_PERMUTATION = (2, 0, 1)
LOW_CODE = (0.92, 0.88, 0.90)
HIGH_CODE = (0.55, 0.33, 0.18)
MANIFEST_SCHEMA = "vstain.manifest/1"


@dataclass
class SynthSpec:
    seed: int = 0
    size: int = 32
    blob_count: int = 6
    mapping: str = "contextual"
    noise_std: float = 0.0
    sigma_range: tuple[float, float] = (0.2, 0.45)
    amplitude_range: tuple[float, float] = (0.3, 0.9)

    def __post_init__(self):
        if self.mapping not in MAPPINGS:
            raise ValueError(f"mapping must be one of {MAPPINGS}, got {self.mapping!r}")
        if self.size < 16:
            raise ValueError("synthetic images must be at least 16 pixels wide")
        if self.blob_count < 1:
            raise ValueError("blob_count must be positive")
        self.sigma_range = tuple(self.sigma_range)
        self.amplitude_range = tuple(self.amplitude_range)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_range"] = list(self.sigma_range)
        d["amplitude_range"] = list(self.amplitude_range)
        return d


def blob_field(spec: SynthSpec, size: int | None = None) -> np.ndarray:
    """Clean ``size x size x 3`` source field for ``spec.seed`` (defaults to ``spec.size``)."""
    size = spec.size if size is None else size
    rng = np.random.default_rng(spec.seed)
    coords = make_grid(size, size).coords
    x, y = coords[..., 0], coords[..., 1]
    field = np.zeros((size, size, 3))
    for ch in range(3):
        centers = rng.uniform(-1.0, 1.0, size=(spec.blob_count, 2))
        sigmas = rng.uniform(*spec.sigma_range, size=spec.blob_count)
        amps = rng.uniform(*spec.amplitude_range, size=spec.blob_count)
        for (cx, cy), sg, a in zip(centers, sigmas, amps):
            field[..., ch] += a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sg * sg))
    return np.clip(field, 0.0, 1.0)


def apply_mapping(source: np.ndarray, mapping: str) -> np.ndarray:
    if mapping == "pointwise":
        return 1.0 - source[..., CHANNEL_PERMUTATION]
    if mapping == "contextual":
        local = uniform_filter(source.mean(axis=2), size=3, mode="nearest")
        high = (local > 0.5)[..., None]
        return np.where(high, np.array(HIGH_CODE), np.array(LOW_CODE))
    if mapping == "longrange":
        gate = source[..., 0].mean() >= source[..., 1].mean()
        return source * float(gate)
    raise ValueError(f"unknown mapping {mapping!r}")


def generate_pair(spec: SynthSpec, size: int | None = None) -> PairedPatch:
    """Source (with optional noise) and its exact target for ``spec.seed``."""
    clean = blob_field(spec, size)
    target = apply_mapping(clean, spec.mapping)
    source = clean
    if spec.noise_std > 0:
        noise_rng = np.random.default_rng([spec.seed, 1])
        source = np.clip(clean + noise_rng.normal(0.0, spec.noise_std, clean.shape), 0.0, 1.0)
    return PairedPatch(RasterImage(source), RasterImage(np.clip(target, 0.0, 1.0)), id=pair_id(spec))


def downsample(image: RasterImage, factor: int) -> RasterImage:
    """Box-filter ``image`` by an integer ``factor`` (area averaging)."""
    h, w, c = image.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} must divide the image size {h}x{w}")
    blocks = image.data.reshape(h // factor, factor, w // factor, factor, c)
    return RasterImage(blocks.mean(axis=(1, 3)))


def downsample_pair(pair: PairedPatch, factor: int) -> PairedPatch:
    return PairedPatch(downsample(pair.source, factor), downsample(pair.target, factor), id=pair.id)


def pair_id(spec: SynthSpec) -> str:
    return f"{spec.mapping}_{spec.seed:06d}"


def generate_dataset(spec: SynthSpec, n: int, out_dir, bit_depth: int = 16) -> dict:
    """Write ``n`` pairs (seeds ``seed .. seed + n - 1``) plus ``manifest.json``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for k in range(n):
        sub = SynthSpec(**{**spec.to_dict(), "seed": spec.seed + k})
        pair = generate_pair(sub)
        src = write_image(out / "source" / f"{pair.id}.png", pair.source, bit_depth)
        tgt = write_image(out / "target" / f"{pair.id}.png", pair.target, bit_depth)
        pairs.append(
            {
                "id": pair.id,
                "seed": sub.seed,
                "mapping": sub.mapping,
                "source": str(src.relative_to(out)),
                "target": str(tgt.relative_to(out)),
                "height": pair.source.height,
                "width": pair.source.width,
            }
        )
    manifest = {"schema": MANIFEST_SCHEMA, "spec": spec.to_dict(), "n": n, "pairs": pairs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir) -> list[PairedPatch]:
    """Load every pair listed in ``<data_dir>/manifest.json``."""
    root = Path(data_dir)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"unsupported manifest schema {manifest.get('schema')!r}")
    return [
        PairedPatch(read_image(root / e["source"]), read_image(root / e["target"]), id=e["id"])
        for e in manifest["pairs"]
    ]
