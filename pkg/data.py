"""
Synthetic fixation datasets and file I/O.

Formats:
- PFM float maps: "Pf" (one channel) or "PF" (three channels, interleaved),
  then "width height", then the scale whose sign gives the byte order
  (negative = little-endian). Pixel rows are stored bottom-to-top, so rows
  are flipped on read and write to keep the top-left internal origin.
  Values are float32 on disk.
- Fixation CSV: header "row,col", zero-based integer coordinates.
- JSON lines: one pydantic model per line.
- Dataset directory: manifest.json plus images/, fixations/ and gt/ files.
"""

import csv
from concurrent import futures
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core import FixationSet, PixelDistribution
from errors import FormatError, InvalidInputError
from models import DatasetManifest, GtParams, SampleEntry, SynthConfig
from pipeline import make_gt_distribution

CSV_HEADER = ["row", "col"]
MANIFEST_NAME = "manifest.json"

ModelT = TypeVar("ModelT", bound=BaseModel)


class Blob(BaseModel):
    """One salient Gaussian blob of a synthetic image"""

    model_config = ConfigDict(frozen=True)

    row: float
    col: float
    sigma: float = Field(..., gt=0)
    contrast: float = Field(..., gt=0)


class Sample(BaseModel):
    """Image stack (C, H, W), its fixations and the GT distribution"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    image: np.ndarray
    fixations: FixationSet
    gt: PixelDistribution
    blobs: List[Blob] = Field(default_factory=list)


def _sample_fixations(
    rng: np.random.Generator, config: SynthConfig, blobs: List[Blob]
) -> List[Tuple[int, int]]:
    """
    Mixture of blob-centered Gaussians (weighted by contrast, sigma half the
    blob's) and an image-center Gaussian of sigma min(H, W) / 8; rounded,
    out-of-image draws are redrawn.
    """
    height, width = config.height, config.width
    weights = np.array([b.contrast for b in blobs])
    weights = weights / weights.sum()
    center_sigma = min(height, width) / 8.0

    points: List[Tuple[int, int]] = []
    while len(points) < config.fixations_per_image:
        if rng.random() < config.center_bias_weight:
            mean = ((height - 1) / 2.0, (width - 1) / 2.0)
            sigma = center_sigma
        else:
            blob = blobs[rng.choice(len(blobs), p=weights)]
            mean = (blob.row, blob.col)
            sigma = blob.sigma / 2.0
        row, col = np.rint(rng.normal(mean, sigma)).astype(int)
        if 0 <= row < height and 0 <= col < width:
            points.append((int(row), int(col)))
    return points


def _generate_one(config: SynthConfig, seed_seq: np.random.SeedSequence) -> Sample:
    rng = np.random.default_rng(seed_seq)
    height, width = config.height, config.width
    size = min(height, width)

    blobs = []
    for _ in range(rng.integers(config.blobs_min, config.blobs_max + 1)):
        sigma = rng.uniform(0.04, 0.08) * size
        margin = min(2.0 * sigma, (size - 1) / 2.0)
        blobs.append(
            Blob(
                row=rng.uniform(margin, height - 1 - margin),
                col=rng.uniform(margin, width - 1 - margin),
                sigma=sigma,
                contrast=rng.uniform(0.5, 1.0),
            )
        )

    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    image = config.noise_sigma * rng.standard_normal((config.channels, height, width))
    for blob in blobs:
        color = np.ones(1) if config.channels == 1 else rng.uniform(0.5, 1.0, size=3)
        bump = np.exp(-((rows - blob.row) ** 2 + (cols - blob.col) ** 2) / (2.0 * blob.sigma**2))
        image += color[:, None, None] * (blob.contrast * bump)[None]

    fixations = FixationSet(
        points=_sample_fixations(rng, config, blobs), image_height=height, image_width=width
    )
    return Sample(
        image=image,
        fixations=fixations,
        gt=make_gt_distribution(fixations, config.gt),
        blobs=blobs,
    )


def generate(config: SynthConfig, jobs: int = 1) -> List[Sample]:
    """
    Deterministic synthetic dataset.

    Each image draws from its own substream of config.seed, so the result
    does not depend on jobs.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_images)
    if jobs <= 1:
        return [_generate_one(config, s) for s in seeds]
    with futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda s: _generate_one(config, s), seeds))


def fixed_split(n_samples: int, n_val: int) -> Tuple[np.ndarray, np.ndarray]:
    """Leading samples train, trailing n_val validate"""
    if not 0 < n_val < n_samples:
        raise InvalidInputError(f"Need 0 < n_val < {n_samples}, got {n_val}")
    indices = np.arange(n_samples)
    return indices[: n_samples - n_val], indices[n_samples - n_val :]


def random_splits(
    n_samples: int, n_val: int, n_splits: int, seed: int = 0
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Repeated random train/validation partitions, one substream per split"""
    if not 0 < n_val < n_samples:
        raise InvalidInputError(f"Need 0 < n_val < {n_samples}, got {n_val}")
    splits = []
    for split in range(n_splits):
        order = np.random.default_rng([seed, split]).permutation(n_samples)
        splits.append((np.sort(order[n_val:]), np.sort(order[:n_val])))
    return splits


def write_pfm(path: Path, values: np.ndarray) -> None:
    """Write a (H, W) or (3, H, W) map as little-endian float32 PFM"""
    data = np.asarray(values, dtype=np.float64)
    if data.ndim == 3 and data.shape[0] == 1:
        data = data[0]
    if data.ndim == 2:
        magic, pixels = "Pf", data
    elif data.ndim == 3 and data.shape[0] == 3:
        magic, pixels = "PF", np.moveaxis(data, 0, -1)
    else:
        raise InvalidInputError(f"PFM holds 1 or 3 channels, got shape {data.shape}")

    height, width = pixels.shape[:2]
    header = f"{magic}\n{width} {height}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(np.flipud(pixels), dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_pfm(path: Path) -> np.ndarray:
    """
    Read a PFM file as float64: (H, W) for "Pf", (3, H, W) for "PF".

    Raises:
        FormatError: On a malformed header or a short pixel block
    """
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4:
        raise FormatError(f"{path}: truncated PFM header")
    magic, dims, scale_line, body = parts

    channels = {b"Pf": 1, b"PF": 3}.get(magic.strip())
    if channels is None:
        raise FormatError(f"{path}: unrecognized PFM identifier {magic[:8]!r}")
    try:
        width, height = (int(v) for v in dims.split())
        scale = float(scale_line)
    except ValueError:
        raise FormatError(f"{path}: malformed PFM dimensions or scale")
    if width <= 0 or height <= 0 or scale == 0:
        raise FormatError(f"{path}: invalid PFM dimensions {width}x{height} or scale {scale}")

    count = width * height * channels
    if len(body) != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} pixel bytes, found {len(body)}")
    dtype = "<f4" if scale < 0 else ">f4"
    pixels = np.frombuffer(body, dtype=dtype).astype(np.float64)
    pixels = np.flipud(pixels.reshape(height, width, channels))
    if channels == 1:
        return np.ascontiguousarray(pixels[..., 0])
    return np.ascontiguousarray(np.moveaxis(pixels, -1, 0))


def write_fixations_csv(path: Path, fix: FixationSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(fix.points)


def read_fixations_csv(path: Path, height: int, width: int) -> FixationSet:
    """
    Read "row,col" fixations for a height x width image.

    Raises:
        FormatError: On a wrong header, non-integer fields or out-of-bounds points
    """
    points = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise FormatError(f"{path}: expected header 'row,col'")
        for line_number, record in enumerate(reader, start=2):
            if not record:
                continue
            try:
                row, col = (int(v) for v in record)
            except ValueError:
                raise FormatError(f"{path}:{line_number}: expected two integers, got {record}")
            if not (0 <= row < height and 0 <= col < width):
                raise FormatError(
                    f"{path}:{line_number}: fixation ({row}, {col}) outside {height}x{width} image"
                )
            points.append((row, col))
    return FixationSet(points=points, image_height=height, image_width=width)


def write_jsonl(path: Path, records: Iterable[BaseModel]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")


def read_jsonl(path: Path, model: Type[ModelT]) -> List[ModelT]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(model.model_validate_json(line))
            except ValueError as e:
                raise FormatError(f"{path}:{line_number}: {e}")
    return records


def write_dataset(
    out_dir: Path, samples: Sequence[Sample], gt_params: GtParams, synth: Optional[SynthConfig] = None
) -> DatasetManifest:
    """Write samples and a manifest; returns the manifest"""
    if not samples:
        raise InvalidInputError("Cannot write an empty dataset")
    out_dir = Path(out_dir)
    for sub in ("images", "fixations", "gt"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    channels, height, width = samples[0].image.shape
    entries = []
    for index, sample in enumerate(samples):
        entry = SampleEntry(
            image=f"images/{index:05d}.pfm",
            fixations=f"fixations/{index:05d}.csv",
            gt=f"gt/{index:05d}.pfm",
        )
        write_pfm(out_dir / entry.image, sample.image)
        write_fixations_csv(out_dir / entry.fixations, sample.fixations)
        write_pfm(out_dir / entry.gt, sample.gt.values)
        entries.append(entry)

    manifest = DatasetManifest(
        height=height, width=width, channels=channels, gt=gt_params, synth=synth, samples=entries
    )
    (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return manifest


def read_dataset(data_dir: Path) -> Tuple[DatasetManifest, List[Sample]]:
    """
    Load a dataset directory.

    GT distributions are rebuilt from the fixations with the manifest's
    GtParams; the stored GT maps are float32 copies for external tools.
    """
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise InvalidInputError(f"No {MANIFEST_NAME} in {data_dir}")
    try:
        manifest = DatasetManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise FormatError(f"{manifest_path}: {e}")

    samples = []
    for entry in manifest.samples:
        image = read_pfm(data_dir / entry.image)
        if image.ndim == 2:
            image = image[None]
        if image.shape != (manifest.channels, manifest.height, manifest.width):
            raise FormatError(f"{entry.image}: shape {image.shape} does not match manifest")
        fix = read_fixations_csv(data_dir / entry.fixations, manifest.height, manifest.width)
        samples.append(Sample(image=image, fixations=fix, gt=make_gt_distribution(fix, manifest.gt)))
    return manifest, samples
