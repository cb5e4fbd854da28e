"""
Synthetic Scenes
Seeded generator for the four-task toy dataset, batching, and the on-disk
dataset cache (MTKP tensors + index.json)

Each scene paints 2-5 shapes (disc, rect, triangle) far-to-near over a
background. Every shape owns a class, a flat colour and a slightly tilted
depth plane confined to its own depth band, so a nearer shape is always
strictly shallower than whatever it covers.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from mtscan import checkpoint
from mtscan.config import Config
from mtscan.errors import CheckpointError, ShapeError
from mtscan.models import DatasetIndex
from mtscan.tensor import Tensor
from mtscan.utils import make_rng, resolve_threads

logger = logging.getLogger(Config.LOGGER_NAME)

SHAPE_KINDS = ("disc", "rect", "triangle")
MIN_EXTENT = 32

# Depth bands live inside (NEAR, FAR); background sits at depth 1
NEAR_DEPTH = 0.2
FAR_DEPTH = 0.8


@dataclass
class SyntheticScene:
    """One sample: image [H,W,3], semseg [H,W] int, depth [H,W], normal [H,W,3], boundary [H,W] int"""

    image: np.ndarray
    semseg: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    boundary: np.ndarray


# ============================================================================
# Label derivations
# ============================================================================

def class_transitions(semseg: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of a different class"""
    edges = np.zeros(semseg.shape, dtype=bool)
    vertical = semseg[1:, :] != semseg[:-1, :]
    horizontal = semseg[:, 1:] != semseg[:, :-1]
    edges[1:, :] |= vertical
    edges[:-1, :] |= vertical
    edges[:, 1:] |= horizontal
    edges[:, :-1] |= horizontal
    return edges


def dilate(mask: np.ndarray) -> np.ndarray:
    """3x3 binary dilation (one pixel in every direction)"""
    padded = np.pad(mask, 1)
    height, width = mask.shape
    out = np.zeros_like(mask)
    for dy in range(3):
        for dx in range(3):
            out |= padded[dy:dy + height, dx:dx + width]
    return out


def normals_from_depth(depth: np.ndarray) -> np.ndarray:
    """Unit normals (-dz/dx, -dz/dy, 1) from central differences"""
    dz_dy, dz_dx = np.gradient(depth)
    normal = np.stack([-dz_dx, -dz_dy, np.ones_like(depth)], axis=-1)
    return normal / np.linalg.norm(normal, axis=-1, keepdims=True)


# ============================================================================
# Generator
# ============================================================================

def _shape_mask(kind: str, rng: np.random.Generator, ys: np.ndarray, xs: np.ndarray,
                height: int, width: int) -> np.ndarray:
    cy, cx = rng.uniform(0.2, 0.8) * height, rng.uniform(0.2, 0.8) * width
    size = min(height, width)
    if kind == "disc":
        radius = rng.uniform(size / 8, size / 4)
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2
    if kind == "rect":
        half_h, half_w = rng.uniform(size / 10, size / 4, size=2)
        return (np.abs(ys - cy) <= half_h) & (np.abs(xs - cx) <= half_w)
    # Triangle from three vertices around the centre; inside = same side of all edges
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
    radii = rng.uniform(size / 6, size / 3, size=3)
    vy, vx = cy + radii * np.sin(angles), cx + radii * np.cos(angles)
    signs = []
    for i in range(3):
        j = (i + 1) % 3
        signs.append((vx[j] - vx[i]) * (ys - vy[i]) - (vy[j] - vy[i]) * (xs - vx[i]))
    signs = np.stack(signs)
    return np.all(signs >= 0, axis=0) | np.all(signs <= 0, axis=0)


def generate_scene(seed: int, height: int = Config.IMAGE_SIZE, width: int = Config.IMAGE_SIZE,
                   num_classes: int = Config.SEMSEG_CLASSES, n_shapes: Optional[int] = None,
                   index: int = 0) -> SyntheticScene:
    """
    Render one synthetic scene

    Args:
        seed: Base seed
        height, width: Image extents (each >= 32)
        num_classes: K foreground classes (semseg has K+1 with background 0)
        n_shapes: Shape count (random in 2..5 if None; 0 gives an empty scene)
        index: Sample index selecting an independent stream under `seed`

    Returns:
        SyntheticScene, bit-identical for identical arguments
    """
    if height < MIN_EXTENT or width < MIN_EXTENT:
        raise ShapeError(f"scene extents must be >= {MIN_EXTENT}, got {(height, width)}")
    rng = make_rng(seed, index)
    count = int(rng.integers(2, 6)) if n_shapes is None else n_shapes

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ys, xs = ys + 0.5, xs + 0.5
    semseg = np.zeros((height, width), dtype=np.int64)
    depth = np.ones((height, width), dtype=np.float64)
    image = np.broadcast_to(rng.uniform(0.0, 0.3, size=3), (height, width, 3)).copy()

    band = (FAR_DEPTH - NEAR_DEPTH) / max(count, 1)
    for layer in range(count):
        # Painted far to near: layer 0 takes the farthest band
        low = FAR_DEPTH - (layer + 1) * band
        base = low + band * rng.uniform(0.3, 0.7)
        # Tilt keeps the plane within +-0.2 band over the image
        tilt = rng.uniform(-1.0, 1.0, size=2) * 0.2 * band / max(height, width)
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        mask = _shape_mask(kind, rng, ys, xs, height, width)
        label = int(rng.integers(1, num_classes + 1))
        colour = rng.uniform(0.3, 1.0, size=3)
        plane = base + tilt[0] * (ys - height / 2) + tilt[1] * (xs - width / 2)
        semseg[mask] = label
        depth[mask] = plane[mask]
        image[mask] = colour

    image = np.clip(image + rng.normal(0.0, 0.02, size=image.shape), 0.0, 1.0)
    boundary = dilate(class_transitions(semseg)).astype(np.int64)
    return SyntheticScene(image=image, semseg=semseg, depth=depth,
                          normal=normals_from_depth(depth), boundary=boundary)


def make_dataset(seed: int, count: int, height: int = Config.IMAGE_SIZE, width: int = Config.IMAGE_SIZE,
                 num_classes: int = Config.SEMSEG_CLASSES, workers: Optional[int] = None) -> List[SyntheticScene]:
    """`count` scenes; sample i uses stream (seed, i), generated on up to MTK_THREADS workers"""
    threads = resolve_threads(workers)
    render = lambda i: generate_scene(seed, height, width, num_classes, index=i)
    if threads == 1:
        return [render(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(render, range(count)))


# ============================================================================
# Batching
# ============================================================================

def task_target(task_name: str, scenes: Sequence[SyntheticScene]) -> np.ndarray:
    """
    Stacked target for one task

    Returns:
        semseg/boundary: int [B, H, W]; depth: [B, 1, H, W]; normal: [B, 3, H, W]
    """
    if task_name == "semseg":
        return np.stack([s.semseg for s in scenes])
    if task_name == "boundary":
        return np.stack([s.boundary for s in scenes])
    if task_name == "depth":
        return np.stack([s.depth for s in scenes])[:, None]
    if task_name == "normal":
        return np.stack([s.normal for s in scenes]).transpose(0, 3, 1, 2)
    raise KeyError(f"synthetic scenes carry no labels for task {task_name!r}")


def make_batch(scenes: Sequence[SyntheticScene], task_names: Sequence[str],
               dtype=np.float64) -> Tuple[Tensor, Dict[str, np.ndarray]]:
    """(image Tensor[B,H,W,3], {task: target})"""
    image = Tensor(np.stack([s.image for s in scenes]).astype(dtype))
    targets = {}
    for name in task_names:
        target = task_target(name, scenes)
        targets[name] = target if target.dtype.kind == "i" else target.astype(dtype)
    return image, targets


def iterate_batches(scenes: Sequence[SyntheticScene], batch_size: int,
                    rng: np.random.Generator) -> Iterator[List[SyntheticScene]]:
    """Endless shuffled epochs; the last partial batch of an epoch is dropped"""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    if len(scenes) < batch_size:
        raise ValueError(f"dataset of {len(scenes)} scenes is smaller than batch size {batch_size}")
    while True:
        order = rng.permutation(len(scenes))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield [scenes[i] for i in order[start:start + batch_size]]


def sequential_batches(scenes: Sequence[SyntheticScene], batch_size: int) -> Iterator[List[SyntheticScene]]:
    """In-order batches covering every scene once (evaluation)"""
    for start in range(0, len(scenes), batch_size):
        yield list(scenes[start:start + batch_size])


# ============================================================================
# Dataset cache
# ============================================================================

def save_dataset(directory: Union[str, Path], scenes: Sequence[SyntheticScene],
                 seed: int, num_classes: int) -> DatasetIndex:
    """Write one MTKP file per scene plus index.json"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.mtkp"
        checkpoint.save(directory / name, {
            "image": scene.image.astype(np.float64),
            "semseg": scene.semseg.astype(np.float64),
            "depth": scene.depth,
            "normal": scene.normal,
            "boundary": scene.boundary.astype(np.float64),
        })
        files.append(name)
    height, width = scenes[0].semseg.shape if scenes else (0, 0)
    index = DatasetIndex(seed=seed, H=height, W=width, K=num_classes, count=len(files), files=files)
    (directory / "index.json").write_text(index.model_dump_json(indent=2))
    logger.info(f"Saved {len(files)} scenes to {directory}")
    return index


def load_dataset(directory: Union[str, Path]) -> Tuple[DatasetIndex, List[SyntheticScene]]:
    """
    Read a cache written by save_dataset

    Raises:
        CheckpointError: missing index or scene files
    """
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise CheckpointError(f"no dataset index at {index_path}")
    index = DatasetIndex.model_validate(json.loads(index_path.read_text()))
    scenes = []
    for name in index.files:
        tensors = checkpoint.load(directory / name)
        scenes.append(SyntheticScene(
            image=tensors["image"],
            semseg=tensors["semseg"].astype(np.int64),
            depth=tensors["depth"],
            normal=tensors["normal"],
            boundary=tensors["boundary"].astype(np.int64),
        ))
    return index, scenes


def cached_dataset(cache_dir: Union[str, Path], seed: int, count: int, height: int, width: int,
                   num_classes: int = Config.SEMSEG_CLASSES) -> List[SyntheticScene]:
    """
    make_dataset through an on-disk cache

    Each argument combination gets its own subdirectory of `cache_dir`. A
    directory whose index disagrees with the request is regenerated.
    """
    directory = Path(cache_dir) / f"seed{seed}_{height}x{width}_k{num_classes}_n{count}"
    if (directory / "index.json").exists():
        index, scenes = load_dataset(directory)
        if (index.seed, index.H, index.W, index.K, index.count) == (seed, height, width, num_classes, count):
            logger.info(f"Loaded {count} cached scenes from {directory}")
            return scenes
        logger.warning(f"Dataset cache {directory} does not match the request, regenerating")
    scenes = make_dataset(seed, count, height, width, num_classes)
    save_dataset(directory, scenes, seed, num_classes)
    return scenes
