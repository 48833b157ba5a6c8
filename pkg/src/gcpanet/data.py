"""Dataset ingestion, augmentation, evaluation preprocessing and batching.

Layout on disk::

    <root>/<name>/images/*.jpg|*.png
    <root>/<name>/masks/*.png        8-bit grayscale, foreground >= 128
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_EXTS = (".jpg", ".jpeg", ".png", ".bmp")
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
TRAIN_RESIZE = 320
TRAIN_CROP = 288
EVAL_SIZE = 320
FLIP_PROB = 0.5


class DatasetError(RuntimeError):
    pass


class DecodeError(DatasetError):
    pass


@dataclass(frozen=True)
class Sample:
    image_path: Path
    mask_path: Optional[Path]
    original_size: Tuple[int, int]  # (H, W)

    @property
    def stem(self) -> str:
        return self.image_path.stem


@dataclass
class DatasetIndex:
    name: str
    samples: List[Sample]
    split: str = "train"

    def __len__(self):
        return len(self.samples)


def list_images(directory: Path) -> List[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_EXTS)


def load_dataset(root, name: str, split: str = "train") -> DatasetIndex:
    """Index the image/mask pairs under ``root/name``, sorted by image path."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    base = Path(root) / name
    img_dir, mask_dir = base / "images", base / "masks"
    if not img_dir.is_dir():
        raise DatasetError(f"dataset not found: {img_dir}")
    images = list_images(img_dir)
    if not images:
        raise DatasetError(f"empty dataset: no images in {img_dir}")
    masks = {p.stem: p for p in list_images(mask_dir)} if mask_dir.is_dir() else {}

    orphans = [p.stem for p in images if p.stem not in masks]
    if split == "train" and orphans:
        raise DatasetError(f"images without masks in train split {name!r}: {', '.join(orphans)}")
    stems = {p.stem for p in images}
    unmatched_masks = sorted(s for s in masks if s not in stems)
    if unmatched_masks:
        log.warning("masks without images in %s: %s", name, ", ".join(unmatched_masks))

    samples = []
    for path in images:
        try:
            with Image.open(path) as im:
                w, h = im.size
        except (UnidentifiedImageError, OSError) as exc:
            raise DecodeError(f"cannot decode {path}: {exc}") from exc
        mask_path = masks.get(path.stem)
        if mask_path is not None:
            with Image.open(mask_path) as m:
                if m.size != (w, h):
                    raise DatasetError(
                        f"mask {mask_path.name} is {m.size[1]}x{m.size[0]}, image is {h}x{w}"
                    )
        samples.append(Sample(path, mask_path, (h, w)))
    return DatasetIndex(name, samples, split)


def read_image(path) -> Image.Image:
    """Decode an image as RGB; grayscale and alpha images are coerced."""
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def read_mask(path) -> Image.Image:
    """Binarized mask as an 8-bit 'L' image with values in {0, 255}."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return Image.fromarray(np.where(arr >= 128, 255, 0).astype(np.uint8))


def normalize(image: Image.Image) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - MEAN) / STD
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def mask_tensor(mask: Image.Image) -> torch.Tensor:
    return torch.from_numpy((np.asarray(mask) >= 128).astype(np.float32))[None]


def augment_pair(image: Image.Image, mask: Image.Image, rng: np.random.Generator,
                 resize: int = TRAIN_RESIZE, crop: int = TRAIN_CROP):
    """Resize, random horizontal flip and random crop; identical geometry for both inputs."""
    if crop > resize:
        raise ValueError(f"crop {crop} larger than resize {resize}")
    image = image.resize((resize, resize), Image.BILINEAR)
    mask = mask.resize((resize, resize), Image.NEAREST)
    if rng.random() < FLIP_PROB:
        image = image.transpose(Image.FLIP_LEFT_RIGHT)
        mask = mask.transpose(Image.FLIP_LEFT_RIGHT)
    top, left = rng.integers(0, resize - crop + 1, size=2)
    box = (int(left), int(top), int(left) + crop, int(top) + crop)
    return image.crop(box), mask.crop(box)


def augment_train(sample: Sample, rng_seed, resize: int = TRAIN_RESIZE, crop: int = TRAIN_CROP):
    """Training view of ``sample``: (image [3,crop,crop] normalized, mask [1,crop,crop])."""
    if sample.mask_path is None:
        raise DatasetError(f"sample {sample.stem} has no mask")
    rng = np.random.default_rng(rng_seed)
    image, mask = augment_pair(read_image(sample.image_path), read_mask(sample.mask_path), rng, resize, crop)
    return normalize(image), mask_tensor(mask)


def preprocess_eval(sample: Sample, size: int = EVAL_SIZE) -> torch.Tensor:
    """Bilinear resize to ``size`` x ``size`` and normalize; ``sample.original_size`` keeps the source size."""
    image = read_image(sample.image_path).resize((size, size), Image.BILINEAR)
    return normalize(image)


def load_eval_pair(sample: Sample, size: int = EVAL_SIZE):
    if sample.mask_path is None:
        raise DatasetError(f"sample {sample.stem} has no mask")
    mask = read_mask(sample.mask_path).resize((size, size), Image.NEAREST)
    return preprocess_eval(sample, size), mask_tensor(mask)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic permutation of ``range(n)`` for (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> List[np.ndarray]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(n, seed, epoch) if shuffle else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(index: DatasetIndex, batch_size: int, shuffle_seed: int, epoch: int = 0,
            augment: bool = True, resize: int = TRAIN_RESIZE, crop: int = TRAIN_CROP,
            start_batch: int = 0) -> Iterator[Tuple[torch.Tensor, torch.Tensor, List[int]]]:
    """Yield ``(images, masks, sample_ids)`` covering every sample once; the last batch may be short.

    Augmentation randomness is keyed on (seed, epoch, sample id), so a stream
    is reproducible and independent of where it is resumed. ``start_batch``
    skips that many leading batches without decoding them.
    """
    for ids in batch_indices(len(index), batch_size, shuffle_seed, epoch)[start_batch:]:
        imgs, masks = [], []
        for i in ids:
            sample = index.samples[i]
            if augment:
                img, mask = augment_train(sample, [shuffle_seed, epoch, int(i)], resize, crop)
            else:
                img, mask = load_eval_pair(sample, crop)
            imgs.append(img)
            masks.append(mask)
        yield torch.stack(imgs), torch.stack(masks), [int(i) for i in ids]


def save_prediction(prob: torch.Tensor, path, original_size: Tuple[int, int]) -> None:
    """Write a [1,H,W] or [H,W] probability map as an 8-bit PNG at ``original_size`` (H, W)."""
    prob = prob.detach().float().reshape(1, 1, *prob.shape[-2:])
    if tuple(prob.shape[-2:]) != tuple(original_size):
        prob = torch.nn.functional.interpolate(prob, size=tuple(original_size), mode="bilinear",
                                               align_corners=False)
    arr = torch.round(prob[0, 0].clamp(0, 1) * 255).to(torch.uint8).numpy()
    Image.fromarray(arr).save(path)
