"""Image and tensor persistence: 8-bit PNG and raw float32 tensors.

PNGs are converted to/from [0,1] reals by /255 and round(*255). Raw
tensors are little-endian float32 with a one-line JSON header {h, w, c},
used for checkpoints, embeddings caches and lossless image exchange.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

RAW_MAGIC = "patchdist-raw-v1"


def save_png(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        image = image[..., None]
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[..., 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=float) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def save_raw_tensor(path, tensor: np.ndarray) -> None:
    tensor = np.asarray(tensor, dtype=np.float32)
    if tensor.ndim == 2:
        tensor = tensor[..., None]
    if tensor.ndim != 3:
        raise ValueError("raw tensors are (h, w, c)")
    header = json.dumps(
        {"magic": RAW_MAGIC, "h": tensor.shape[0], "w": tensor.shape[1], "c": tensor.shape[2]}
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(tensor.astype("<f4").tobytes())


def load_raw_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("magic") != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw tensor file")
        h, w, c = header["h"], header["w"], header["c"]
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: payload size mismatch")
    return data.reshape(h, w, c).astype(float)


def save_float_array(path, array: np.ndarray, meta: dict | None = None) -> None:
    """Flat float32 array with a JSON header carrying shape and metadata."""
    array = np.asarray(array, dtype=np.float32)
    header = json.dumps({"magic": RAW_MAGIC, "shape": list(array.shape), **(meta or {})})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(array.astype("<f4").tobytes())


def load_float_array(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("magic") != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw array file")
        data = np.frombuffer(fh.read(), dtype="<f4")
    shape = tuple(header.pop("shape"))
    header.pop("magic")
    return data.reshape(shape).astype(float), header


def save_dataset(directory, images: np.ndarray, labels: np.ndarray) -> Path:
    """Write PNGs plus an index file of "path,label" lines; returns the index path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        name = f"img_{i:05d}.png"
        save_png(directory / name, img)
        lines.append(f"{name},{int(lab)}")
    index = directory / "index.csv"
    index.write_text("\n".join(lines) + "\n")
    return index


def load_dataset(index_path) -> tuple[np.ndarray, np.ndarray]:
    index_path = Path(index_path)
    base = index_path.parent
    images, labels = [], []
    for line in index_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        rel, lab = line.rsplit(",", 1)
        images.append(load_png(base / rel))
        labels.append(int(lab))
    if not images:
        raise ValueError(f"{index_path}: empty dataset")
    return np.stack(images), np.array(labels, dtype=int)
