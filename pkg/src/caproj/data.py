"""Dataset sources: a seeded synthetic generator and a CIFAR-10 binary reader.

Both produce [3, 32, 32] float64 images in [0, 1] before normalization and
deterministic batch order given (seed, epoch). The synthetic classes are
smooth low-frequency textures far apart relative to the pixel noise, so a
small network separates them quickly.
"""

import numpy as np

from .errors import ConfigError

IMAGE_SHAPE = (3, 32, 32)


def _class_template(rng):
    """Smooth per-channel texture in [0.2, 0.8] built from low-frequency waves."""
    ys, xs = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    t = np.zeros(IMAGE_SHAPE)
    for ch in range(3):
        acc = np.zeros((32, 32))
        for _ in range(4):
            fy, fx = rng.integers(1, 4, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.uniform(0.5, 1.0)
            acc += amp * np.cos(2.0 * np.pi * (fy * ys + fx * xs) / 32.0 + phase)
        acc /= max(float(np.abs(acc).max()), 1e-9)
        t[ch] = 0.5 + 0.3 * acc
    return t


def synthetic_blobs(seed, n, num_classes=4, noise_std=0.05, split=0):
    """n labelled images: class template plus clipped Gaussian pixel noise.

    Templates depend only on ``seed`` so different splits (train=0, eval=1)
    sample the same classes with independent noise.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    template_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB10B)))
    templates = [_class_template(template_rng) for _ in range(num_classes)]
    noise_rng = np.random.default_rng(
        np.random.SeedSequence((seed, 0xB10B, split, 1))
    )
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = np.empty((n,) + IMAGE_SHAPE)
    for i, label in enumerate(labels):
        noise = noise_rng.normal(0.0, noise_std, size=IMAGE_SHAPE)
        images[i] = np.clip(templates[label] + noise, 0.0, 1.0)
    return images, labels


def read_cifar10_binary(path, limit=None):
    """Records of 1 label byte + 3072 RGB bytes; returns ([n,3,32,32], [n])."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IOError(f"cannot read dataset file {path}: {exc}") from exc
    record = 1 + 3 * 32 * 32
    if len(raw) == 0 or len(raw) % record != 0:
        raise IOError(
            f"{path}: size {len(raw)} is not a multiple of the {record}-byte "
            f"record"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    if limit is not None:
        arr = arr[:limit]
    labels = arr[:, 0].astype(np.int64)
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


class Dataset:
    """Fixed train/eval splits with deterministic per-epoch batch order."""

    def __init__(self, train_x, train_y, eval_x, eval_y, batch_size, seed,
                 num_classes, mean=0.5, std=0.5):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        if std <= 0:
            raise ValueError(f"std must be positive, got {std}")
        self.mean = float(mean)
        self.std = float(std)
        self.train_x = (np.asarray(train_x) - self.mean) / self.std
        self.train_y = np.asarray(train_y, dtype=np.int64)
        self.eval_x = (np.asarray(eval_x) - self.mean) / self.std
        self.eval_y = np.asarray(eval_y, dtype=np.int64)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.num_classes = int(num_classes)
        self.input_shape = IMAGE_SHAPE

    def _slices(self, n):
        return [
            slice(i, min(i + self.batch_size, n))
            for i in range(0, n, self.batch_size)
        ]

    def train_batches(self, epoch):
        """Shuffled batches; the order depends only on (seed, epoch)."""
        n = len(self.train_y)
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 17, epoch)))
        order = rng.permutation(n)
        x = self.train_x[order]
        y = self.train_y[order]
        return [(x[s], y[s]) for s in self._slices(n)]

    def eval_batches(self):
        n = len(self.eval_y)
        return [
            (self.eval_x[s], self.eval_y[s]) for s in self._slices(n)
        ]


def make_dataset(cfg):
    """Build a Dataset from a parsed TrainConfig."""
    if cfg.dataset_kind == "synthetic_blobs":
        train_x, train_y = synthetic_blobs(
            cfg.dataset_seed,
            cfg.train_size,
            num_classes=cfg.num_classes,
            noise_std=cfg.noise_std,
            split=0,
        )
        eval_x, eval_y = synthetic_blobs(
            cfg.dataset_seed,
            cfg.eval_size,
            num_classes=cfg.num_classes,
            noise_std=cfg.noise_std,
            split=1,
        )
    elif cfg.dataset_kind == "cifar10_binary":
        if not cfg.train_path or not cfg.eval_path:
            raise ConfigError(
                "cifar10_binary needs dataset.train_path and dataset.eval_path"
            )
        train_x, train_y = read_cifar10_binary(cfg.train_path, cfg.train_size)
        eval_x, eval_y = read_cifar10_binary(cfg.eval_path, cfg.eval_size)
    else:
        raise ConfigError(f"unknown dataset kind {cfg.dataset_kind!r}")
    return Dataset(
        train_x,
        train_y,
        eval_x,
        eval_y,
        batch_size=cfg.batch_size,
        seed=cfg.dataset_seed,
        num_classes=cfg.num_classes,
        mean=cfg.mean,
        std=cfg.std,
    )
