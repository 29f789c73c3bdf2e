"""Convolutional VAE over top-down scene renders.

Encoder: five 3x3 stride-2 convolutions (16-32-64-128-256 channels) with ReLU,
then dense layers to the latent mean and log-std. Decoder: a dense layer back
to the smallest feature map, five nearest-neighbour upsample + 3x3 stride-1
convolution stages, and a final stride-1 convolution with a sigmoid. Upsampling
before convolving avoids transposed-convolution checkerboards.

Images are (H, W, C) arrays in [0, 1]; batches are (N, H, W, C).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from . import gradcore as gc

LOG_STD_RANGE = (-6.0, 3.0)


@dataclass
class VaeConfig:
    image_size: int = 32
    channels: int = 1
    latent_dim: int = 32
    conv_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    beta: float = 1.0
    # fixed pixel noise of the Gaussian likelihood; reconstruction = SSE / (2 sigma^2)
    pixel_sigma: float = 0.1
    learning_rate: float = 0.005
    # per-epoch exponential decay reaching this fraction of the rate at the last epoch
    final_lr_fraction: float = 0.05
    batch_size: int = 64
    # initial posterior width exp(-3) ~ 0.05: the decoder first learns around the means,
    # otherwise a small corpus collapses onto the prior and decode(mu) is never trained
    log_std_bias_init: float = -3.0
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        s = self.image_size
        if s < 32 or s & (s - 1):
            raise ValueError(f"image_size must be a power of two >= 32, got {s}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if len(self.conv_channels) != 5:
            raise ValueError("the encoder has exactly five convolutional stages")

    @classmethod
    def paper_scale(cls, **kw) -> "VaeConfig":
        return cls(image_size=64, channels=3, latent_dim=128, **kw)

    @property
    def bottleneck(self) -> int:
        return self.image_size // 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LatentStats:
    mu: np.ndarray
    log_std: np.ndarray

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Reparameterised draws z = mu + sigma * eps."""
        shape = self.mu.shape if n is None else (n,) + self.mu.shape
        return self.mu + np.exp(self.log_std) * rng.standard_normal(shape)


def _param(data) -> gc.Tensor:
    return gc.Tensor(data, requires_grad=True)


class Vae:
    def __init__(self, config: VaeConfig = VaeConfig(), params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, gc.Tensor] = {}
        if params is None:
            self._init(np.random.default_rng([config.seed, 11]))
        else:
            missing = set(self._shapes()) - set(params)
            if missing:
                raise ValueError(f"missing VAE parameters: {sorted(missing)}")
            for name, shape in self._shapes().items():
                arr = np.asarray(params[name], dtype=float)
                if arr.shape != shape:
                    raise gc.ShapeError(f"parameter {name}: expected {shape}, got {arr.shape}")
                self.params[name] = _param(arr)

    # -- layout ---------------------------------------------------------------

    def _shapes(self) -> dict[str, tuple]:
        c = self.config
        out: dict[str, tuple] = {}
        cin = c.channels
        for k, co in enumerate(c.conv_channels):
            out[f"enc{k}.w"] = (co, cin, 3, 3)
            out[f"enc{k}.b"] = (co,)
            cin = co
        flat = c.conv_channels[-1] * c.bottleneck ** 2
        out["mu.w"] = (flat, c.latent_dim)
        out["mu.b"] = (c.latent_dim,)
        out["logstd.w"] = (flat, c.latent_dim)
        out["logstd.b"] = (c.latent_dim,)
        out["dec_in.w"] = (c.latent_dim, flat)
        out["dec_in.b"] = (flat,)
        dec = list(reversed(c.conv_channels[:-1])) + [c.conv_channels[0]]
        cin = c.conv_channels[-1]
        for k, co in enumerate(dec):
            out[f"dec{k}.w"] = (co, cin, 3, 3)
            out[f"dec{k}.b"] = (co,)
            cin = co
        out["out.w"] = (c.channels, cin, 3, 3)
        out["out.b"] = (c.channels,)
        return out

    def _init(self, rng: np.random.Generator) -> None:
        for name, shape in self._shapes().items():
            if name == "logstd.b":
                self.params[name] = _param(np.full(shape, self.config.log_std_bias_init))
            elif name.endswith(".b"):
                self.params[name] = _param(np.zeros(shape))
            elif len(shape) == 4:
                self.params[name] = _param(gc.conv_uniform(rng, shape))
            else:
                gain = 0.1 if name.startswith("logstd") else 1.0
                self.params[name] = _param(gc.orthogonal(rng, shape, gain))

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    # -- graph pieces -----------------------------------------------------------

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        c = self.config
        images = np.asarray(images, dtype=float)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (c.image_size, c.image_size, c.channels):
            raise gc.ShapeError(f"encoder expects images of shape "
                                f"{(c.image_size, c.image_size, c.channels)}, got {images.shape[1:]}")
        return images

    def encoder_graph(self, images: np.ndarray):
        """(mu, log_std) tensors for an (N, H, W, C) batch."""
        p = self.params
        x = gc.Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
        for k in range(5):
            x = gc.relu(gc.conv2d(x, p[f"enc{k}.w"], p[f"enc{k}.b"], stride=2))
        flat = gc.reshape(x, (images.shape[0], -1))
        mu = gc.linear(flat, p["mu.w"], p["mu.b"])
        log_std = gc.clamp(gc.linear(flat, p["logstd.w"], p["logstd.b"]), *LOG_STD_RANGE)
        return mu, log_std

    def decoder_graph(self, z) -> gc.Tensor:
        """(N, C, H, W) reconstruction tensor in (0, 1)."""
        c = self.config
        p = self.params
        z = gc.as_tensor(z)
        n = z.shape[0]
        x = gc.relu(gc.linear(z, p["dec_in.w"], p["dec_in.b"]))
        b = c.bottleneck
        x = gc.reshape(x, (n, c.conv_channels[-1], b, b))
        for k in range(5):
            x = gc.relu(gc.conv2d(gc.upsample2x(x), p[f"dec{k}.w"], p[f"dec{k}.b"], stride=1))
        return gc.sigmoid(gc.conv2d(x, p["out.w"], p["out.b"], stride=1))

    # -- public API ---------------------------------------------------------------

    def encode(self, image: np.ndarray) -> LatentStats:
        """Latent statistics of one (H, W, C) image."""
        image = np.asarray(image, dtype=float)
        if image.ndim != 3:
            raise gc.ShapeError(f"encode expects one (H, W, C) image, got shape {image.shape}")
        stats = self.encode_batch(image[None])
        return LatentStats(stats.mu[0], stats.log_std[0])

    def encode_batch(self, images: np.ndarray) -> LatentStats:
        images = self._check_images(images)
        mu, log_std = self.encoder_graph(images)
        return LatentStats(mu.data, log_std.data)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        z = np.atleast_2d(z)
        if z.shape[1] != self.config.latent_dim:
            raise gc.ShapeError(f"decode expects latent vectors of length {self.config.latent_dim}, "
                                f"got {z.shape[1]}")
        out = self.decoder_graph(z).data.transpose(0, 2, 3, 1)
        return out[0] if single else out

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        return self.decode(self.encode_batch(images).mu)


def vae_loss(images, mu, log_std, reconstruction, beta: float = 1.0, pixel_sigma: float = 0.1) -> gc.Tensor:
    """Per-image negative ELBO averaged over the batch.

    ``images`` and ``reconstruction`` share a layout; ``mu``/``log_std`` are
    (N, latent). The reconstruction term is the fixed-variance Gaussian
    likelihood, SSE / (2 sigma^2), without its constant.
    """
    x = gc.as_tensor(images)
    rec = gc.as_tensor(reconstruction)
    if x.shape != rec.shape:
        raise gc.ShapeError(f"vae_loss: image {x.shape} vs reconstruction {rec.shape}")
    n = x.shape[0]
    sse = gc.sum(gc.square(gc.sub(rec, x)))
    kl = gc.kl_diag_gaussian(mu, log_std)
    total = gc.add(gc.mul(sse, 1.0 / (2.0 * pixel_sigma ** 2)), gc.mul(kl, beta))
    return gc.mul(total, 1.0 / n)


def loss_terms(vae: Vae, images: np.ndarray, eps: np.ndarray):
    """(loss, mu, log_std) graph for a batch with fixed reparameterisation noise."""
    cfg = vae.config
    mu, log_std = vae.encoder_graph(images)
    z = gc.add(mu, gc.mul(gc.exp(log_std), gc.Tensor(eps)))
    rec = vae.decoder_graph(z)
    target = gc.Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    return vae_loss(target, mu, log_std, rec, cfg.beta, cfg.pixel_sigma), mu, log_std


@dataclass
class VaeTrainResult:
    vae: Vae
    losses: list[float] = field(default_factory=list)  # mean training loss per epoch


def train_vae(corpus: np.ndarray, epochs: int, learning_rate: float | None = None,
              config: VaeConfig | None = None, vae: Vae | None = None,
              on_epoch=None) -> VaeTrainResult:
    """Minibatch Adam on the negative ELBO; seed-deterministic."""
    corpus = np.asarray(corpus, dtype=float)
    if corpus.ndim != 4 or corpus.shape[0] == 0:
        raise ValueError("train_vae needs a nonempty (N, H, W, C) corpus")
    config = config or (vae.config if vae is not None else VaeConfig(
        image_size=corpus.shape[1], channels=corpus.shape[3]))
    vae = vae or Vae(config)
    vae._check_images(corpus[:1])
    base_lr = config.learning_rate if learning_rate is None else learning_rate
    opt = gc.AdamState(learning_rate=base_lr)
    rng = np.random.default_rng([config.seed, 12])
    result = VaeTrainResult(vae)
    n = corpus.shape[0]
    bs = min(config.batch_size, n)
    for epoch in range(epochs):
        opt.learning_rate = base_lr * config.final_lr_fraction ** (epoch / max(epochs - 1, 1))
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            batch = corpus[idx]
            eps = rng.standard_normal((len(idx), config.latent_dim))
            gc.zero_grads(vae.params.values())
            loss, _, _ = loss_terms(vae, batch, eps)
            gc.backward(loss)
            gc.adam_step(opt, vae.params)
            total += float(loss.data) * len(idx)
            count += len(idx)
        result.losses.append(total / count)
        if on_epoch:
            on_epoch(epoch, result.losses[-1])
    return result


def reconstruction_mse(vae: Vae, images: np.ndarray, batch: int = 256) -> float:
    errs = []
    for start in range(0, len(images), batch):
        chunk = images[start:start + batch]
        errs.append(np.sum((vae.reconstruct(chunk) - chunk) ** 2))
    return float(np.sum(errs) / np.asarray(images).size)


# ---------------------------------------------------------------------------
# corpus generation and raster files


def generate_corpus(n: int, seed: int = 0, image_size: int = 32, channels: int = 1,
                    shapes=None) -> np.ndarray:
    """Renders of random scenes: object anywhere from spawn to the edge, gripper nearby."""
    from .shapes import training_set
    from .tabletop import EnvConfig, EnvState, GripperState, ObjectState, render

    shapes = shapes or training_set()
    cfg = EnvConfig()
    rng = np.random.default_rng([seed, 13])
    out = np.empty((n, image_size, image_size, channels))
    for i in range(n):
        shape = shapes[int(rng.integers(len(shapes)))]
        obj = ObjectState(float(rng.uniform(0.25, 0.75)), float(rng.uniform(0.85, 1.3)),
                          cfg.object_rest_z, float(rng.uniform(-math.pi, math.pi)))
        if rng.random() < 0.5:
            gx, gy = obj.x + rng.normal(0, 0.05), obj.y + shape.radius + rng.uniform(0.0, 0.1)
        else:
            gx, gy = float(rng.uniform(0.3, 0.7)), cfg.grasp_start[1]
        state = EnvState(obj, GripperState(float(gx), float(gy), cfg.push_z))
        out[i] = render(state, shape, image_size, channels, cfg)
    return out


def write_pnm(path: str | Path, image: np.ndarray) -> None:
    """Binary PGM (1 channel) or PPM (3 channels), 8 bits per sample."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    magic = {1: b"P5", 3: b"P6"}.get(c)
    if magic is None:
        raise ValueError("raster files hold 1 or 3 channels")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    c = {b"P5": 1, b"P6": 3}.get(magic)
    if c is None or maxval != 255:
        raise ValueError(f"{path}: unsupported raster header {magic!r} maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * c, offset=pos)
    return data.reshape(h, w, c).astype(float) / 255.0


def save_corpus(images: Iterable[np.ndarray], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        ext = ".pgm" if img.shape[-1] == 1 else ".ppm"
        p = directory / f"scene_{i:06d}{ext}"
        write_pnm(p, img)
        paths.append(p)
    return paths


def load_corpus(directory: str | Path) -> np.ndarray:
    directory = Path(directory)
    paths = sorted(list(directory.glob("*.pgm")) + list(directory.glob("*.ppm")))
    if not paths:
        raise FileNotFoundError(f"no .pgm/.ppm images in {directory}")
    return np.stack([read_pnm(p) for p in paths])
