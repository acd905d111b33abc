"""UNet-style clean-image predictor and the diffusion processes around it.

Images are numpy arrays in NHWC layout (a single (H, W, C) image is accepted
wherever a batch is) with values in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import tensorfile
from .degradations import DegradationConfig, degrade, mix_degraded
from .errors import ContractError, ShapeError, TrainingError
from .nn import Conv2d, GroupNorm, Linear, Module, sinusoidal_embedding
from .optim import Adam, AdamState, ema_update
from .schedule import NoiseSchedule, make_linear_schedule

NoiseFn = Callable[[tuple], np.ndarray]


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0 and ch // g >= 2:
            return g
    return 1


class ResBlock(Module):
    def __init__(self, ch: int, time_dim: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(ch, _groups(ch))
        self.conv1 = Conv2d(ch, ch, 3, rng=rng)
        self.time = Linear(time_dim, ch, rng=rng)
        self.norm2 = GroupNorm(ch, _groups(ch))
        self.conv2 = Conv2d(ch, ch, 3, rng=rng)

    def __call__(self, x, temb):
        h = self.conv1(ag.silu(self.norm1(x)))
        tb = self.time(temb)
        h = h + ag.reshape(tb, (tb.shape[0], 1, 1, tb.shape[1]))
        h = self.conv2(ag.silu(self.norm2(h)))
        return x + h


class UNet(Module):
    """Encoder-decoder with additive skips; each level halves the spatial size.

    The output head and a direct 3x3 path from the input are zero-initialised,
    so a fresh network predicts all zeros.
    """

    def __init__(self, channels: int = 1, base_channels: int = 16, depth: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.channels = channels
        self.depth = depth
        self.time_dim = base_channels
        widths = [base_channels * min(2 ** i, 4) for i in range(depth + 1)]
        self.widths = widths
        self.time_in = Linear(self.time_dim, self.time_dim, rng=rng)
        self.stem = Conv2d(channels, widths[0], 3, rng=rng)
        self.down_blocks = [ResBlock(widths[i], self.time_dim, rng) for i in range(depth)]
        self.downsamplers = [Conv2d(widths[i], widths[i + 1], 3, stride=2, rng=rng) for i in range(depth)]
        self.mid = ResBlock(widths[depth], self.time_dim, rng)
        self.upsamplers = [Conv2d(widths[i + 1], widths[i], 3, rng=rng) for i in range(depth)]
        self.up_blocks = [ResBlock(widths[i], self.time_dim, rng) for i in range(depth)]
        self.out_norm = GroupNorm(widths[0], _groups(widths[0]))
        self.head = Conv2d(widths[0], channels, 3, zero=True)
        self.bypass = Conv2d(channels, channels, 3, zero=True)

    def __call__(self, x, t: np.ndarray):
        """x: NHWC tensor; t: integer steps, one per batch item."""
        temb = ag.silu(self.time_in(ag.Tensor(sinusoidal_embedding(t, self.time_dim))))
        h = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamplers):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for i in reversed(range(self.depth)):
            h = self.upsamplers[i](ag.upsample2x(h)) + skips[i]
            h = self.up_blocks[i](h, temb)
        return self.head(ag.silu(self.out_norm(h))) + self.bypass(x)


SIGMA_DATA = 0.5


def preconditioning(alpha_bar: np.ndarray, one_minus_alpha_bar: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-step (input scale, c_in, c_skip, c_out) for the skip-parameterised predictor.

    With x_in = x_t / sqrt(alpha_bar) = x0 + sigma * eps, the estimate is
    c_skip * x_in + c_out * F(c_in * x_in, t); F's output head starts at zero.
    """
    ab = np.asarray(alpha_bar, dtype=np.float64)
    sigma2 = np.asarray(one_minus_alpha_bar, dtype=np.float64) / ab
    denom = sigma2 + SIGMA_DATA ** 2
    scale = 1.0 / np.sqrt(ab)
    c_in = 1.0 / np.sqrt(denom)
    c_skip = SIGMA_DATA ** 2 / denom
    c_out = np.sqrt(sigma2) * SIGMA_DATA / np.sqrt(denom)
    return scale, c_in, c_skip, c_out


@dataclass
class TrainConfig:
    lr: float = 8e-5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    ema_decay: float = 0.995
    batch_size: int = 16
    T: int = 1000
    T_prime: int = 100
    degradation: DegradationConfig = field(default_factory=DegradationConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class DenoiserModel:
    """Live and EMA copies of the network plus the schedule they were trained under."""

    def __init__(self, image_size: int = 16, channels: int = 1, base_channels: int = 16, depth: int = 2,
                 T: int = 1000, T_prime: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02,
                 seed: int = 0, schedule: NoiseSchedule | None = None, skip: bool = True):
        if not 0 < T_prime < T:
            raise ContractError(f"need 0 < T_prime < T, got T_prime={T_prime}, T={T}")
        if image_size % (2 ** depth):
            raise ContractError(f"image_size {image_size} not divisible by 2**depth={2 ** depth}")
        self.image_size = image_size
        self.channels = channels
        self.base_channels = base_channels
        self.depth = depth
        self.T = T
        self.T_prime = T_prime
        self.beta_range = (beta_start, beta_end)
        self.seed = seed
        self.schedule = schedule if schedule is not None else make_linear_schedule(T, beta_start, beta_end)
        if self.schedule.T != T:
            raise ContractError(f"schedule has {self.schedule.T} steps, model T={T}")
        self.skip = skip
        self.net = UNet(channels, base_channels, depth, seed)
        self.ema_net = UNet(channels, base_channels, depth, seed)
        self.ema_net.load_state_dict(self.net.state_dict())
        self.optimizer_state = AdamState()
        self.epochs_trained = 0

    def config(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "T": self.T,
            "T_prime": self.T_prime,
            "beta_start": self.beta_range[0],
            "beta_end": self.beta_range[1],
            "seed": self.seed,
            "skip": self.skip,
        }

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return self.net.state_dict()

    @property
    def ema_parameters(self) -> dict[str, np.ndarray]:
        return self.ema_net.state_dict()

    def check_images(self, x: np.ndarray) -> None:
        expected = (self.image_size, self.image_size, self.channels)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError("denoiser", f"expected images of shape {expected}, got {x.shape[1:] if x.ndim == 4 else x.shape}")

    def forward(self, net: UNet, x_t, steps: np.ndarray):
        """Graph for the clean-image estimate of an NHWC batch at per-item steps."""
        if not self.skip:
            return net(ag.as_tensor(x_t), steps)
        scale, c_in, c_skip, c_out = (
            c.astype(np.float32).reshape(-1, 1, 1, 1) for c in preconditioning(self.schedule.alpha_bar[steps], self.schedule.one_minus_alpha_bar[steps])
        )
        x_in = ag.as_tensor(x_t) * scale
        return x_in * c_skip + net(x_in * c_in, steps) * c_out

    def predict(self, x_t: np.ndarray, t, use_ema: bool = True) -> np.ndarray:
        """Raw (unclamped) clean-image estimate for an NHWC batch."""
        self.check_images(x_t)
        steps = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        net = self.ema_net if use_ema else self.net
        with ag.no_grad():
            out = self.forward(net, x_t.astype(np.float32), steps)
        return out.data


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError("image", f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def _normal(rng: np.random.Generator | None, shape, dtype, noise_fn: NoiseFn | None) -> np.ndarray:
    if noise_fn is not None:
        return np.asarray(noise_fn(tuple(shape)), dtype=dtype)
    if rng is None:
        raise ContractError("a random generator or a noise hook is required")
    return rng.standard_normal(shape).astype(dtype)


def forward_noise(x: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator | None = None,
                  eps: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sample q(x_t | x_0) in closed form; returns (x_t, eps)."""
    t = schedule.check_step(t)
    x = np.asarray(x)
    if eps is None:
        eps = _normal(rng, x.shape, x.dtype, None)
    elif eps.shape != x.shape:
        raise ShapeError("forward_noise", f"noise {eps.shape} vs image {x.shape}")
    x_t = math.sqrt(schedule.alpha_bar[t]) * x + math.sqrt(schedule.one_minus_alpha_bar[t]) * eps
    return x_t.astype(x.dtype), eps


def forward_noise_chain(x: np.ndarray, t: int, schedule: NoiseSchedule,
                        rng: np.random.Generator | None = None, noise_fn: NoiseFn | None = None) -> np.ndarray:
    """Run the Markov chain q(x_s | x_{s-1}) for s = 1..t."""
    t = schedule.check_step(t)
    x = np.asarray(x, dtype=np.float64)
    for s in range(1, t + 1):
        beta = schedule.beta[s]
        x = math.sqrt(1.0 - beta) * x + math.sqrt(beta) * _normal(rng, x.shape, x.dtype, noise_fn)
    return x


def predict_x0(model: DenoiserModel, x_t: np.ndarray, t: int, use_ema: bool = True, clamp: bool = True) -> np.ndarray:
    t = model.schedule.check_step(t, model.T_prime)
    xb, single = _batched(x_t)
    out = model.predict(xb, t, use_ema)
    if clamp:
        out = np.clip(out, -1.0, 1.0)
    return out[0] if single else out


def backward_restore(model: DenoiserModel, x_t: np.ndarray, t: int, rng: np.random.Generator | None = None,
                     use_ema: bool = True, noise_fn: NoiseFn | None = None) -> np.ndarray:
    """Ancestral sampling from step t down to 0 with the predicted x0 in the posterior mean.

    The last step (1 -> 0) adds no noise.
    """
    sched = model.schedule
    t = sched.check_step(t, model.T_prime)
    xb, single = _batched(x_t)
    x = xb.astype(np.float32)
    for s in range(t, 0, -1):
        x0_hat = np.clip(model.predict(x, s, use_ema), -1.0, 1.0)
        c0, ct = sched.posterior_coefficients(s)
        mean = c0 * x0_hat + ct * x
        if s > 1:
            z = _normal(rng, x.shape, x.dtype, noise_fn)
            x = (mean + math.sqrt(sched.beta_tilde[s]) * z).astype(np.float32)
        else:
            x = mean.astype(np.float32)
    return x[0] if single else x


@dataclass
class EpochStats:
    mean_loss: float
    batch_losses: list[float]
    steps: list[int]
    sample_losses: list[float]


def make_training_batch(model: DenoiserModel, images: np.ndarray, cfg: TrainConfig,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Degrade, mix, noise: returns (x_t batch, step per item, clean targets)."""
    n = images.shape[0]
    steps = rng.integers(1, model.T_prime + 1, size=n)
    noisy = np.empty_like(images)
    for i in range(n):
        x0 = images[i]
        x_deg = degrade(x0, cfg.degradation, rng)
        x_mix = mix_degraded(x0, x_deg, int(steps[i]), model.T)
        noisy[i], _ = forward_noise(x_mix, int(steps[i]), model.schedule, rng)
    return noisy, steps, images


def train_epoch(model: DenoiserModel, dataset: Sequence[np.ndarray] | np.ndarray, cfg: TrainConfig,
                rng: np.random.Generator) -> tuple[DenoiserModel, EpochStats]:
    """One pass over ``dataset`` in shuffled mini-batches; updates live and EMA weights."""
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 4 or len(data) == 0:
        raise ContractError("dataset must be a non-empty (N, H, W, C) collection")
    if cfg.T_prime >= cfg.T or cfg.T_prime != model.T_prime or cfg.T != model.T:
        raise ContractError("training config T/T_prime must match the model and satisfy T_prime < T")
    model.check_images(data[:1])
    params = model.net.parameters()
    opt = Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    opt.state = model.optimizer_state
    order = rng.permutation(len(data))
    batch_losses, all_steps, sample_losses = [], [], []
    for b, start in enumerate(range(0, len(data), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        x_t, steps, target = make_training_batch(model, data[idx], cfg, rng)
        opt.zero_grad()
        pred = model.forward(model.net, ag.Tensor(x_t), steps)
        loss = ag.mse(pred, target)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} in batch {b} (epoch {model.epochs_trained})")
        ag.backward(loss)
        opt.step()
        model.ema_net.load_state_dict(ema_update(model.ema_net.state_dict(), model.net.state_dict(), cfg.ema_decay))
        per_item = ((pred.data - target) ** 2).reshape(len(idx), -1).mean(axis=1)
        batch_losses.append(value)
        all_steps.extend(int(s) for s in steps)
        sample_losses.extend(float(v) for v in per_item)
    model.optimizer_state = opt.state
    model.epochs_trained += 1
    weights = [min(cfg.batch_size, len(data) - s) for s in range(0, len(data), cfg.batch_size)]
    mean_loss = float(np.average(batch_losses, weights=weights))
    return model, EpochStats(mean_loss, batch_losses, all_steps, sample_losses)


def fit(model: DenoiserModel, dataset, cfg: TrainConfig, epochs: int, rng: np.random.Generator,
        on_epoch: Callable[[int, EpochStats], None] | None = None) -> list[EpochStats]:
    history = []
    for epoch in range(epochs):
        model, stats = train_epoch(model, dataset, cfg, rng)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(epoch, stats)
    return history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: DenoiserModel, path, extra: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in model.net.state_dict().items():
        tensors[f"live/{name}"] = arr
    for name, arr in model.ema_net.state_dict().items():
        tensors[f"ema/{name}"] = arr
    for name, arr in model.optimizer_state.m.items():
        tensors[f"adam_m/{name}"] = arr
    for name, arr in model.optimizer_state.v.items():
        tensors[f"adam_v/{name}"] = arr
    tensors["schedule/beta"] = model.schedule.beta
    tensors["schedule/alpha_bar"] = model.schedule.alpha_bar
    tensors["schedule/beta_tilde"] = model.schedule.beta_tilde
    meta = {
        "kind": "denoiser",
        "model": model.config(),
        "adam_step": model.optimizer_state.step,
        "epochs_trained": model.epochs_trained,
    }
    if extra:
        meta.update(extra)
    tensorfile.save(path, tensors, meta)


def load_checkpoint(path) -> tuple[DenoiserModel, dict]:
    tensors, meta = tensorfile.load(path)
    if meta.get("kind") != "denoiser":
        raise ContractError(f"{path}: not a denoiser checkpoint")
    schedule = NoiseSchedule.from_betas(tensors["schedule/beta"][1:])
    model = DenoiserModel(schedule=schedule, **meta["model"])

    def section(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    model.net.load_state_dict(section("live/"))
    model.ema_net.load_state_dict(section("ema/"))
    model.optimizer_state = AdamState(meta.get("adam_step", 0), section("adam_m/"), section("adam_v/"))
    model.epochs_trained = meta.get("epochs_trained", 0)
    return model, meta
