"""Desk-scale diffusion / flow-matching training on synthetic data.

A small stack of conditioned mixing blocks is trained to denoise either a
2-D Gaussian mixture or procedural 8x8 class patterns.  The forward process
is ``x_t = alpha(t) x0 + gamma(t) eps`` with data at t=0 and noise at t=1;
training minimizes either the noise-prediction loss (``eps`` target) or the
flow-matching loss (``eps - x0`` target).  Sampling integrates from t=1 to
t=0 with Euler or Heun steps for velocity models, or the deterministic
noise-prediction update for diffusion models, with optional classifier-free
guidance ``uncond + w * (cond - uncond)``.

Everything is deterministic given the seed: data, noise, condition dropout
and initialization all come from one generator, and execution is
single-threaded.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from polymix import blocks as B
from polymix import tensor as T
from polymix.checkpoint import load_checkpoint, save_checkpoint
from polymix.tensor import Tensor

METRICS_HEADER = "step,loss,lr,wall_ms"

LOSS_DIFFUSION = "diffusion"
LOSS_FLOW_MATCHING = "flow_matching"

SAMPLE_METHODS = ("euler", "heun", "ddim")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# forward process
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class FlowPath:
    """Interpolation schedule between data (t=0) and noise (t=1)."""

    alpha: callable
    gamma: callable

    def validate(self) -> None:
        checks = ((self.alpha(0.0), 1.0), (self.gamma(0.0), 0.0),
                  (self.alpha(1.0), 0.0), (self.gamma(1.0), 1.0))
        for got, want in checks:
            if abs(float(got) - want) > 1e-12:
                raise ValueError(f"schedule endpoint {got} != {want}")


def linear_path() -> FlowPath:
    """alpha = 1 - t, gamma = t; makes eps - x0 the exact path velocity."""
    return FlowPath(alpha=lambda t: 1.0 - t, gamma=lambda t: t)


def noised_sample(x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                  path: FlowPath) -> np.ndarray:
    """x_t for per-sample times; t broadcasts over all trailing axes."""
    tt = np.asarray(t).reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.asarray(path.alpha(tt)) * x0 + np.asarray(path.gamma(tt)) * eps


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class GaussianMixture2D:
    """Equal-weight isotropic components on a circle; one class each."""

    n_classes: int = 2
    radius: float = 2.0
    std: float = 0.3

    @property
    def data_dim(self) -> int:
        return 2

    def class_centers(self) -> np.ndarray:
        ang = 2.0 * np.pi * np.arange(self.n_classes) / self.n_classes
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def sample(self, rng: np.random.Generator, batch: int):
        labels = rng.integers(0, self.n_classes, size=batch)
        x = self.class_centers()[labels] + rng.standard_normal((batch, 2)) * self.std
        return x, labels


@dataclasses.dataclass
class PatternDataset:
    """Procedural 8x8 single-channel class patterns plus pixel noise."""

    n_classes: int = 4
    noise: float = 0.1
    size: int = 8

    def __post_init__(self):
        if self.n_classes < 4 or self.n_classes > 6:
            raise ValueError("pattern dataset supports 4 to 6 classes")

    @property
    def data_dim(self) -> int:
        return self.size * self.size

    def class_templates(self) -> np.ndarray:
        s = self.size
        i, j = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        tpl = [
            np.where(i % 2 == 0, 1.0, -1.0),            # horizontal stripes
            np.where(j % 2 == 0, 1.0, -1.0),            # vertical stripes
            np.where((i + j) % 2 == 0, 1.0, -1.0),      # checkerboard
            np.where((abs(i - s / 2 + .5) < s / 4) & (abs(j - s / 2 + .5) < s / 4),
                     1.0, -1.0),                        # center square
            np.where(i > j, 1.0, -1.0),                 # lower triangle
            np.where((i - s / 2 + .5) ** 2 + (j - s / 2 + .5) ** 2 < (s / 3) ** 2,
                     1.0, -1.0),                        # disc
        ]
        return np.stack(tpl[: self.n_classes])[..., None]

    def sample(self, rng: np.random.Generator, batch: int):
        labels = rng.integers(0, self.n_classes, size=batch)
        imgs = self.class_templates()[labels]
        imgs = imgs + rng.standard_normal(imgs.shape) * self.noise
        return imgs, labels


def make_dataset(variant: str, n_classes: int):
    if variant == "mixture2d":
        return GaussianMixture2D(n_classes=n_classes)
    if variant == "patterns":
        return PatternDataset(n_classes=n_classes)
    raise ValueError(f"unknown dataset variant {variant!r}")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class TrainConfig:
    loss: str = LOSS_FLOW_MATCHING
    dataset: str = "mixture2d"
    lr: float = 1e-4
    steps: int = 2000
    cooldown: float = 0.1
    batch: int = 64
    seed: int = 0
    depth: int = 2
    d: int = 32
    k: int = 2
    expand: int = 2
    ffw_expand: int = 2
    patch: int = 2
    n_classes: int = 2
    cond_dropout: float = 0.1

    def validate(self) -> None:
        if self.loss not in (LOSS_DIFFUSION, LOSS_FLOW_MATCHING):
            raise ValueError(f"loss must be {LOSS_DIFFUSION} or {LOSS_FLOW_MATCHING}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.cooldown < 1.0:
            raise ValueError(f"cooldown fraction must be in [0, 1), got {self.cooldown}")
        for name in ("steps", "batch", "depth", "d", "k", "expand", "ffw_expand",
                     "patch", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError(f"cond_dropout must be in [0, 1)")
        if self.dataset == "patterns" and 8 % self.patch != 0:
            raise ValueError(f"patch {self.patch} does not divide 8")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ToyModel:
    """Conditioned block stack over tokens; predicts per-token targets.

    For the 2-D mixture each sample is a single token of width 2; for the
    pattern variant an 8x8 image becomes (8/patch)^2 patch tokens with a
    two-axis positional encoding.  The output projection starts at zero so
    an untrained model predicts exactly zero.
    """

    def __init__(self, config: TrainConfig, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        d = config.d
        if config.dataset == "mixture2d":
            self.n_tokens, self.token_dim = 1, 2
            self.pe = None
        else:
            side = 8 // config.patch
            self.n_tokens = side * side
            self.token_dim = config.patch * config.patch
            self.pe = B.sinusoidal_pe(B.patch_positions(8, 8, config.patch), d, axes=2)
        std = B.INIT_STD
        self.in_w = Tensor(rng.standard_normal((self.token_dim, d)) * std,
                           requires_grad=True, name="in.w")
        self.in_b = Tensor(np.zeros(d), requires_grad=True, name="in.b")
        self.blocks = [
            B.init_image_block(d, config.k, expand=config.expand,
                               ffw_expand=config.ffw_expand, rng=rng,
                               prefix=f"block{i}")
            for i in range(config.depth)
        ]
        self.cond = B.init_condition_embedding(config.n_classes, d, rng=rng)
        self.out_w = Tensor(np.zeros((d, self.token_dim)), requires_grad=True,
                            name="out.w")
        self.out_b = Tensor(np.zeros(self.token_dim), requires_grad=True, name="out.b")

    @property
    def loss_family(self) -> str:
        return self.config.loss

    @property
    def null_index(self) -> int:
        return self.cond.null_index

    def encode(self, data: np.ndarray) -> np.ndarray:
        if self.config.dataset == "mixture2d":
            return np.asarray(data)[:, None, :]
        return B.patchify(np.asarray(data), self.config.patch)

    def decode(self, tokens: np.ndarray) -> np.ndarray:
        if self.config.dataset == "mixture2d":
            return np.asarray(tokens)[:, 0, :]
        return B.unpatchify(np.asarray(tokens), 8, 8, 1, self.config.patch)

    def forward(self, x_tokens, labels, t) -> Tensor:
        h = T.linear(T.as_tensor(x_tokens), self.in_w, self.in_b)
        if self.pe is not None:
            h = T.add_const(h, self.pe[None])
        c = B.embed_condition(np.asarray(labels, dtype=np.intp), t, self.cond)
        for blk in self.blocks:
            h = B.image_dip_block(h, c, blk)
        h = T.layer_norm(h, B.LN_EPS)
        return T.linear(h, self.out_w, self.out_b)

    def tensors(self) -> dict[str, Tensor]:
        out = {"in.w": self.in_w, "in.b": self.in_b}
        for i, blk in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in blk.tensors().items()})
        out.update({f"cond_emb.{k}": v for k, v in self.cond.tensors().items()})
        out.update({"out.w": self.out_w, "out.b": self.out_b})
        return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _loss_core(model, x_t: np.ndarray, target: np.ndarray, labels, t,
               context: str) -> Tensor:
    pred = model.forward(Tensor(x_t), labels, t)
    if not np.isfinite(pred.data).all():
        raise TrainingError(f"non-finite model output during {context}")
    err = T.sub(pred, Tensor(target.astype(pred.dtype.type, copy=False)))
    sq = T.mul(err, err)
    per_sample = T.reduce_sum(T.reshape(sq, (sq.shape[0], -1)), axis=1)
    return T.reduce_mean(per_sample, axis=0)


def _draw_batch(model, x0: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                path: FlowPath, cond_dropout: float):
    x0_tokens = model.encode(x0)
    b = x0_tokens.shape[0]
    t = rng.uniform(0.0, 1.0, size=b)
    eps = rng.standard_normal(x0_tokens.shape)
    labels = np.asarray(labels, dtype=np.intp)
    if cond_dropout > 0.0:
        drop = rng.uniform(size=b) < cond_dropout
        labels = np.where(drop, model.null_index, labels)
    x_t = noised_sample(x0_tokens, t, eps, path)
    return x0_tokens, x_t, t, eps, labels


def diffusion_loss(model, x0, labels, rng: np.random.Generator,
                   path: FlowPath | None = None, cond_dropout: float = 0.1,
                   context: str = "diffusion loss") -> Tensor:
    """Noise-prediction squared error, mean over samples of per-sample ||.||^2."""
    path = path if path is not None else linear_path()
    _, x_t, t, eps, labels = _draw_batch(model, x0, labels, rng, path, cond_dropout)
    return _loss_core(model, x_t, eps, labels, t, context)


def flow_matching_loss(model, x0, labels, rng: np.random.Generator,
                       path: FlowPath | None = None, cond_dropout: float = 0.1,
                       context: str = "flow-matching loss") -> Tensor:
    """Velocity regression against eps - x0 on the linear path."""
    path = path if path is not None else linear_path()
    x0_tokens, x_t, t, eps, labels = _draw_batch(model, x0, labels, rng, path,
                                                 cond_dropout)
    return _loss_core(model, x_t, eps - x0_tokens, labels, t, context)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _model_eval(model, x: np.ndarray, labels: np.ndarray, t: float,
                cfg_weight: float) -> np.ndarray:
    tv = np.full(x.shape[0], t)
    if cfg_weight == 0.0:
        null = np.full(x.shape[0], model.null_index, dtype=np.intp)
        return model.forward(Tensor(x), null, tv).data
    null = np.full(x.shape[0], model.null_index, dtype=np.intp)
    uncond = model.forward(Tensor(x), null, tv).data
    cond = model.forward(Tensor(x), labels, tv).data
    return uncond + cfg_weight * (cond - uncond)


def sample(model, n_samples: int, steps: int, method: str = "euler",
           cfg_weight: float = 0.0, labels=None, rng: np.random.Generator | None = None,
           path: FlowPath | None = None) -> np.ndarray:
    """Integrate noise back to data; returns decoded samples.

    ``euler`` / ``heun`` integrate a velocity model from t=1 to t=0; ``ddim``
    applies the deterministic noise-prediction update, starting one step
    inside the schedule where alpha is nonzero.  Guidance weight 0 skips the
    conditional branch entirely, so it reproduces unconditional sampling
    bitwise.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    family = getattr(model, "loss_family", LOSS_FLOW_MATCHING)
    if method in ("euler", "heun") and family != LOSS_FLOW_MATCHING:
        raise ValueError(f"{method} integrates velocities; model was trained with {family}")
    if method == "ddim" and family != LOSS_DIFFUSION:
        raise ValueError(f"ddim needs a noise-prediction model, got {family}")
    if method not in SAMPLE_METHODS:
        raise ValueError(f"unknown sampling method {method!r}")
    path = path if path is not None else linear_path()
    rng = rng if rng is not None else np.random.default_rng(0)
    if labels is None:
        labels = np.full(n_samples, model.null_index, dtype=np.intp)
        cfg_weight = 0.0
    labels = np.asarray(labels, dtype=np.intp)

    x = rng.standard_normal((n_samples, model.n_tokens, model.token_dim))

    if method in ("euler", "heun"):
        grid = np.linspace(1.0, 0.0, steps + 1)
        for i in range(steps):
            t, t_next = grid[i], grid[i + 1]
            dt = t_next - t
            k1 = _model_eval(model, x, labels, t, cfg_weight)
            if method == "euler":
                x = x + dt * k1
            else:
                k2 = _model_eval(model, x + dt * k1, labels, t_next, cfg_weight)
                x = x + (dt / 2.0) * (k1 + k2)
    else:
        # start at t = 1 - 1/steps so alpha(t) stays away from zero
        grid = np.linspace(1.0 - 1.0 / steps, 0.0, steps)
        for i in range(len(grid)):
            t = grid[i]
            eps_hat = _model_eval(model, x, labels, t, cfg_weight)
            a_t, g_t = path.alpha(t), path.gamma(t)
            x0_hat = (x - g_t * eps_hat) / a_t
            if i + 1 < len(grid):
                s = grid[i + 1]
                x = path.alpha(s) * x0_hat + path.gamma(s) * eps_hat
            else:
                x = x0_hat
    return model.decode(x)


def cfg_combine(uncond: np.ndarray, cond: np.ndarray, weight: float) -> np.ndarray:
    """The guidance combination step, exposed for direct property tests."""
    return uncond + weight * (cond - uncond)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

class AdamW:
    """Decoupled weight decay Adam; deterministic, parameter-order stable."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.names = list(params)
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            g = grads[n]
            p = self.params[n]
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.data = p.data - lr * (update + self.wd * p.data)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for n in grads:
            grads[n] = grads[n] * scale
    return norm


def lr_at(step: int, config: TrainConfig) -> float:
    """Constant lr, then square-root decay to zero over the cooldown tail.

    ``step`` is 1-based (the step being applied)."""
    cooldown_steps = int(config.steps * config.cooldown)
    cutoff = config.steps - cooldown_steps
    if cooldown_steps == 0 or step <= cutoff:
        return config.lr
    return config.lr * ((config.steps - step + 1) / cooldown_steps) ** 0.5


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(config: TrainConfig, dataset=None, metrics_path=None, checkpoint_path=None,
          model: ToyModel | None = None):
    """Run the training loop; returns (model, metric rows).

    Rows are (step, loss, lr, wall_ms) with 1-based steps.  Deterministic
    given the seed: reruns reproduce step/loss/lr exactly.
    """
    config.validate()
    if dataset is None:
        dataset = make_dataset(config.dataset, config.n_classes)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = ToyModel(config, rng=rng)
    params = model.tensors()
    opt = AdamW(params)
    loss_fn = flow_matching_loss if config.loss == LOSS_FLOW_MATCHING else diffusion_loss
    path = linear_path()
    rows = []
    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        x0, labels = dataset.sample(rng, config.batch)
        with T.Tape() as tape:
            loss = loss_fn(model, x0, labels, rng, path=path,
                           cond_dropout=config.cond_dropout,
                           context=f"step {step}")
        loss_val = float(loss.data)
        if not np.isfinite(loss_val) or loss_val > 1e6:
            raise TrainingError(
                f"divergence at step {step}: loss = {loss_val!r} "
                f"(lr {lr_at(step, config)}, batch {config.batch})")
        grad_map = tape.backward(loss, params=list(params.values()))
        grads = {n: grad_map[p] for n, p in params.items()}
        clip_global_norm(grads, 1.0)
        lr = lr_at(step, config)
        opt.step(grads, lr)
        wall_ms = (time.perf_counter() - t0) * 1e3
        rows.append((step, loss_val, lr, wall_ms))
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.tensors(), config.to_dict(),
                        step=config.steps)
    return model, rows


def write_metrics(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for step, loss, lr, wall_ms in rows:
            fh.write(f"{step},{loss:.17g},{lr:.17g},{wall_ms:.3f}\n")


def load_model(path) -> ToyModel:
    tensors, config_dict, _ = load_checkpoint(path)
    config = TrainConfig(**config_dict)
    model = ToyModel(config)
    own = model.tensors()
    missing = set(own) - set(tensors)
    if missing:
        raise TrainingError(f"checkpoint missing tensors: {sorted(missing)}")
    for name, t in own.items():
        arr = tensors[name]
        if arr.shape != t.shape:
            raise TrainingError(f"checkpoint tensor {name} has shape {arr.shape}, "
                                f"expected {t.shape}")
        t.data = arr.astype(t.dtype, copy=True)
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """sqrt(2 E||X-Y|| - E||X-X'|| - E||Y-Y'||), V-statistic form."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)

    def mean_cross(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return float(np.sqrt(np.maximum(d2, 0.0)).mean())

    val = 2.0 * mean_cross(x, y) - mean_cross(x, x) - mean_cross(y, y)
    return float(np.sqrt(max(val, 0.0)))


def evaluate_samples(samples: np.ndarray, reference: np.ndarray,
                     labels=None, ref_labels=None, min_count: int = 256) -> dict:
    """Energy distance between sample sets, optionally split per class."""
    samples = np.asarray(samples)
    reference = np.asarray(reference)
    if len(samples) < min_count or len(reference) < min_count:
        raise ValueError(f"need at least {min_count} samples per side, "
                         f"got {len(samples)} and {len(reference)}")
    out = {"energy_distance": energy_distance(samples, reference)}
    if labels is not None and ref_labels is not None:
        labels = np.asarray(labels)
        ref_labels = np.asarray(ref_labels)
        per_class = {}
        flat_s = samples.reshape(len(samples), -1)
        flat_r = reference.reshape(len(reference), -1)
        for cls in np.unique(ref_labels):
            sel_s = flat_s[labels == cls]
            sel_r = flat_r[ref_labels == cls]
            if len(sel_s) == 0 or len(sel_r) == 0:
                continue
            per_class[int(cls)] = float(
                np.linalg.norm(sel_s.mean(axis=0) - sel_r.mean(axis=0)))
        out["per_class_mean_error"] = per_class
    return out


# ---------------------------------------------------------------------------
# degree ablation
# ---------------------------------------------------------------------------

ABLATION_HEADER = "degree,expand,feature_dim,pom_params,final_loss,energy_distance"


def pom_projection_params(d: int, k: int, expand: int) -> int:
    kd = k * expand * d
    return 2 * (d * kd + kd) + (kd * d + d)


def degree_ablation(base: TrainConfig, degrees=(1, 2, 3, 4, 6), budget: int = 12,
                    eval_samples: int = 256, notices: list | None = None):
    """Train one model per degree at fixed k*expand budget; returns CSV rows.

    Rows are (degree, expand, feature_dim, pom_params, final_loss,
    energy_distance).  Degrees that do not divide the budget are skipped
    with a notice.
    """
    rows = []
    for k in degrees:
        if budget % k != 0:
            if notices is not None:
                notices.append(f"degree {k} skipped: budget {budget} not divisible")
            continue
        expand = budget // k
        config = dataclasses.replace(base, k=k, expand=expand)
        model, metrics = train(config)
        final_loss = metrics[-1][1]
        rng = np.random.default_rng(config.seed + 9999)
        dataset = make_dataset(config.dataset, config.n_classes)
        ref, _ = dataset.sample(rng, eval_samples)
        smp = sample(model, eval_samples, steps=40,
                     method="euler" if config.loss == LOSS_FLOW_MATCHING else "ddim",
                     rng=rng)
        ed = energy_distance(smp.reshape(eval_samples, -1), ref.reshape(eval_samples, -1))
        rows.append((k, expand, k * expand * config.d,
                     pom_projection_params(config.d, k, expand), final_loss, ed))
    return rows


def write_ablation(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(ABLATION_HEADER + "\n")
        for k, e, kd, n_params, loss, ed in rows:
            fh.write(f"{k},{e},{kd},{n_params},{loss:.17g},{ed:.17g}\n")
