"""Calibration of the excursion-set model to 2-d image data.

Three procedures are provided: descriptor matching against two-point coverage
curves (train_tppf), adversarial training against a convolutional
discriminator (train_gan), and the combined objective with pretraining and
early stopping (train_combined). Optimization runs in an unconstrained raw
parameter space (bounded parameters squashed through a sigmoid, positive ones
through a softplus) with a hand-rolled Adam.

Every random draw derives from (config.seed, epoch, step, member) through a
counter-based generator, so a run is reproducible bit for bit and resuming
from a checkpoint continues the exact trace of the uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import model as mo
from . import random_fields as rf
from .descriptors import (PAIRS, TPCFSet, TpcfGeometry, build_tpcf_geometry,
                          specific_surface_2d, tpcf_curves_tensor, tpcf_data_average,
                          volume_fractions)
from .discriminator import (DiscriminatorConfig, DiscriminatorParams,
                            discriminate, init_discriminator)
from .model import FIELD_NAMES, HIGH, LOW, ModelParams, PhaseImage
from .random_fields import derive_seed, rng_from_seed

DISC_GUARD_THRESHOLD = 0.4

# sub-stream tags under the master seed
_S_INIT = 0
_S_DISC_INIT = 1
_S_TRAIN = 2
_S_CUTOUT = 3
_S_METRIC = 4
_S_PRETRAIN = 5


class CalibrationError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters shared by the three training procedures.

    ``lr_disc`` defaults to 1e-3 for the low-parametric model and 1e-4
    otherwise. ``support`` is the kernel support radius L (high-parametric)
    or the tabulation halfwidth (low-parametric).
    """

    kind: str = LOW
    support: int = 100
    window: tuple = (201, 201)
    lr: float = 1e-4
    lr_disc: float | None = None
    batch: int = 32
    n_epoch: int = 5000
    n_steps: int = 10
    nu: float = 10.0
    h_max: int = 100
    bandwidth: float = 0.5
    gamma_w: float = 1.0
    min_epochs: int = 100
    patience: int = 500
    mc_count: int = 8
    seed: int = 0
    n_dof: int = 2
    sign: int = 1
    disc_blocks: tuple = ((4, 64, 2), (4, 128, 2), (4, 256, 2), (4, 512, 2))
    disc_loss_variant: str = "pseudocode"
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr_disc is None:
            self.lr_disc = 1e-3 if self.kind == LOW else 1e-4
        if self.lr <= 0 or self.lr_disc <= 0:
            raise CalibrationError("learning rates must be positive")
        if self.batch < 1:
            raise CalibrationError("batch must be >= 1")
        if self.h_max < 1:
            raise CalibrationError("h_max must be >= 1")
        if self.gamma_w <= 0:
            raise CalibrationError("gamma_w must be positive")
        if self.disc_loss_variant not in ("pseudocode", "prose"):
            raise CalibrationError(f"unknown discriminator loss variant "
                                   f"{self.disc_loss_variant!r}")
        self.window = tuple(int(n) for n in self.window)

    def disc_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            input_extents=(self.window[0], self.window[1], 3),
            blocks=tuple(tuple(b) for b in self.disc_blocks))


# ---------------------------------------------------------------------------
# raw (unconstrained) parameter space
# ---------------------------------------------------------------------------

@dataclass
class RawTheta:
    """Model parameters in the unconstrained optimization space.

    Bounded quantities (gamma and, for the low-parametric family, the three
    convex weights) live as sigmoid preimages; positive quantities (sigma and
    the ten positive covariance parameters) as softplus preimages; thresholds
    and the high-parametric radial profiles are raw reals.
    """

    kind: str
    support: int
    alphas: dict
    gamma_raw: Tensor
    sigma_x_raw: Tensor
    sigma_y_raw: Tensor
    lambda_x: Tensor
    lambda_y: Tensor
    n_dof: int = 2
    sign: int = 1

    def parameters(self) -> list[Tensor]:
        return [self.alphas[n] for n in FIELD_NAMES] + [
            self.gamma_raw, self.sigma_x_raw, self.sigma_y_raw,
            self.lambda_x, self.lambda_y]

    def detached(self) -> "RawTheta":
        return RawTheta(
            kind=self.kind, support=self.support,
            alphas={n: ad.constant(self.alphas[n].data) for n in FIELD_NAMES},
            gamma_raw=ad.constant(self.gamma_raw.data),
            sigma_x_raw=ad.constant(self.sigma_x_raw.data),
            sigma_y_raw=ad.constant(self.sigma_y_raw.data),
            lambda_x=ad.constant(self.lambda_x.data),
            lambda_y=ad.constant(self.lambda_y.data),
            n_dof=self.n_dof, sign=self.sign)

    def state_arrays(self) -> dict:
        out = {f"alpha_{n}": self.alphas[n].data for n in FIELD_NAMES}
        out.update(gamma_raw=self.gamma_raw.data,
                   sigma_x_raw=self.sigma_x_raw.data,
                   sigma_y_raw=self.sigma_y_raw.data,
                   lambda_x=self.lambda_x.data, lambda_y=self.lambda_y.data)
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for n in FIELD_NAMES:
            self.alphas[n].data[...] = arrays[f"alpha_{n}"]
        self.gamma_raw.data[...] = arrays["gamma_raw"]
        self.sigma_x_raw.data[...] = arrays["sigma_x_raw"]
        self.sigma_y_raw.data[...] = arrays["sigma_y_raw"]
        self.lambda_x.data[...] = arrays["lambda_x"]
        self.lambda_y.data[...] = arrays["lambda_y"]

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.state_arrays().items()}


_LOW_BOUNDED = np.zeros(13)
_LOW_BOUNDED[:3] = 1.0  # convex weights squash through sigmoid


def init_raw_theta(config: TrainConfig) -> RawTheta:
    """Gaussian-noise initialization of the raw parameter vector."""
    n_alpha = config.support + 1 if config.kind == HIGH else 13
    alphas = {}
    for i, name in enumerate(FIELD_NAMES):
        gen = rng_from_seed(derive_seed(config.seed, _S_INIT, i))
        alphas[name] = Tensor(gen.standard_normal(n_alpha), requires_grad=True)
    gen = rng_from_seed(derive_seed(config.seed, _S_INIT, len(FIELD_NAMES)))
    g, sx, sy, lx, ly = gen.standard_normal(5)
    return RawTheta(
        kind=config.kind, support=config.support, alphas=alphas,
        gamma_raw=Tensor(g, requires_grad=True),
        sigma_x_raw=Tensor(sx, requires_grad=True),
        sigma_y_raw=Tensor(sy, requires_grad=True),
        lambda_x=Tensor(lx, requires_grad=True),
        lambda_y=Tensor(ly, requires_grad=True),
        n_dof=config.n_dof, sign=config.sign)


def natural_tensors(raw: RawTheta) -> mo.ThetaTensors:
    """Map the raw vector into the admissible parameter ranges."""
    if raw.kind == HIGH:
        alphas = dict(raw.alphas)
    else:
        mask = ad.constant(_LOW_BOUNDED)
        inv = ad.constant(1.0 - _LOW_BOUNDED)
        alphas = {n: ad.add(ad.mul(ad.sigmoid(raw.alphas[n]), mask),
                            ad.mul(ad.softplus(raw.alphas[n]), inv))
                  for n in FIELD_NAMES}
    return mo.ThetaTensors(
        kind=raw.kind, alphas=alphas,
        gamma=ad.sigmoid(raw.gamma_raw),
        sigma_x=ad.softplus(raw.sigma_x_raw),
        sigma_y=ad.softplus(raw.sigma_y_raw),
        lambda_x=raw.lambda_x, lambda_y=raw.lambda_y,
        n_dof=raw.n_dof, sign=raw.sign, halfwidth=raw.support)


def raw_to_model_params(raw: RawTheta) -> ModelParams:
    detached = raw.detached()
    tt = natural_tensors(detached)
    if raw.kind == HIGH:
        specs = {n: rf.RadialKernelSpec(tt.alphas[n].data.copy()) for n in FIELD_NAMES}
    else:
        specs = {n: rf.ParametricCovariance(tt.alphas[n].data.copy()) for n in FIELD_NAMES}
    return ModelParams(
        kind=raw.kind, field_specs=specs,
        gamma=float(tt.gamma.data),
        sigma_x=float(tt.sigma_x.data), sigma_y=float(tt.sigma_y.data),
        lambda_x=float(tt.lambda_x.data), lambda_y=float(tt.lambda_y.data),
        n_dof=raw.n_dof, sign=raw.sign, kernel_halfwidth=raw.support)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators with standard bias correction."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])

    def state_arrays(self) -> dict:
        out = {"t": np.asarray(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.t = int(arrays["t"])
        for i in range(len(self.m)):
            self.m[i][...] = arrays[f"m{i}"]
            self.v[i][...] = arrays[f"v{i}"]


def adam_step(state: AdamState, params, lr: float) -> None:
    """One Adam update in place; missing gradients count as zero."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise CalibrationError(
                f"non-finite gradient in parameter {i} at Adam step {state.t}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1 ** state.t)
        v_hat = state.v[i] / (1.0 - b2 ** state.t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# cutouts and data targets
# ---------------------------------------------------------------------------

def sample_cutouts(slices, window, count: int, seed: int) -> list[PhaseImage]:
    """Uniformly random window-sized cutouts from a stack of 2-d images."""
    window = tuple(int(n) for n in window)
    slices = list(slices)
    for im in slices:
        if any(e < w for e, w in zip(im.extents, window)):
            raise CalibrationError(
                f"slice extents {im.extents} smaller than window {window}")
    gen = rng_from_seed(seed)
    out = []
    for _ in range(int(count)):
        im = slices[int(gen.integers(len(slices)))]
        ox = int(gen.integers(im.extents[0] - window[0] + 1))
        oy = int(gen.integers(im.extents[1] - window[1] + 1))
        out.append(PhaseImage(labels=im.labels[ox:ox + window[0], oy:oy + window[1]],
                              voxel_size=im.voxel_size))
    return out


@dataclass
class TargetSummary:
    """Volume fractions and 2-d specific surface areas of the training data
    (voxel units), the ground truth for the early-stopping metric."""

    volume_fractions: np.ndarray
    specific_surfaces: np.ndarray


def data_summary_from_slices(slices) -> TargetSummary:
    slices = list(slices)
    eps = np.zeros(3)
    sv = np.zeros(3)
    for im in slices:
        eps += np.asarray(volume_fractions(im))
        sv += np.asarray([specific_surface_2d(im, p, voxel_size=1.0) for p in (1, 2, 3)])
    return TargetSummary(volume_fractions=eps / len(slices),
                         specific_surfaces=sv / len(slices))


def _data_stack(data_tpcf: TPCFSet, h_max: int) -> np.ndarray:
    grid = np.arange(h_max + 1, dtype=np.float64)
    if data_tpcf.h_grid.shape != grid.shape or not np.allclose(data_tpcf.h_grid, grid):
        raise CalibrationError(
            f"data curves must be tabulated on h = 0..{h_max}")
    return data_tpcf.stacked()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _soft_field_tensor(kernels, tt, window, seed: int, nu: float) -> Tensor:
    t1, t2, t3 = mo.soft_channels(kernels, tt, window, seed, nu)
    return ad.stack_last((t1, t2, t3))


def _batch_mean(terms) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, ad.constant(1.0 / len(terms)))


def _tpcf_discrepancy(channels, geom: TpcfGeometry, data: np.ndarray) -> Tensor:
    """Summed squared gap between data curves and one realization's curves."""
    curves = tpcf_curves_tensor(channels, geom)
    total = None
    for idx, pair in enumerate(PAIRS):
        diff = ad.sub(ad.constant(data[idx]), curves[pair])
        term = ad.sum_all(ad.square(diff))
        total = term if total is None else ad.add(total, term)
    return total


def loss_tpcf(raw: RawTheta, data_tpcf: TPCFSet, batch: int, seed: int, *,
              window, nu: float = 10.0, geom: TpcfGeometry | None = None) -> Tensor:
    """Batch-mean squared two-point-curve discrepancy over soft realizations."""
    h_max = int(round(float(data_tpcf.h_grid[-1])))
    data = _data_stack(data_tpcf, h_max)
    if geom is None:
        geom = build_tpcf_geometry(window, h_max)
    tt = natural_tensors(raw)
    kernels = mo.build_kernel_tensors(tt, 2)
    terms = []
    for member in range(batch):
        channels = mo.soft_channels(kernels, tt, window, derive_seed(seed, member), nu)
        terms.append(_tpcf_discrepancy(channels, geom, data))
    return _batch_mean(terms)


def loss_generator_adv(raw: RawTheta, disc: DiscriminatorParams, batch: int,
                       seed: int, *, window, nu: float = 10.0) -> Tensor:
    """Batch mean of (1 - D(soft realization))^2."""
    tt = natural_tensors(raw)
    kernels = mo.build_kernel_tensors(tt, 2)
    terms = []
    for member in range(batch):
        fld = _soft_field_tensor(kernels, tt, window, derive_seed(seed, member), nu)
        score = discriminate(disc, fld)
        terms.append(ad.square(ad.sub(ad.constant(1.0), score)))
    return _batch_mean(terms)


def loss_discriminator(disc: DiscriminatorParams, raw: RawTheta, cutouts,
                       batch: int, seed: int, *, window, nu: float = 10.0,
                       variant: str = "pseudocode") -> Tensor:
    """Discriminator objective as a minimization target.

    "pseudocode": -mean[D(real)^2] + mean[(1 - D(fake))^2], the literal signed
    combination used by the training loop (only the real term is negated).
    "prose": -mean[D(real)^2] - mean[(1 - D(fake))^2], the negation of the
    maximization objective stated alongside it.
    """
    cutouts = list(cutouts)
    if len(cutouts) != batch:
        raise CalibrationError(f"expected {batch} cutouts, got {len(cutouts)}")
    tt = natural_tensors(raw)
    kernels = mo.build_kernel_tensors(tt, 2)
    real_terms = []
    fake_terms = []
    for member, cut in enumerate(cutouts):
        real_terms.append(ad.square(discriminate(disc, cut.one_hot())))
        fld = _soft_field_tensor(kernels, tt, window, derive_seed(seed, member), nu)
        fake_terms.append(ad.square(ad.sub(ad.constant(1.0), discriminate(disc, fld))))
    real = _batch_mean(real_terms)
    fake = _batch_mean(fake_terms)
    if variant == "prose":
        return ad.neg(ad.add(real, fake))
    return ad.add(ad.neg(real), fake)


def loss_combined(raw: RawTheta, disc: DiscriminatorParams, data_tpcf: TPCFSet,
                  batch: int, seed: int, *, window, gamma_w: float,
                  nu: float = 10.0, geom: TpcfGeometry | None = None) -> Tensor:
    """Adversarial term plus gamma_w times the two-point term, sharing the
    same batch of soft realizations."""
    h_max = int(round(float(data_tpcf.h_grid[-1])))
    data = _data_stack(data_tpcf, h_max)
    if geom is None:
        geom = build_tpcf_geometry(window, h_max)
    tt = natural_tensors(raw)
    kernels = mo.build_kernel_tensors(tt, 2)
    adv_terms = []
    tpcf_terms = []
    for member in range(batch):
        channels = mo.soft_channels(kernels, tt, window, derive_seed(seed, member), nu)
        fld = ad.stack_last(channels)
        score = discriminate(disc, fld)
        adv_terms.append(ad.square(ad.sub(ad.constant(1.0), score)))
        tpcf_terms.append(_tpcf_discrepancy(channels, geom, data))
    return ad.add(_batch_mean(adv_terms),
                  ad.mul(ad.constant(float(gamma_w)), _batch_mean(tpcf_terms)))


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

def early_stop_metric(theta: ModelParams, data_summary: TargetSummary,
                      mc_count: int, seed: int, *, window) -> float:
    """Sum of absolute volume-fraction and specific-surface errors, estimated
    from mc_count hard 2-d realizations (descriptors averaged first)."""
    if mc_count < 1:
        raise CalibrationError("mc_count must be >= 1")
    eps = np.zeros(3)
    sv = np.zeros(3)
    for k in range(mc_count):
        img = mo.realize_hard(theta, window, derive_seed(seed, k))
        eps += np.asarray(volume_fractions(img))
        sv += np.asarray([specific_surface_2d(img, p, voxel_size=1.0) for p in (1, 2, 3)])
    eps /= mc_count
    sv /= mc_count
    return float(np.abs(eps - data_summary.volume_fractions).sum()
                 + np.abs(sv - data_summary.specific_surfaces).sum())


class EarlyStopper:
    """Keeps the arg-min-metric parameter snapshot; signals a stop once no
    improvement happened for ``patience`` epochs, never before epoch
    ``min_epochs + 1``."""

    def __init__(self, min_epochs: int = 100, patience: int = 500):
        self.min_epochs = int(min_epochs)
        self.patience = int(patience)
        self.best_metric = np.inf
        self.best_epoch: int | None = None
        self.best_state: dict | None = None

    def update(self, epoch: int, metric: float, state: dict) -> bool:
        if metric < self.best_metric:
            self.best_metric = float(metric)
            self.best_epoch = int(epoch)
            self.best_state = {k: v.copy() for k, v in state.items()}
        return (epoch > self.min_epochs
                and self.best_epoch is not None
                and epoch - self.best_epoch >= self.patience)


# ---------------------------------------------------------------------------
# training log and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainingLog:
    """Per-step loss trace plus the early-stopping record.

    Pretraining rows carry epoch 0. ``loss`` is the generator-side loss of
    the step, ``loss_d`` the discriminator loss, ``metric`` the early-stop
    metric computed at the end of an epoch.
    """

    rows: list = field(default_factory=list)
    pretrain_generator_steps: int = 0
    pretrain_discriminator_steps: int = 0
    best_epoch: int | None = None
    best_metric: float | None = None

    def add(self, epoch: int, step: int, loss=None, loss_d=None, metric=None):
        self.rows.append({"epoch": epoch, "step": step, "loss": loss,
                          "loss_d": loss_d, "metric": metric})

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows if r["loss"] is not None])

    def metrics(self) -> list:
        return [(r["epoch"], r["metric"]) for r in self.rows if r["metric"] is not None]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,step,loss,loss_D,early_stop_metric\n")
            for r in self.rows:
                cells = [str(r["epoch"]), str(r["step"])]
                for key in ("loss", "loss_d", "metric"):
                    cells.append("" if r[key] is None else repr(float(r[key])))
                fh.write(",".join(cells) + "\n")


@dataclass
class TrainResult:
    params: ModelParams
    raw: RawTheta
    log: TrainingLog
    disc: DiscriminatorParams | None = None
    adam: AdamState | None = None
    disc_adam: AdamState | None = None


def save_checkpoint(directory, raw: RawTheta, adam: AdamState, log: TrainingLog,
                    config: TrainConfig, next_epoch: int,
                    disc: DiscriminatorParams | None = None,
                    disc_adam: AdamState | None = None,
                    best_state: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    mo.save_params(raw_to_model_params(raw), os.path.join(directory, "params.json"))
    arrays = {f"theta_{k}": v for k, v in raw.state_arrays().items()}
    arrays.update({f"adam_{k}": v for k, v in adam.state_arrays().items()})
    if best_state is not None:
        arrays.update({f"best_{k}": v for k, v in best_state.items()})
    np.savez(os.path.join(directory, "raw.npz"), **arrays)
    if disc is not None:
        darrays = disc.state_arrays()
        if disc_adam is not None:
            darrays.update({f"adam_{k}": v for k, v in disc_adam.state_arrays().items()})
        np.savez(os.path.join(directory, "disc.npz"), **darrays)
    log.to_csv(os.path.join(directory, "log.csv"))
    meta = {"next_epoch": int(next_epoch), "seed": config.seed,
            "kind": config.kind,
            "best_epoch": log.best_epoch, "best_metric": log.best_metric,
            "pretrain_generator_steps": log.pretrain_generator_steps,
            "pretrain_discriminator_steps": log.pretrain_discriminator_steps}
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")


def load_checkpoint(directory, config: TrainConfig,
                    with_disc: bool = False):
    """Restore (raw, adam, next_epoch, meta, best_state[, disc, disc_adam])
    saved by save_checkpoint under the same config."""
    raw = init_raw_theta(config)
    adam = AdamState.for_params(raw.parameters())
    data = np.load(os.path.join(directory, "raw.npz"))
    raw.load_state_arrays({k[len("theta_"):]: data[k] for k in data.files
                           if k.startswith("theta_")})
    adam.load_state_arrays({k[len("adam_"):]: data[k] for k in data.files
                            if k.startswith("adam_")})
    best_state = {k[len("best_"):]: data[k] for k in data.files
                  if k.startswith("best_")} or None
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    if not with_disc:
        return raw, adam, int(meta["next_epoch"]), meta, best_state
    disc = init_discriminator(config.disc_config(), derive_seed(config.seed, _S_DISC_INIT))
    disc_adam = AdamState.for_params(disc.tensors())
    ddata = np.load(os.path.join(directory, "disc.npz"))
    disc.load_state_arrays({k: ddata[k] for k in ddata.files if not k.startswith("adam_")})
    disc_adam.load_state_arrays({k[len("adam_"):]: ddata[k] for k in ddata.files
                                 if k.startswith("adam_")})
    return raw, adam, int(meta["next_epoch"]), meta, best_state, disc, disc_adam


def _checkpoint_if_configured(config: TrainConfig, **kwargs) -> None:
    if config.checkpoint_dir:
        save_checkpoint(config.checkpoint_dir, config=config, **kwargs)


def _finite_or_abort(value: float, what: str, config: TrainConfig, **ckpt) -> float:
    if not np.isfinite(value):
        _checkpoint_if_configured(config, **ckpt)
        raise CalibrationError(f"{what} became non-finite; aborted (checkpoint "
                               f"{'written' if config.checkpoint_dir else 'not configured'})")
    return value


# ---------------------------------------------------------------------------
# training procedures
# ---------------------------------------------------------------------------

def train_tppf(data_tpcf: TPCFSet, config: TrainConfig,
               raw: RawTheta | None = None, adam: AdamState | None = None,
               start_epoch: int = 1, log: TrainingLog | None = None) -> TrainResult:
    """Descriptor-matching calibration: Adam on the two-point loss."""
    geom = build_tpcf_geometry(config.window, config.h_max, bandwidth=config.bandwidth)
    _data_stack(data_tpcf, config.h_max)
    raw = raw if raw is not None else init_raw_theta(config)
    params = raw.parameters()
    adam = adam if adam is not None else AdamState.for_params(params)
    log = log if log is not None else TrainingLog()
    for epoch in range(start_epoch, config.n_epoch + 1):
        for step in range(1, config.n_steps + 1):
            ad.zero_grads(params)
            loss = loss_tpcf(raw, data_tpcf, config.batch,
                             derive_seed(config.seed, _S_TRAIN, epoch, step),
                             window=config.window, nu=config.nu, geom=geom)
            value = _finite_or_abort(loss.item(), "loss", config, raw=raw,
                                     adam=adam, log=log, next_epoch=epoch)
            ad.backward(loss, leaves=params)
            adam_step(adam, params, config.lr)
            log.add(epoch, step, loss=value)
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            _checkpoint_if_configured(config, raw=raw, adam=adam, log=log,
                                      next_epoch=epoch + 1)
    return TrainResult(params=raw_to_model_params(raw), raw=raw, log=log, adam=adam)


def _disc_training_step(disc: DiscriminatorParams, disc_adam: AdamState,
                        raw: RawTheta, slices, config: TrainConfig,
                        epoch: int, step: int, pretrain: bool = False) -> tuple[float, bool]:
    """One discriminator step; returns (loss_D, updated?). Updates are skipped
    whenever loss_D <= 0.4 to avoid discriminator overfitting."""
    tag = _S_PRETRAIN if pretrain else _S_CUTOUT
    cutouts = sample_cutouts(slices, config.window, config.batch,
                             derive_seed(config.seed, tag, epoch, step, 0))
    dparams = disc.tensors()
    ad.zero_grads(dparams)
    loss_d = loss_discriminator(disc, raw.detached(), cutouts, config.batch,
                                derive_seed(config.seed, tag, epoch, step, 1),
                                window=config.window, nu=config.nu,
                                variant=config.disc_loss_variant)
    value = float(loss_d.item())
    if not np.isfinite(value):
        raise CalibrationError("discriminator loss became non-finite")
    if value > DISC_GUARD_THRESHOLD:
        ad.backward(loss_d, leaves=dparams)
        adam_step(disc_adam, dparams, config.lr_disc)
        return value, True
    return value, False


def train_gan(slices, config: TrainConfig) -> TrainResult:
    """Adversarial calibration: alternating generator and discriminator blocks."""
    raw = init_raw_theta(config)
    params = raw.parameters()
    adam = AdamState.for_params(params)
    disc = init_discriminator(config.disc_config(), derive_seed(config.seed, _S_DISC_INIT))
    disc_adam = AdamState.for_params(disc.tensors())
    log = TrainingLog()
    for epoch in range(1, config.n_epoch + 1):
        for step in range(1, config.n_steps + 1):
            ad.zero_grads(params)
            loss = loss_generator_adv(raw, disc.detached(), config.batch,
                                      derive_seed(config.seed, _S_TRAIN, epoch, step),
                                      window=config.window, nu=config.nu)
            value = _finite_or_abort(loss.item(), "generator loss", config,
                                     raw=raw, adam=adam, log=log, next_epoch=epoch,
                                     disc=disc, disc_adam=disc_adam)
            ad.backward(loss, leaves=params)
            adam_step(adam, params, config.lr)
            log.add(epoch, step, loss=value)
        for step in range(1, config.n_steps + 1):
            value, _ = _disc_training_step(disc, disc_adam, raw, slices, config,
                                           epoch, step)
            log.add(epoch, step, loss_d=value)
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            _checkpoint_if_configured(config, raw=raw, adam=adam, log=log,
                                      next_epoch=epoch + 1, disc=disc,
                                      disc_adam=disc_adam)
    return TrainResult(params=raw_to_model_params(raw), raw=raw, log=log, disc=disc,
                       adam=adam, disc_adam=disc_adam)


def train_combined(slices, data_tpcf: TPCFSet, config: TrainConfig,
                   metric_fn=None, resume=None) -> TrainResult:
    """Combined calibration: generator pretrained 100 steps on the two-point
    loss, discriminator pretrained 100 steps, then alternating epochs on the
    combined loss with early stopping on the descriptor-error metric.

    ``metric_fn(theta, epoch) -> float`` overrides the Monte-Carlo metric
    (used by tests to inject schedules). ``resume`` names a checkpoint
    directory written by this function under the same config.
    """
    geom = build_tpcf_geometry(config.window, config.h_max, bandwidth=config.bandwidth)
    _data_stack(data_tpcf, config.h_max)
    data_summary = data_summary_from_slices(slices) if metric_fn is None else None
    stopper = EarlyStopper(min_epochs=config.min_epochs, patience=config.patience)
    log = TrainingLog()

    if resume is None:
        pre_config = dataclasses.replace(config, n_epoch=1, n_steps=100,
                                         checkpoint_dir=None, checkpoint_every=0)
        pre = train_tppf(data_tpcf, pre_config)
        raw = pre.raw
        for row in pre.log.rows:
            log.add(0, row["step"], loss=row["loss"])
        log.pretrain_generator_steps = len(pre.log.rows)

        disc = init_discriminator(config.disc_config(),
                                  derive_seed(config.seed, _S_DISC_INIT))
        disc_adam = AdamState.for_params(disc.tensors())
        for step in range(1, 101):
            value, _ = _disc_training_step(disc, disc_adam, raw, slices, config,
                                           0, step, pretrain=True)
            log.add(0, step, loss_d=value)
            log.pretrain_discriminator_steps += 1
        adam = AdamState.for_params(raw.parameters())
        start_epoch = 1
    else:
        raw, adam, start_epoch, meta, best_state, disc, disc_adam = load_checkpoint(
            resume, config, with_disc=True)
        log.pretrain_generator_steps = meta.get("pretrain_generator_steps", 0)
        log.pretrain_discriminator_steps = meta.get("pretrain_discriminator_steps", 0)
        if best_state is not None:
            stopper.best_state = best_state
            stopper.best_epoch = meta.get("best_epoch")
            stopper.best_metric = (meta["best_metric"]
                                   if meta.get("best_metric") is not None else np.inf)

    params = raw.parameters()
    for epoch in range(start_epoch, config.n_epoch + 1):
        for step in range(1, config.n_steps + 1):
            ad.zero_grads(params)
            loss = loss_combined(raw, disc.detached(), data_tpcf, config.batch,
                                 derive_seed(config.seed, _S_TRAIN, epoch, step),
                                 window=config.window, gamma_w=config.gamma_w,
                                 nu=config.nu, geom=geom)
            value = _finite_or_abort(loss.item(), "combined loss", config,
                                     raw=raw, adam=adam, log=log, next_epoch=epoch,
                                     disc=disc, disc_adam=disc_adam)
            ad.backward(loss, leaves=params)
            adam_step(adam, params, config.lr)
            log.add(epoch, step, loss=value)
        last_d = None
        for step in range(1, config.n_steps + 1):
            last_d, _ = _disc_training_step(disc, disc_adam, raw, slices, config,
                                            epoch, step)
            log.add(epoch, step, loss_d=last_d)

        if metric_fn is not None:
            metric = float(metric_fn(raw_to_model_params(raw), epoch))
        else:
            metric = early_stop_metric(raw_to_model_params(raw), data_summary,
                                       config.mc_count,
                                       derive_seed(config.seed, _S_METRIC, epoch),
                                       window=config.window)
        log.add(epoch, config.n_steps, metric=metric)
        should_stop = stopper.update(epoch, metric, raw.snapshot())
        log.best_epoch = stopper.best_epoch
        log.best_metric = stopper.best_metric
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            _checkpoint_if_configured(config, raw=raw, adam=adam, log=log,
                                      next_epoch=epoch + 1, disc=disc,
                                      disc_adam=disc_adam,
                                      best_state=stopper.best_state)
        if should_stop:
            break

    if stopper.best_state is not None:
        raw.load_state_arrays(stopper.best_state)
    return TrainResult(params=raw_to_model_params(raw), raw=raw, log=log, disc=disc,
                       adam=adam, disc_adam=disc_adam)
