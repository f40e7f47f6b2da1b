"""ELBO objective, mini-batch Adam training loop, checkpointing, telemetry."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import molgraph as mg
from . import vaemodel as vm
from .tensorcore import AdamState, NumericFault, Tape, Tensor, adam_step, backward, const


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.006
    batch_size: int = 48
    beta: float = 0.6                    # KL trade-off
    max_linker_nodes: int = 8
    seed: int = 0
    ablate_equivariant: bool = False
    ablate_coord_update: bool = False
    augment_permutation: bool = True
    grad_clip: float | None = None       # numeric rescue only; off by default
    lr_final: float | None = None        # linear decay target; None = constant
    coord_noise: float = 1.2             # history-perturbation scale (0 = exact teacher forcing)
    prior_z_fraction: float = 0.0        # share of samples trained with prior-drawn latents
    mu_weight: float = 1.0               # relative weight of the KL mean-squared part
    latent_sigma_floor: float = 0.0      # min sampling scale for invariant latents
    early_stop_accuracy: float | None = None
    early_stop_coord_mse: float | None = None
    # model widths
    n_h: int = 64
    n_v: int = 16
    hidden: int = 64
    m_h: int = 32
    m_v: int = 8
    enc_layers: int = 4
    dec_layers: int = 4
    type_emb_dim: int = 8
    attn_dim: int = 32

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def model_config(self) -> vm.ModelConfig:
        return vm.ModelConfig(
            n_h=self.n_h, n_v=self.n_v, hidden=self.hidden, m_h=self.m_h, m_v=self.m_v,
            enc_layers=self.enc_layers, dec_layers=self.dec_layers,
            type_emb_dim=self.type_emb_dim, attn_dim=self.attn_dim,
            ablate_equivariant=self.ablate_equivariant,
            ablate_coord_update=self.ablate_coord_update,
        )


def config_from_file(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return config_from_dict(obj)


def config_from_dict(obj: dict) -> TrainConfig:
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(obj) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**obj)


@dataclass
class EpochRecord:
    epoch: int
    reconstruction: float
    kl: float
    coord_mse: float
    accuracy: float
    grad_norm: float
    wall_time: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_json(self, include_wall_time: bool = False) -> str:
        rows = []
        for r in self.epochs:
            d = asdict(r)
            if not include_wall_time:   # wall time is non-reproducible; keep artifacts byte-stable
                d.pop("wall_time")
            rows.append(d)
        return json.dumps({"epochs": rows}, sort_keys=True)


def elbo_loss(model: vm.Model, sample: mg.LinkerSample, beta: float, noise,
              coord_noise: np.ndarray | None = None,
              prior_latents: bool = False,
              mu_weight: float = 1.0,
              sigma_floor: float = 0.0
              ) -> tuple[Tensor, vm.LossBreakdown]:
    """-ELBO: teacher-forced reconstruction terms plus beta-weighted KL.

    mu_weight rescales the mean-squared part of the KL relative to the
    variance part.  Down-weighting it keeps posterior variances near the
    prior (so prior draws stay in-distribution for the decoder) while
    letting posterior means spread into well-separated codes — the
    mechanism free sampling relies on to recover training linkers.
    sigma_floor widens the invariant-latent sampling scale to at least the
    prior's so the decision heads are trained on the region free sampling
    draws from (see Model.sample_latents)."""
    parts = model.elbo_parts(sample, noise, coord_noise=coord_noise,
                             prior_latents=prior_latents,
                             sigma_floor=sigma_floor)
    kl = parts.kl_h + parts.kl_v
    if mu_weight != 1.0:
        kl = kl + const(mu_weight - 1.0) * (parts.kl_h_mu + parts.kl_v_mu)
    total = parts.reconstruction() + const(beta) * kl
    return total, parts


class TrainAbort(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


def train(samples: list[mg.LinkerSample], config: TrainConfig,
          ckpt_path=None, log=None, model: vm.Model | None = None,
          start_step: int = 0) -> tuple[vm.Model, TrainReport]:
    """Shuffled mini-batch Adam over the (optionally fragment-permuted)
    dataset.  A numeric fault rolls parameters back to the last good batch,
    checkpoints them and aborts with the batch index.  Pass a checkpointed
    model plus its saved step count to resume."""
    if not samples:
        raise ValueError("empty dataset")
    data = list(samples)
    if config.augment_permutation:
        data = data + [mg.swap_fragments(s) for s in samples]
    if model is None:
        model = vm.Model(config.model_config(), seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    state = AdamState(step=start_step)
    report = TrainReport()
    last_good = {k: p.data.copy() for k, p in model.params.items()}

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.learning_rate
        if config.lr_final is not None and config.epochs > 1:
            frac = epoch / (config.epochs - 1)
            lr = config.learning_rate + frac * (config.lr_final - config.learning_rate)
        order = rng.permutation(len(data))
        tot_recon = tot_kl = tot_mse_events = 0.0
        n_mse_events = 0
        n_dec = n_cor = 0
        gnorms = []
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            acc: dict[str, np.ndarray] = {}
            try:
                for si in batch:
                    s = data[si]
                    n_l = s.full.n - s.n_frag
                    noise = vm.prior_noise(rng, n_l, model.config)
                    cnoise = None
                    if config.coord_noise > 0:
                        # shared shift plus per-node jitter, random magnitudes:
                        # free-running coordinate errors are strongly correlated
                        # across the linker, so iid noise alone is off-distribution
                        shift = rng.uniform(0.0, config.coord_noise) \
                            * rng.standard_normal(3)
                        jitter = rng.uniform(0.0, config.coord_noise) \
                            * rng.standard_normal((n_l, 3))
                        cnoise = shift[None, :] + jitter
                    prior_z = rng.random() < config.prior_z_fraction
                    tape = Tape()
                    with tape:
                        total, parts = elbo_loss(model, s, config.beta, noise,
                                                 cnoise, prior_latents=prior_z,
                                                 mu_weight=config.mu_weight,
                                                 sigma_floor=config.latent_sigma_floor)
                    grads = backward(tape, total)
                    for name, p in model.params.items():
                        g = grads.get(p)
                        acc[name] = g if name not in acc else acc[name] + g
                    tot_recon += float(parts.reconstruction().data)
                    tot_kl += float((parts.kl_h + parts.kl_v).data)
                    tot_mse_events += parts.coord_mse_mean * parts.n_coord_events
                    n_mse_events += parts.n_coord_events
                    n_dec += parts.n_decisions
                    n_cor += parts.n_correct
                scale = 1.0 / len(batch)
                mean_grads = {k: v * scale for k, v in acc.items()}
                gn = float(np.sqrt(sum(float((g * g).sum()) for g in mean_grads.values())))
                if config.grad_clip is not None and gn > config.grad_clip:
                    clip = config.grad_clip / gn
                    mean_grads = {k: v * clip for k, v in mean_grads.items()}
                adam_step(model.params, mean_grads, state, lr=lr)
                gnorms.append(gn)
                last_good = {k: p.data.copy() for k, p in model.params.items()}
            except NumericFault as e:
                for k, p in model.params.items():
                    p.data = last_good[k]
                if ckpt_path is not None:
                    vm.save_checkpoint(model, ckpt_path, extra={"adam_step": state.step})
                raise TrainAbort(f"numeric fault in epoch {epoch} batch {b0 // config.batch_size}: {e}",
                                 epoch, b0 // config.batch_size) from e
        rec = EpochRecord(
            epoch=epoch,
            reconstruction=tot_recon / len(data),
            kl=tot_kl / len(data),
            coord_mse=(tot_mse_events / n_mse_events) if n_mse_events else 0.0,
            accuracy=n_cor / max(n_dec, 1),
            grad_norm=float(np.mean(gnorms)) if gnorms else 0.0,
            wall_time=time.perf_counter() - t0,
        )
        report.epochs.append(rec)
        if log:
            log(f"epoch {rec.epoch}: recon {rec.reconstruction:.4f} kl {rec.kl:.4f} "
                f"coord_mse {rec.coord_mse:.5f} acc {rec.accuracy:.3f}")
        if ckpt_path is not None:
            vm.save_checkpoint(model, ckpt_path, extra={"adam_step": state.step})
        if (config.early_stop_accuracy is not None
                and rec.accuracy >= config.early_stop_accuracy
                and (config.early_stop_coord_mse is None
                     or rec.coord_mse <= config.early_stop_coord_mse)):
            break
    if ckpt_path is not None:
        vm.save_checkpoint(model, ckpt_path, extra={"adam_step": state.step})
    return model, report


def teacher_forced_eval(model: vm.Model, samples: list[mg.LinkerSample],
                        config: TrainConfig | None = None) -> tuple[float, float]:
    """Decision accuracy and mean per-event coordinate MSE at zero noise.

    When the training config fed the decoder prior-drawn latents
    (prior_z_fraction = 1), evaluation matches that regime: the decoder sees
    a seeded prior draw (the prior's zero-noise center is itself
    off-distribution for a decoder trained on unit-variance draws) while the
    type head keeps its posterior path."""
    n_dec = n_cor = 0
    mse_sum = 0.0
    mse_n = 0
    rng = np.random.default_rng(0)
    for s in samples:
        parts = model.elbo_parts(s, _eval_noise(rng, s, model, config),
                                 **_eval_regime(config))
        n_dec += parts.n_decisions
        n_cor += parts.n_correct
        mse_sum += parts.coord_mse_mean * parts.n_coord_events
        mse_n += parts.n_coord_events
    return n_cor / max(n_dec, 1), (mse_sum / mse_n) if mse_n else 0.0


def _eval_regime(config: TrainConfig | None) -> dict:
    if config is None:
        return {}
    return {"prior_latents": config.prior_z_fraction >= 1.0,
            "sigma_floor": config.latent_sigma_floor}


def _eval_noise(rng, s: mg.LinkerSample, model: vm.Model,
                config: TrainConfig | None):
    n_l = s.full.n - s.n_frag
    if config is not None and config.prior_z_fraction >= 1.0:
        return vm.prior_noise(rng, n_l, model.config)
    return vm.zero_noise(n_l, model.config)


def final_geometry_mse(model: vm.Model, samples: list[mg.LinkerSample],
                       config: TrainConfig | None = None) -> float:
    """Per-atom coordinate MSE of the teacher-forced final geometry (the last
    refinement pass over the whole linker), averaged over samples.  Without
    the refinement pass the first placements are the final geometry."""
    per_sample = []
    rng = np.random.default_rng(0)
    for s in samples:
        parts = model.elbo_parts(s, _eval_noise(rng, s, model, config),
                                 **_eval_regime(config))
        updates = [m for k, m in parts.coord_event_mses if k == "updt"]
        if updates:
            per_sample.append(updates[-1])
        else:
            preds = [m for k, m in parts.coord_event_mses if k == "pred"]
            per_sample.append(float(np.mean(preds)) if preds else 0.0)
    return float(np.mean(per_sample)) if per_sample else 0.0
