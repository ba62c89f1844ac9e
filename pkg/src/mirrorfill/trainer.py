"""Three-stage training: warp-subnet pretraining, reconstruction pretraining
with a frozen warp subnet, then end-to-end adversarial fine-tuning.

Determinism contract: every source of randomness is derived from the config
seed. Weight init uses per-net seeds, each step reseeds the torch RNG from
(seed, stage, step) before any stochastic op (dropout), and masks are drawn
from (seed, stage, epoch, index). Equal configs therefore reproduce
checkpoints bit-exactly and a run resumed from a checkpoint matches an
uninterrupted one step for step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import torch

from .errors import TrainingDiverged, ValidationError
from .illum import clamp_ratio, illumination_consistency_loss
from .io import load_checkpoint, save_checkpoint
from .losses import (
    LossReport,
    LossWeights,
    adversarial_losses,
    l2_loss,
    landmark_loss,
    patch_d_loss,
    perceptual_loss,
    perceptual_symmetry_loss,
    total_loss,
    tv_loss,
)
from .masks import random_irregular_mask, random_rect_mask
from .nets import (
    build_feature_extractor,
    build_flownet,
    build_global_discriminator,
    build_lightnet,
    build_part_discriminator,
    build_recnet,
    crop_parts,
    forward_group_fused,
)
from .optim import Adam
from .pipeline import run_pipeline
from .synth import apply_occlusion, make_dataset
from .warp import FlowField, bilinear_warp, downsample_flow, downsample_mask, flip_horizontal

log = logging.getLogger(__name__)

GEN_NETS = ("flownet", "lightnet", "recnet")
DISC_NETS = ("disc_global", "disc_left_eye", "disc_right_eye", "disc_nose", "disc_mouth")
PART_FOR_DISC = {
    "disc_left_eye": "left_eye", "disc_right_eye": "right_eye",
    "disc_nose": "nose", "disc_mouth": "mouth",
}

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100
D_COLLAPSE_FLOOR = 1e-4
D_COLLAPSE_PATIENCE = 500


def mix_seed(*parts: int) -> int:
    """SplitMix64-style hash of integer parts into a 63-bit seed."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = (h ^ (p & 0xFFFFFFFFFFFFFFFF)) * 0xBF58476D1CE4E5B9 % (1 << 64)
        h = (h ^ (h >> 27)) * 0x94D049BB133111EB % (1 << 64)
        h ^= h >> 31
    return h & 0x7FFFFFFFFFFFFFFF


@dataclass
class TrainConfig:
    scale: float = 0.125
    input_size: int = 64
    seed: int = 0
    epochs_stage1: int = 3
    epochs_stage2: int = 5
    epochs_stage3: int = 10
    n_train: int = 2000
    n_val: int = 16
    train_seed_start: int = 0
    val_seed_start: int = 100_000
    test_seed_start: int = 200_000
    max_illum_delta: float = 0.4
    max_shear: float = 0.1
    mask_kind: str = "rect"  # rect | irregular | mixed
    mask_min_frac: float = 0.03
    mask_max_frac: float = 0.25
    lrs: tuple[float, ...] = (2e-4, 2e-5, 2e-6)
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    adv_ramp_frac: float = 0.5
    val_interval: int = 1000
    val_window: int = 3
    log_interval: int = 500
    checkpoint_interval: int = 0  # 0 = stage boundaries only
    tap: int = 1
    n_landmarks: int = 10
    illum_warp_grad: bool = True
    plain_recnet: bool = False
    adversarial: bool = True
    torch_threads: int = 1  # tiny nets: intra-op threading costs more than it buys
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def base_width(self) -> int:
        return int(round(64 * self.scale))

    @property
    def part_size(self) -> int:
        return self.input_size // 2

    def epochs_for(self, stage: int) -> int:
        return (self.epochs_stage1, self.epochs_stage2, self.epochs_stage3)[stage - 1]


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config(path) -> TrainConfig:
    """Read a flat `key = value` file into a TrainConfig.

    lambda_* keys set the loss weights (lambda_ap takes four comma-separated
    values); everything else maps to config fields by name.
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, val = line.split("=", 1)
        raw[key.strip()] = val.strip()
    return config_from_dict(raw)


def config_from_dict(raw: dict[str, str]) -> TrainConfig:
    cfg_fields = {f.name: f for f in fields(TrainConfig)}
    weight_fields = {f.name: f for f in fields(LossWeights)}
    kwargs: dict = {}
    weights: dict = {}
    for key, val in raw.items():
        if key in weight_fields:
            if key == "lambda_ap":
                weights[key] = tuple(float(v) for v in val.split(","))
            else:
                weights[key] = float(val)
            continue
        if key not in cfg_fields:
            raise ValidationError(f"unknown config key {key!r}")
        ftype = cfg_fields[key].type
        if key == "lrs":
            kwargs[key] = tuple(float(v) for v in val.split(","))
        elif ftype == "bool":
            if val.lower() not in _BOOL:
                raise ValidationError(f"bad boolean for {key!r}: {val!r}")
            kwargs[key] = _BOOL[val.lower()]
        elif ftype == "int":
            kwargs[key] = int(val)
        elif ftype == "float":
            kwargs[key] = float(val)
        else:
            kwargs[key] = val
    if weights:
        kwargs["weights"] = LossWeights(**weights)
    return TrainConfig(**kwargs)


class LrScheduler:
    """Steps down the configured rates when validation stops improving.

    A drop fires when the best value of the last `window` observations is no
    better than the best seen before them; the history restarts after each
    drop.
    """

    def __init__(self, lrs: tuple[float, ...], window: int, index: int = 0,
                 history: list[float] | None = None):
        self.lrs = lrs
        self.window = window
        self.index = index
        self.history: list[float] = list(history or [])

    @property
    def lr(self) -> float:
        return self.lrs[self.index]

    def observe(self, val_loss: float) -> bool:
        self.history.append(val_loss)
        if self.index >= len(self.lrs) - 1 or len(self.history) <= self.window:
            return False
        recent = min(self.history[-self.window:])
        previous = min(self.history[: -self.window])
        if recent >= previous - 1e-12:
            self.index += 1
            self.history = []
            return True
        return False


@dataclass
class TrainingState:
    config: TrainConfig
    nets: dict
    opt_g: Adam | None = None
    opt_d: Adam | None = None
    stage: int = 1
    step_in_stage: int = 0
    global_step: int = 0
    scheduler: LrScheduler | None = None
    guard_initial: float = float("nan")
    guard_count: int = 0
    dcollapse_count: int = 0
    extractor: object = None
    _train_data: list = field(default_factory=list, repr=False)
    _val_data: list = field(default_factory=list, repr=False)
    _real_crops: dict = field(default_factory=dict, repr=False)
    _flipped_lms: dict = field(default_factory=dict, repr=False)

    @property
    def lr(self) -> float:
        return self.scheduler.lr


def build_nets(cfg: TrainConfig) -> dict:
    nets: dict = {}
    s = cfg.seed
    if not cfg.plain_recnet:
        nets["flownet"] = build_flownet(
            scale=cfg.scale, input_size=cfg.input_size, seed=mix_seed(s, 1))
        nets["lightnet"] = build_lightnet(
            scale=cfg.scale, input_size=cfg.input_size, seed=mix_seed(s, 2))
    else:
        nets["flownet"] = None
        nets["lightnet"] = None
    nets["recnet"] = build_recnet(
        scale=cfg.scale, input_size=cfg.input_size, seed=mix_seed(s, 3), tap=cfg.tap)
    nets["disc_global"] = build_global_discriminator(
        scale=cfg.scale, input_size=cfg.input_size, seed=mix_seed(s, 4))
    for i, name in enumerate(DISC_NETS[1:]):
        nets[name] = build_part_discriminator(
            scale=cfg.scale, part_size=cfg.part_size, seed=mix_seed(s, 5 + i))
    return nets


def init_state(cfg: TrainConfig) -> TrainingState:
    if cfg.torch_threads > 0:
        torch.set_num_threads(cfg.torch_threads)
    state = TrainingState(config=cfg, nets=build_nets(cfg))
    state.scheduler = LrScheduler(cfg.lrs, cfg.val_window)
    state.extractor = build_feature_extractor()
    return state


# ---------------------------------------------------------------------------
# data plumbing


def _train_sample(state: TrainingState, idx: int):
    cfg = state.config
    if not state._train_data:
        state._train_data = make_dataset(
            cfg.train_seed_start, cfg.n_train, cfg.input_size,
            cfg.max_illum_delta, cfg.max_shear)
    return state._train_data[idx]


def _val_data(state: TrainingState):
    cfg = state.config
    if not state._val_data:
        state._val_data = make_dataset(
            cfg.val_seed_start, cfg.n_val, cfg.input_size,
            cfg.max_illum_delta, cfg.max_shear)
    return state._val_data


def make_mask(cfg: TrainConfig, seed: int) -> torch.Tensor:
    kind = cfg.mask_kind
    if kind == "mixed":
        kind = "irregular" if seed % 2 else "rect"
    if kind == "rect":
        return random_rect_mask(seed, cfg.input_size, cfg.input_size,
                                cfg.mask_min_frac, cfg.mask_max_frac)
    if kind == "irregular":
        return random_irregular_mask(seed, cfg.input_size, cfg.input_size,
                                     stroke_count=2, max_width=3)
    raise ValidationError(f"unknown mask kind {cfg.mask_kind!r}")


# ---------------------------------------------------------------------------
# per-stage objectives


def _flipped_lm(state, sample):
    lm_flip = state._flipped_lms.get(sample.seed)
    if lm_flip is None:
        lm_flip = sample.landmarks.flipped(state.config.input_size)
        state._flipped_lms[sample.seed] = lm_flip
    return lm_flip


def _warp_losses(state, sample, flow, ratio, i_w_prime=None):
    """Landmark, TV and illumination-consistency terms (stage 1 and 3)."""
    cfg = state.config
    l_lm = landmark_loss(flow, sample.landmarks, _flipped_lm(state, sample))
    l_tv = tv_loss(flow)
    if i_w_prime is None or not cfg.illum_warp_grad:
        flow_illum = flow if cfg.illum_warp_grad else flow.detach()
        i_w_prime = bilinear_warp(flip_horizontal(sample.image), flow_illum)
    l_illum = illumination_consistency_loss(i_w_prime, ratio, sample.image)
    return l_lm, l_tv, l_illum


def _sym_loss(state, out):
    tap = out.tap
    th, tw = tap.shape[-2], tap.shape[-1]
    flow_ds = downsample_flow(out.flow, th, tw)
    s2_ds = downsample_mask(out.s2, th, tw)
    return perceptual_symmetry_loss(tap, out.tap_flip, flow_ds, s2_ds)


def generator_objective(state: TrainingState, sample, mask: torch.Tensor):
    """The stage's non-adversarial generator loss; stage from state.stage.

    Returns (total, report, pipeline_output); the adversarial term is added
    by the caller after the discriminator update.
    """
    cfg, w = state.config, state.config.weights
    stage = state.stage
    i_o = apply_occlusion(sample.image, mask)

    if stage == 1:
        i_o_f = flip_horizontal(i_o)
        x12 = torch.cat([i_o, i_o_f, i_o, i_o_f], dim=0)
        flow_raw, light_raw = forward_group_fused(
            [state.nets["flownet"], state.nets["lightnet"].trunk], x12)
        flow = FlowField(flow_raw)
        ratio = clamp_ratio(light_raw)
        l_lm, l_tv, l_illum = _warp_losses(state, sample, flow, ratio)
        total, report = total_loss(w, landmark=l_lm, tv=l_tv, illum=l_illum)
        return total, report, None

    extra = None
    if stage == 3 and not cfg.plain_recnet and cfg.illum_warp_grad:
        extra = flip_horizontal(sample.image)
    out = run_pipeline(state.nets, i_o, mask, sym_branch=True,
                       preserve_known=False, freeze_warp=(stage == 2),
                       extra_warp=extra)
    l_2 = l2_loss(out.i_hat, sample.image)
    l_p = perceptual_loss(out.i_hat, sample.image, state.extractor)
    l_s = _sym_loss(state, out) if out.flow is not None else 0.0

    if stage == 2:
        total, report = total_loss(w, l2=l_2, perceptual=l_p, symmetry=l_s)
        return total, report, out

    # stage 3: everything but the adversarial term
    l_lm, l_tv, l_illum = 0.0, 0.0, 0.0
    if out.flow is not None:
        l_lm, l_tv, l_illum = _warp_losses(state, sample, out.flow, out.ratio,
                                           i_w_prime=out.extra_warped)
    total, report = total_loss(
        w, l2=l_2, perceptual=l_p, symmetry=l_s,
        illum=l_illum, landmark=l_lm, tv=l_tv)
    return total, report, out


def _disc_grids(state, image: torch.Tensor, lm,
                parts: dict[str, torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    cfg = state.config
    grids = {"global": state.nets["disc_global"](image)}
    if parts is None:
        parts = crop_parts(image, lm, cfg.part_size)
    for disc, part in PART_FOR_DISC.items():
        grids[part] = state.nets[disc](parts[part])
    return grids


def _real_parts(state, sample) -> dict[str, torch.Tensor]:
    """Ground-truth part crops, cached per sample (landmarks never move)."""
    crops = state._real_crops.get(sample.seed)
    if crops is None:
        crops = crop_parts(sample.image, sample.landmarks, state.config.part_size)
        state._real_crops[sample.seed] = crops
    return crops


VAL_MASK_TAG = 0x7A1


def validation_rec_loss(state: TrainingState) -> float:
    """Mean reconstruction loss over the fixed validation set (eval mode)."""
    cfg, w = state.config, state.config.weights
    _set_mode(state, train=False)
    vals = []
    with torch.no_grad():
        for i, sample in enumerate(_val_data(state)):
            mask = make_mask(cfg, mix_seed(cfg.seed, VAL_MASK_TAG, i))
            i_o = apply_occlusion(sample.image, mask)
            out = run_pipeline(state.nets, i_o, mask, preserve_known=False)
            val = w.lambda_r2 * l2_loss(out.i_hat, sample.image) \
                + w.lambda_rp * perceptual_loss(out.i_hat, sample.image, state.extractor)
            vals.append(float(val))
    _set_mode(state, train=True)
    return sum(vals) / len(vals)


def _set_mode(state: TrainingState, train: bool) -> None:
    for net in state.nets.values():
        if net is not None:
            net.train(train)


def _trainable_gen_params(state: TrainingState) -> dict[str, torch.Tensor]:
    stage = state.stage
    names = {1: ("flownet", "lightnet"), 2: ("recnet",),
             3: ("flownet", "lightnet", "recnet")}[stage]
    params: dict[str, torch.Tensor] = {}
    for n in names:
        net = state.nets.get(n)
        if net is None:
            continue
        for k, p in net.named_parameters():
            params[f"{n}.{k}"] = p
    return params


def _disc_params(state: TrainingState) -> dict[str, torch.Tensor]:
    params: dict[str, torch.Tensor] = {}
    for n in DISC_NETS:
        for k, p in state.nets[n].named_parameters():
            params[f"{n}.{k}"] = p
    return params


def begin_stage(state: TrainingState, stage: int) -> None:
    """Transition into a stage: freezing, fresh optimizers, reset guards."""
    cfg = state.config
    state.stage = stage
    state.step_in_stage = 0
    state.guard_initial = float("nan")
    state.guard_count = 0
    state.dcollapse_count = 0
    frozen = stage == 2
    for name in ("flownet", "lightnet"):
        net = state.nets.get(name)
        if net is not None:
            net.requires_grad_(not frozen)
    state.opt_g = Adam(_trainable_gen_params(state), lr=state.scheduler.lr,
                       beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    state.opt_d = None
    if stage == 3 and cfg.adversarial:
        state.opt_d = Adam(_disc_params(state), lr=state.scheduler.lr,
                           beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)


def _adv_active(state: TrainingState) -> bool:
    w = state.config.weights
    return (state.config.adversarial
            and (w.lambda_ag > 0 or any(a > 0 for a in w.lambda_ap)))


def train_step(state: TrainingState, step: int) -> LossReport:
    """One deterministic optimization step of the current stage."""
    cfg = state.config
    stage = state.stage
    torch.manual_seed(mix_seed(cfg.seed, stage, step))
    epoch, idx = divmod(step, cfg.n_train)
    sample = _train_sample(state, idx)
    mask = make_mask(cfg, mix_seed(cfg.seed, stage, epoch, idx, 0xA5))

    total, report, out = generator_objective(state, sample, mask)

    d_loss_val = 0.0
    if stage == 3 and _adv_active(state):
        total_steps = cfg.epochs_for(3) * cfg.n_train
        ramp_steps = max(1, int(math.ceil(cfg.adv_ramp_frac * total_steps)))
        adv_scale = min(1.0, (step + 1) / ramp_steps)

        # one batched real/fake pass per discriminator serves both updates:
        # D-gradients via autograd.grad stop at the discriminator inputs, and
        # the generator term reuses the same fake grids (scored pre-update);
        # the four identically-shaped part discriminators run as one grouped
        # pass
        lm = sample.landmarks
        fake_img = out.i_hat
        fake_parts = crop_parts(fake_img, lm, cfg.part_size)
        real_parts = _real_parts(state, sample)
        real_grids, fake_grids = {}, {}
        pair = state.nets["disc_global"](torch.stack([sample.image, fake_img]))
        real_grids["global"], fake_grids["global"] = pair[0], pair[1]
        parts = list(PART_FOR_DISC.values())
        stacked = torch.stack([
            torch.cat([real_parts[p] for p in parts], dim=0),
            torch.cat([fake_parts[p] for p in parts], dim=0),
        ])
        grids4 = forward_group_fused([state.nets[d] for d in PART_FOR_DISC], stacked)
        for i, part in enumerate(parts):
            real_grids[part], fake_grids[part] = grids4[i][0], grids4[i][1]

        d_terms = [patch_d_loss(real_grids[k], fake_grids[k]) for k in real_grids]
        d_loss = torch.stack(d_terms).mean()
        d_params = list(state.opt_d.params.values())
        d_grads = torch.autograd.grad(d_loss, d_params, retain_graph=True)
        d_loss_val = float(d_loss.detach())

        w_eff = cfg.weights.with_adv_scale(adv_scale)
        _, adv_g = adversarial_losses(
            {k: v.detach() for k, v in real_grids.items()}, fake_grids, w_eff)
        total = total + adv_g
        report.adv_g = float(adv_g.detach())
        report.total = float(total.detach())

        # both gradient sets are taken at the pre-step parameters; the
        # generator backward must run before any in-place weight update,
        # and skips the discriminator weight-grad kernels (already taken)
        for p in d_params:
            p.requires_grad_(False)
        state.opt_g.zero_grad()
        total.backward()
        with torch.no_grad():
            for p, g in zip(d_params, d_grads):
                p.requires_grad_(True)
                p.grad.copy_(g)  # .grad views the optimizer's flat buffer
        state.opt_d.step()
        accepted = state.opt_g.step()
    else:
        state.opt_g.zero_grad()
        total.backward()
        accepted = state.opt_g.step()

    report.step = state.global_step
    report.stage = stage
    report.lr = state.scheduler.lr
    report.adv_d = d_loss_val

    if accepted:
        _update_guards(state, report)
    state.step_in_stage = step + 1
    state.global_step += 1
    return report


def _update_guards(state: TrainingState, report: LossReport) -> None:
    if math.isnan(state.guard_initial):
        state.guard_initial = max(abs(report.total), 1e-12)
    if abs(report.total) > DIVERGENCE_FACTOR * state.guard_initial:
        state.guard_count += 1
        if state.guard_count >= DIVERGENCE_PATIENCE:
            raise TrainingDiverged(
                f"stage {state.stage}: loss {report.total:.3g} above "
                f"{DIVERGENCE_FACTOR}x its initial value for {state.guard_count} steps")
    else:
        state.guard_count = 0
    if state.stage == 3 and state.opt_d is not None:
        if report.adv_d < D_COLLAPSE_FLOOR:
            state.dcollapse_count += 1
            if state.dcollapse_count >= D_COLLAPSE_PATIENCE:
                raise TrainingDiverged(
                    f"discriminator loss below {D_COLLAPSE_FLOOR} "
                    f"for {state.dcollapse_count} steps")
        else:
            state.dcollapse_count = 0


def run_stage(
    state: TrainingState,
    stage: int,
    out_dir=None,
    stop_after: int | None = None,
    resume: bool = False,
    log_rows: list | None = None,
) -> TrainingState:
    """Run (or resume) one stage for its configured number of epochs."""
    cfg = state.config
    if resume:
        if state.stage != stage:
            raise ValidationError(
                f"checkpoint is mid-stage {state.stage}, cannot resume stage {stage}")
    else:
        begin_stage(state, stage)
    _set_mode(state, train=True)
    n_steps = cfg.epochs_for(stage) * cfg.n_train
    csv_path = Path(out_dir) / "losses.csv" if out_dir else None
    if csv_path and not csv_path.exists():
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(LossReport.csv_header() + "\n")
    csv_buf: list[str] = []
    done = 0
    for step in range(state.step_in_stage, n_steps):
        if stop_after is not None and done >= stop_after:
            break
        report = train_step(state, step)
        done += 1
        if csv_path:
            csv_buf.append(report.csv_row())
            if len(csv_buf) >= 200:
                _append_csv(csv_path, csv_buf)
        if log_rows is not None:
            log_rows.append(report)
        if cfg.log_interval and (step + 1) % cfg.log_interval == 0:
            log.info("stage %d step %d/%d total %.4f lr %g",
                     stage, step + 1, n_steps, report.total, state.scheduler.lr)
        if stage >= 2 and cfg.val_interval and (step + 1) % cfg.val_interval == 0:
            val = validation_rec_loss(state)
            if state.scheduler.observe(val):
                log.info("validation stalled, lr -> %g", state.scheduler.lr)
                state.opt_g.lr = state.scheduler.lr
                if state.opt_d is not None:
                    state.opt_d.lr = state.scheduler.lr
        if out_dir and cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
            save_state(state, Path(out_dir) / f"ckpt_stage{stage}_step{step + 1}.symc")
    if csv_path:
        _append_csv(csv_path, csv_buf)
    if out_dir and state.step_in_stage >= n_steps:
        save_state(state, Path(out_dir) / f"ckpt_stage{stage}_end.symc")
    return state


def _append_csv(path: Path, buf: list[str]) -> None:
    if buf:
        with path.open("a") as f:
            f.write("\n".join(buf) + "\n")
        buf.clear()


def train_stage1(cfg: TrainConfig, out_dir=None, **kw) -> TrainingState:
    state = init_state(cfg)
    if cfg.plain_recnet:
        return state  # nothing to pretrain without the warp subnet
    return run_stage(state, 1, out_dir=out_dir, **kw)


def train_stage2(cfg: TrainConfig, state: TrainingState, out_dir=None, **kw) -> TrainingState:
    return run_stage(state, 2, out_dir=out_dir, **kw)


def train_stage3(cfg: TrainConfig, state: TrainingState, out_dir=None, **kw) -> TrainingState:
    return run_stage(state, 3, out_dir=out_dir, **kw)


def train_full(cfg: TrainConfig, out_dir=None) -> TrainingState:
    state = train_stage1(cfg, out_dir=out_dir)
    state = train_stage2(cfg, state, out_dir=out_dir)
    state = train_stage3(cfg, state, out_dir=out_dir)
    if out_dir:
        save_state(state, Path(out_dir) / "final.symc")
    return state


# ---------------------------------------------------------------------------
# checkpointing


def state_arrays(state: TrainingState) -> dict[str, torch.Tensor]:
    cfg = state.config
    arrays: dict[str, torch.Tensor] = {}
    for name in (*GEN_NETS, *DISC_NETS):
        net = state.nets.get(name)
        if net is None:
            continue
        for k, v in net.state_dict().items():
            arrays[f"net.{name}.{k}"] = v
    if state.opt_g is not None:
        arrays.update(state.opt_g.state_arrays("opt.g"))
    if state.opt_d is not None:
        arrays.update(state.opt_d.state_arrays("opt.d"))
    meta = {
        "stage": state.stage, "step_in_stage": state.step_in_stage,
        "global_step": state.global_step, "lr_index": state.scheduler.index,
        "guard_count": state.guard_count, "dcollapse_count": state.dcollapse_count,
        "input_size": cfg.input_size, "base_width": cfg.base_width,
        "tap": cfg.tap, "plain": int(cfg.plain_recnet),
    }
    for k, v in meta.items():
        arrays[f"meta.{k}"] = torch.tensor(float(v))
    arrays["meta.guard_initial"] = torch.tensor(state.guard_initial)
    arrays["meta.val_history"] = torch.tensor(state.scheduler.history, dtype=torch.float32)
    return arrays


def save_state(state: TrainingState, path) -> None:
    save_checkpoint(path, state_arrays(state))


def load_state(cfg: TrainConfig, path) -> TrainingState:
    """Rebuild a TrainingState ready to resume from a checkpoint."""
    arrays = load_checkpoint(path)
    plain = bool(int(arrays["meta.plain"].item()))
    if plain != cfg.plain_recnet:
        cfg = replace(cfg, plain_recnet=plain)
    if cfg.torch_threads > 0:
        torch.set_num_threads(cfg.torch_threads)
    state = TrainingState(config=cfg, nets=build_nets(cfg))
    state.extractor = build_feature_extractor()
    for name in (*GEN_NETS, *DISC_NETS):
        net = state.nets.get(name)
        if net is None:
            continue
        sd = net.state_dict()
        new_sd = {k: arrays[f"net.{name}.{k}"].reshape(v.shape)
                  for k, v in sd.items()}
        net.load_state_dict(new_sd)
    state.stage = int(arrays["meta.stage"].item())
    state.step_in_stage = int(arrays["meta.step_in_stage"].item())
    state.global_step = int(arrays["meta.global_step"].item())
    state.guard_count = int(arrays["meta.guard_count"].item())
    state.dcollapse_count = int(arrays["meta.dcollapse_count"].item())
    state.guard_initial = float(arrays["meta.guard_initial"].item())
    state.scheduler = LrScheduler(
        cfg.lrs, cfg.val_window,
        index=int(arrays["meta.lr_index"].item()),
        history=[float(v) for v in arrays["meta.val_history"]],
    )
    frozen = state.stage == 2
    for name in ("flownet", "lightnet"):
        net = state.nets.get(name)
        if net is not None:
            net.requires_grad_(not frozen)
    if any(k.startswith("opt.g.") for k in arrays):
        state.opt_g = Adam(_trainable_gen_params(state), lr=state.scheduler.lr,
                           beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        state.opt_g.load_state_arrays("opt.g", arrays)
    if any(k.startswith("opt.d.") for k in arrays):
        state.opt_d = Adam(_disc_params(state), lr=state.scheduler.lr,
                           beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        state.opt_d.load_state_arrays("opt.d", arrays)
    return state


def nets_from_checkpoint(path, torch_threads: int = 0) -> tuple[dict, int]:
    """Load just the networks for inference; returns (nets, input_size)."""
    arrays = load_checkpoint(path)
    cfg = TrainConfig(
        input_size=int(arrays["meta.input_size"].item()),
        scale=float(arrays["meta.base_width"].item()) / 64.0,
        tap=int(arrays["meta.tap"].item()),
        plain_recnet=bool(int(arrays["meta.plain"].item())),
        torch_threads=torch_threads,
    )
    nets = build_nets(cfg)
    for name in (*GEN_NETS, *DISC_NETS):
        net = nets.get(name)
        if net is None:
            continue
        sd = net.state_dict()
        net.load_state_dict({k: arrays[f"net.{name}.{k}"].reshape(v.shape)
                             for k, v in sd.items()})
        net.eval()
    return nets, cfg.input_size
