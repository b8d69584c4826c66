"""Three-phase training: rigid warping, motion field, then auto-selected merge."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from . import losses as L
from .data import Snippet, collate_snippets
from .geometry import (
    bilinear_sample,
    disparity_to_depth,
    pixel_grid,
    pose_vector_to_transform,
    reproject,
)
from .networks import COMPONENT_NAMES, ComponentSet, set_trainable

log = logging.getLogger(__name__)

PHASE_COMPONENTS = {
    1: ("depth", "asa", "ego"),
    2: ("field",),
    3: COMPONENT_NAMES,
}


class NonFiniteLossError(RuntimeError):
    def __init__(self, snippet_ids, step):
        self.snippet_ids = list(snippet_ids)
        self.step = step
        super().__init__(f"non-finite loss at step {step} on snippet(s) {', '.join(self.snippet_ids)}")


@dataclass
class PhaseSpec:
    phase_id: int
    epochs: int = 10

    def __post_init__(self):
        if self.phase_id not in PHASE_COMPONENTS:
            raise ValueError(f"phase must be 1, 2 or 3, got {self.phase_id}")

    @property
    def trainable(self) -> tuple:
        return PHASE_COMPONENTS[self.phase_id]

    @property
    def uses_field(self) -> bool:
        return self.phase_id >= 2

    def flags(self) -> dict:
        return {name: name in self.trainable for name in COMPONENT_NAMES}


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    decay_factor: float = 10.0
    decay_epoch: int = 15
    batch_size: int = 4
    grad_clip: float | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.decay_factor <= 0 or self.batch_size < 1:
            raise ValueError("learning rate, decay factor and batch size must be positive")
        if self.decay_epoch < 0:
            raise ValueError("decay_epoch must be non-negative")


@dataclass
class ModelConfig:
    backbone: str = "resnet18"
    squeeze: str = "mean"
    scales: tuple = (0, 1, 2, 3)
    min_depth: float = 0.1
    max_depth: float = 100.0
    pose_scale: float = 0.01
    field_scale: float = 0.01
    pretrained: str | None = None

    def __post_init__(self):
        self.scales = tuple(self.scales)

    def build(self) -> ComponentSet:
        return ComponentSet(self.backbone, self.scales, self.squeeze, self.pose_scale, self.field_scale)


@dataclass
class ScheduleConfig:
    phase_epochs: tuple = (10, 10, 10)
    phases: tuple = (1, 2, 3)
    seed: int = 0
    max_steps_per_phase: int | None = None
    # per-epoch snapshots cost a full checkpoint each; latest.pt is always kept
    epoch_checkpoints: bool = True

    def __post_init__(self):
        self.phase_epochs = tuple(self.phase_epochs)
        self.phases = tuple(self.phases)
        if len(self.phase_epochs) != 3:
            raise ValueError("phase_epochs needs one entry per phase")
        if not self.phases or any(p not in PHASE_COMPONENTS for p in self.phases):
            raise ValueError(f"phases must be drawn from 1, 2, 3, got {self.phases}")
        if list(self.phases) != sorted(set(self.phases)):
            raise ValueError("phases must be increasing and unique")


def learning_rate(global_epoch: int, cfg: OptimizerConfig) -> float:
    """Step decay on the global (all-phase) epoch counter."""
    return cfg.lr / cfg.decay_factor if global_epoch >= cfg.decay_epoch else cfg.lr


# ---------------------------------------------------------------------------
# loss evaluation


@dataclass
class PhaseLoss:
    total: torch.Tensor
    terms: dict
    maps: dict = field(default_factory=dict)


def _upsample(x, size):
    if x.shape[-2:] == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def check_phase_flags(phase: PhaseSpec, nets: ComponentSet):
    expected = phase.flags()
    if nets.trainable != expected:
        raise ValueError(
            f"component flags {nets.trainable} do not match phase {phase.phase_id} ({expected})"
        )


def compute_phase_loss(phase: PhaseSpec, batch, nets: ComponentSet, cfg: L.LossConfig,
                       model_cfg: ModelConfig | None = None, check_flags: bool = True) -> PhaseLoss:
    """Evaluate the phase objective on a batch (or a single :class:`Snippet`).

    Returns the scalar loss averaged over the decoder scales, the per-term
    values, and full-resolution diagnostic maps from the finest scale.
    """
    if isinstance(batch, Snippet):
        batch = collate_snippets([batch])
    if check_flags:
        check_phase_flags(phase, nets)
    model_cfg = model_cfg or ModelConfig()
    p = phase.phase_id
    frames, K = batch["frames"], batch["K"]
    dtype = next(nets.parameters()).dtype
    frames = frames.to(dtype)
    K = K.to(dtype)
    b, _, _, h, w = frames.shape
    target = frames[:, 1]
    sources = [frames[:, 0], frames[:, 2]]

    rigid_grad = p != 2
    with torch.set_grad_enabled(rigid_grad and torch.is_grad_enabled()):
        disps = nets.depth(torch.cat([target] + sources, 0))
    if p == 2:
        with torch.no_grad():
            feats = [nets.asa(torch.cat([target, s], 1)) for s in sources]
            ego = [nets.ego(st) for st, _ in feats]
        fields = [nets.field(dyn) for _, dyn in feats]
    else:
        motion = nets.motion(target, sources, with_field=phase.uses_field)
        ego, fields = motion.ego_motion, motion.motion_field

    transforms = [pose_vector_to_transform(e) for e in ego]
    pe_identity = [L.photometric_error(target, s, cfg.alpha, cfg) for s in sources]
    ident = pixel_grid(h, w, dtype, frames.device)

    totals = []
    terms_acc = {k: 0.0 for k in ("pe", "pe_min", "ge", "ds", "fs")}
    maps = {}
    for si, disp in enumerate(disps):
        disp = _upsample(disp, (h, w))
        depth_all = disparity_to_depth(disp, model_cfg.min_depth, model_cfg.max_depth)
        depth_t = depth_all[:b]
        depth_src = [depth_all[b * (j + 1): b * (j + 2)] for j in range(len(sources))]

        pe_ego, ge_ego, pe_fld, ge_fld, flows, syn_ego = [], [], [], [], [], []
        for j, src in enumerate(sources):
            if p != 2:
                grid = reproject(depth_t, transforms[j], K)
                syn = bilinear_sample(src, grid)
                syn_ego.append(syn)
                pe_ego.append(L.photometric_error(target, syn, cfg.alpha, cfg))
                ge_ego.append(L.geometric_error(depth_t, depth_src[j], None, K, grid=grid))
            if phase.uses_field:
                grid_f = reproject(depth_t, transforms[j], K, fields[j])
                syn_f = bilinear_sample(src, grid_f)
                pe_fld.append(L.photometric_error(target, syn_f, cfg.alpha, cfg))
                ge_fld.append(L.geometric_error(depth_t, depth_src[j], None, K, grid=grid_f))
                # smoothness acts on the field only: rigid inputs are detached
                if p == 3:
                    grid_s = reproject(depth_t.detach(), transforms[j].detach(), K, fields[j])
                else:
                    grid_s = grid_f
                flows.append((grid_s.coords - ident).permute(0, 3, 1, 2))

        if p == 1:
            pe_list, ge_list, m_dyn = pe_ego, ge_ego, None
        elif p == 2:
            pe_list, ge_list, m_dyn = pe_fld, ge_fld, None
        else:
            m_dyn = [L.dynamic_select_mask(pe_ego[j], pe_fld[j], ge_ego[j], ge_fld[j], cfg.eta)
                     for j in range(len(sources))]
            pe_list = [L.merge_consistency(pe_ego[j], pe_fld[j], m_dyn[j]) for j in range(len(sources))]
            ge_list = [L.merge_consistency(ge_ego[j], ge_fld[j], m_dyn[j]) for j in range(len(sources))]

        with torch.no_grad():
            best = torch.stack(pe_list).min(0).values
            best_id = torch.stack(pe_identity).min(0).values
            m_auto = (best < best_id).to(dtype)
        l_pe = L.min_reduce_masked(pe_list, m_auto)
        l_ge = L.min_reduce_masked(ge_list, m_auto)
        total = l_pe + cfg.lambda_G * l_ge
        terms_acc["pe"] += float(l_pe.detach())
        terms_acc["pe_min"] += float(best.mean())
        terms_acc["ge"] += float(l_ge.detach())
        if p in (1, 3):
            l_ds = L.disparity_smoothness(disp[:b], target)
            total = total + cfg.lambda_D * l_ds
            terms_acc["ds"] += float(l_ds.detach())
        if phase.uses_field:
            depth_w = depth_t.detach()
            l_fs = sum(L.motion_field_smoothness(f, depth_w) for f in flows) / len(flows)
            total = total + cfg.lambda_F * l_fs
            terms_acc["fs"] += float(l_fs.detach())
        totals.append(total)

        if si == 0:
            maps = {"disp": disp[:b].detach(), "depth": depth_t.detach(), "m_auto": m_auto,
                    "pe": best.detach()}
            if pe_ego:
                maps["pe_ego"] = torch.stack(pe_ego).min(0).values.detach()
                maps["synthesized"] = [s.detach() for s in syn_ego]
            if pe_fld:
                maps["pe_field"] = torch.stack(pe_fld).min(0).values.detach()
            if m_dyn is not None:
                maps["m_dynamic"] = torch.stack(m_dyn).amax(0)
                maps["m_dynamic_per_source"] = m_dyn
                maps["pe_merged"] = best.detach()
            maps["ge"] = torch.stack(ge_list).min(0).values.detach()
            if fields:
                maps["motion_field"] = [f.detach() for f in fields]
            maps["ego"] = [e.detach() for e in ego]

    n = len(totals)
    total = sum(totals) / n
    terms = {k: v / n for k, v in terms_acc.items()}
    terms["total"] = float(total.detach())
    return PhaseLoss(total=total, terms=terms, maps=maps)


# ---------------------------------------------------------------------------
# schedule


def parameter_digest(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    global_epoch: int = 0
    step: int = 0
    phase: int = 1
    phase_epoch: int = 0


def save_checkpoint(path, nets: ComponentSet, optimizer, state: TrainState, extra=None):
    payload = {
        "components": nets.component_state(),
        "trainable": dict(nets.trainable),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "state": asdict(state),
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, nets: ComponentSet, optimizer=None) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    nets.load_component_state(payload["components"])
    set_trainable(nets, payload.get("trainable", {}))
    if optimizer is not None and payload.get("optimizer") is not None:
        optimizer.load_state_dict(payload["optimizer"])
    return TrainState(**payload["state"])


def make_optimizer(nets: ComponentSet, cfg: OptimizerConfig):
    return torch.optim.Adam(nets.parameters(), lr=cfg.lr, betas=cfg.betas)


def _epoch_order(n: int, seed: int, global_epoch: int) -> list[int]:
    g = torch.Generator().manual_seed(seed * 100003 + global_epoch)
    return torch.randperm(n, generator=g).tolist()


def validation_loss(nets, dataset, phase: PhaseSpec, loss_cfg, model_cfg, batch_size=4) -> float:
    """Mean photometric term on a held-out split (inference mode)."""
    if dataset is None or len(dataset) == 0:
        return float("nan")
    nets.eval()
    vals = []
    with torch.no_grad():
        for i in range(0, len(dataset), batch_size):
            batch = collate_snippets([dataset[k] for k in range(i, min(i + batch_size, len(dataset)))])
            out = compute_phase_loss(phase, batch, nets, loss_cfg, model_cfg, check_flags=False)
            vals.append(out.terms["pe"])
    nets.apply_modes(True)
    return sum(vals) / len(vals)


class Trainer:
    """Runs phases in order, one Adam optimizer over all components.

    Frozen components have ``requires_grad`` off, so Adam never touches them.
    Checkpoints are written after every epoch (``latest.pt``, plus
    ``epoch_XXX.pt`` unless ``epoch_checkpoints`` is off) and at every phase
    end (``phase_K.pt``). A ``step_callback`` returning ``False`` ends the
    whole run after the current epoch's bookkeeping.
    """

    def __init__(self, nets: ComponentSet, train_set, schedule: ScheduleConfig,
                 optim_cfg: OptimizerConfig, loss_cfg: L.LossConfig, model_cfg: ModelConfig,
                 out_dir, val_set=None, step_callback=None):
        self.nets = nets
        self.train_set = train_set
        self.val_set = val_set
        self.schedule = schedule
        self.optim_cfg = optim_cfg
        self.loss_cfg = loss_cfg
        self.model_cfg = model_cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.optimizer = make_optimizer(nets, optim_cfg)
        self.state = TrainState(phase=schedule.phases[0])
        self.step_callback = step_callback
        self.history = []

    @property
    def metrics_path(self):
        return self.out_dir / "metrics.jsonl"

    def resume(self, path=None):
        path = Path(path) if path else self.out_dir / "latest.pt"
        self.state = load_checkpoint(path, self.nets, self.optimizer)
        log.info("resumed from %s at step %d (phase %d)", path, self.state.step, self.state.phase)
        return self.state

    def _log(self, record):
        self.history.append(record)
        with open(self.metrics_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _phase_start_epoch(self, phase_id):
        # the global epoch counts every earlier phase, whether or not this run trains it
        return sum(self.schedule.phase_epochs[:phase_id - 1])

    def train_step(self, phase: PhaseSpec, snippets) -> dict:
        batch = collate_snippets(snippets)
        self.optimizer.zero_grad(set_to_none=True)
        try:
            out = compute_phase_loss(phase, batch, self.nets, self.loss_cfg, self.model_cfg)
        except ValueError as exc:
            if "non-finite" not in str(exc):
                raise
            err = NonFiniteLossError(batch["ids"], self.state.step)
            log.error("%s", err)
            raise err from exc
        if not torch.isfinite(out.total):
            err = NonFiniteLossError(batch["ids"], self.state.step)
            log.error("%s", err)
            raise err
        out.total.backward()
        if self.optim_cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(
                [p for p in self.nets.parameters() if p.requires_grad], self.optim_cfg.grad_clip)
        self.optimizer.step()
        return out.terms

    def run(self):
        bs = self.optim_cfg.batch_size
        n = len(self.train_set)
        halt = False
        for pid in self.schedule.phases:
            if pid < self.state.phase or halt:
                continue
            phase = PhaseSpec(pid, self.schedule.phase_epochs[pid - 1])
            set_trainable(self.nets, phase.flags())
            self.nets.apply_modes(True)
            first_epoch = self._phase_start_epoch(pid)
            if self.state.phase != pid:
                self.state.phase, self.state.phase_epoch = pid, 0
            self.state.global_epoch = first_epoch + self.state.phase_epoch
            phase_steps = 0
            stop = False
            while self.state.phase_epoch < phase.epochs and not stop:
                lr = learning_rate(self.state.global_epoch, self.optim_cfg)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                order = _epoch_order(n, self.schedule.seed, self.state.global_epoch)
                epoch_losses = []
                t0 = time.time()
                for i in range(0, n, bs):
                    snippets = [self.train_set[k] for k in order[i:i + bs]]
                    terms = self.train_step(phase, snippets)
                    self.state.step += 1
                    phase_steps += 1
                    epoch_losses.append(terms["total"])
                    rec = {"step": self.state.step, "phase": pid, "epoch": self.state.global_epoch,
                           "lr": lr, **{f"loss_{k}": v for k, v in terms.items()}}
                    self._log(rec)
                    if self.step_callback is not None and self.step_callback(self, rec) is False:
                        halt = True
                        stop = True
                        break
                    limit = self.schedule.max_steps_per_phase
                    if limit is not None and phase_steps >= limit:
                        stop = True
                        break
                val = validation_loss(self.nets, self.val_set, phase, self.loss_cfg, self.model_cfg, bs)
                self._log({"phase": pid, "epoch": self.state.global_epoch, "step": self.state.step,
                           "train_loss": sum(epoch_losses) / max(len(epoch_losses), 1),
                           "val_pe": None if math.isnan(val) else val,
                           "seconds": time.time() - t0})
                self.state.phase_epoch += 1
                self.state.global_epoch += 1
                if self.schedule.epoch_checkpoints:
                    save_checkpoint(self.out_dir / f"epoch_{self.state.global_epoch:03d}.pt",
                                    self.nets, self.optimizer, self.state)
                save_checkpoint(self.out_dir / "latest.pt", self.nets, self.optimizer, self.state)
            if halt:
                break
            save_checkpoint(self.out_dir / f"phase_{pid}.pt", self.nets, self.optimizer, self.state)
            # mark the phase finished so a resumed run starts with the next one
            self.state.phase, self.state.phase_epoch = pid + 1, 0
            save_checkpoint(self.out_dir / "latest.pt", self.nets, self.optimizer, self.state)
        return self.nets


def run_schedule(dataset, nets: ComponentSet, schedule: ScheduleConfig, optim_cfg: OptimizerConfig,
                 loss_cfg: L.LossConfig, model_cfg: ModelConfig, out_dir, val_set=None,
                 resume=False, step_callback=None):
    trainer = Trainer(nets, dataset, schedule, optim_cfg, loss_cfg, model_cfg, out_dir,
                      val_set=val_set, step_callback=step_callback)
    if resume:
        trainer.resume(resume if isinstance(resume, (str, Path)) else None)
    trainer.run()
    return trainer
