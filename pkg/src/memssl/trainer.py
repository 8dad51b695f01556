"""Self-supervised pretraining loop: EMA teacher, 12-view student, and the
view-memory consistency loss.

Per step: the teacher encodes the two global views of every sample (no
gradients), the student encodes all twelve views, one memory block is
sampled and shared, and the loss is the mean cross-entropy between each
teacher global view's softened similarity distribution over the block and
every other student view's distribution. The same-index global view is
excluded from its own teacher pairing. Teacher global embeddings are pushed
to the memory after the loss; on the very first step the bank is empty, so
that step pushes first and accepts the one-off self-match (cold start).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import backend as K
from .autodiff import Tensor, backward
from .checkpoint import CheckpointData, check_shapes, load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, write_run_manifest
from .data import BalancedSampler, ImageStore, SampleRecord, generate_views, view_seed
from .errors import ConfigError
from .memory import MemoryBank
from .optim import OptimizerState, adamw_step, sorted_names
from .schedules import ScheduleSet
from .seeding import derived_rng
from .vit import clone_params, encode_batch, init_encoder_params, project_batch

LOSS_CSV_HEADER = ["step", "epoch", "lr", "wd", "tau_t", "momentum", "loss"]


@dataclass
class TrainState:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    opt: OptimizerState
    bank: MemoryBank
    schedules: ScheduleSet
    seed: int
    step: int = 0
    epoch: int = 0


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], momentum: float) -> None:
    """theta_t <- m * theta_t + (1 - m) * theta_s for every parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    if set(teacher) != set(student):
        missing = sorted(set(student) ^ set(teacher))
        raise ValueError(f"teacher/student parameter names differ: {missing}")
    one_minus = 1.0 - momentum
    for name in sorted_names(teacher):
        t = teacher[name].data
        t *= momentum
        t += one_minus * student[name].data


def _pair_mask(n_teacher_views: int, n_student_views: int, batch: int) -> np.ndarray:
    """(T*B, V*B) mask of valid (teacher view, student view) pairs: same
    sample only, and never a view against its own teacher copy. Teacher rows
    and student global columns are sample-major; student locals follow all
    globals, also sample-major."""
    mask = np.zeros((n_teacher_views * batch, n_student_views * batch), dtype=np.float32)
    for i in range(batch):
        for g in range(n_teacher_views):
            row = n_teacher_views * i + g
            for v in range(n_student_views):
                if v == g:
                    continue  # no self-distillation of the identical crop
                if v < 2:
                    col = 2 * i + v
                else:
                    col = 2 * batch + 10 * i + (v - 2)
                mask[row, col] = 1.0
    return mask


@lru_cache(maxsize=8)
def _cached_pair_mask(n_teacher_views: int, n_student_views: int, batch: int) -> np.ndarray:
    return _pair_mask(n_teacher_views, n_student_views, batch)


def _consistency_loss(
    teacher_embeds: np.ndarray,
    student_embeds: Tensor,
    block_rows: np.ndarray,
    tau_t: float,
    tau_s: float,
    batch: int,
    n_teacher_views: int,
) -> Tensor:
    """Mean cross-entropy over valid pairs between detached teacher
    distributions and student log-distributions over the shared block."""
    if block_rows.shape[1] != teacher_embeds.shape[1]:
        raise ValueError(
            f"block dim {block_rows.shape[1]} != embedding dim {teacher_embeds.shape[1]}"
        )
    dtype = student_embeds.dtype  # float64 in gradient-check shadow mode
    n_student_views = student_embeds.shape[0] // batch
    rows = block_rows.astype(dtype, copy=False)
    teacher_p = K.softmax_fwd(teacher_embeds.astype(dtype) @ rows.T, 1.0 / tau_t)
    student_logq = ad.log_softmax_rows(ad.matmul(student_embeds, Tensor(rows.T.copy())), tau_s)
    # ce[t, v] = -sum_j p_t[j] * logq_v[j], then a masked mean over pairs
    ce = ad.multiply_scalar(ad.matmul(Tensor(teacher_p), ad.transpose(student_logq, (1, 0))), -1.0)
    mask = _cached_pair_mask(n_teacher_views, n_student_views, batch).astype(dtype, copy=False)
    n_pairs = float(mask.sum())
    masked = ad.multiply(ce, Tensor(mask))
    return ad.multiply_scalar(ad.mean_all(masked), mask.size / n_pairs)


def ssl_loss(
    teacher_global_embeds,
    student_embeds: Tensor,
    bank: MemoryBank,
    block: np.ndarray,
    tau_t: float,
    tau_s: float,
) -> Tensor:
    """Single-sample loss surface: 2 teacher global embeddings vs 12 student
    view embeddings over one shared memory block."""
    teacher = np.asarray(
        teacher_global_embeds.data if isinstance(teacher_global_embeds, Tensor) else teacher_global_embeds,
        dtype=np.float32,
    )
    if teacher.shape[0] != 2 or student_embeds.shape[0] != 12:
        raise ValueError(
            f"expected 2 teacher and 12 student embeddings, got "
            f"{teacher.shape[0]} and {student_embeds.shape[0]}"
        )
    return _consistency_loss(
        teacher, student_embeds, bank.rows(block), tau_t, tau_s, batch=1, n_teacher_views=2
    )


def init_train_state(config: RunConfig, total_steps: int) -> TrainState:
    seed = config.run.seed
    student = init_encoder_params(config.encoder, derived_rng(seed, "init"))
    teacher = clone_params(student, requires_grad=False)
    schedules = ScheduleSet(
        total_steps=total_steps,
        lr_start=config.schedule.lr_start,
        lr_end=config.schedule.lr_end,
        wd_start=config.schedule.wd_start,
        wd_end=config.schedule.wd_end,
        tau_s=config.schedule.tau_s,
        tau_t_start=config.schedule.tau_t_start,
        tau_t_end=config.schedule.tau_t_end,
        tau_t_ramp_epochs=config.schedule.tau_t_ramp_epochs,
        ema_start=config.schedule.ema_start,
        ema_end=config.schedule.ema_end,
    )
    bank = MemoryBank(config.memory.capacity, config.encoder.proj_out_dim, config.memory.block_size)
    return TrainState(
        student=student,
        teacher=teacher,
        opt=OptimizerState.for_params(student),
        bank=bank,
        schedules=schedules,
        seed=seed,
    )


def _stack_views(viewsets) -> tuple[np.ndarray, np.ndarray]:
    """Sample-major stacks: globals (2B, gpx, gpx, 3), locals (10B, lpx, lpx, 3)."""
    globals_ = np.stack([v for vs in viewsets for v in vs.global_views])
    locals_ = np.stack([v for vs in viewsets for v in vs.local_views])
    return globals_, locals_


def pretrain_step(state: TrainState, viewsets, config: RunConfig) -> float:
    """One optimization step over a batch of ViewSets; returns the loss."""
    batch = len(viewsets)
    globals_, locals_ = _stack_views(viewsets)
    vit_cfg = config.encoder

    with ad.no_grad():
        if config.pretrain.teacher_uses_locals:
            # teacher rows must be sample-major across all 12 views
            t_cls_g = encode_batch(globals_, state.teacher, vit_cfg)
            t_cls_l = encode_batch(locals_, state.teacher, vit_cfg)
            t_g = project_batch(t_cls_g, state.teacher).data
            t_l = project_batch(t_cls_l, state.teacher).data
            t_embeds = np.concatenate(
                [
                    np.concatenate([t_g[2 * i : 2 * i + 2], t_l[10 * i : 10 * i + 10]])
                    for i in range(batch)
                ]
            )
            t_globals = t_g
            n_teacher_views = 12
        else:
            t_cls = encode_batch(globals_, state.teacher, vit_cfg)
            t_embeds = project_batch(t_cls, state.teacher).data
            t_globals = t_embeds
            n_teacher_views = 2

    pushed_early = False
    if state.bank.filled == 0:
        # cold start: nothing stored yet, so seed the memory with this step's
        # teacher globals and accept the one-off self-match
        state.bank.push(t_globals)
        pushed_early = True

    if config.memory.fixed_partition:
        block = state.bank.next_partition_block()
    else:
        block = state.bank.sample_block(derived_rng(state.seed, "block", state.step))

    s_cls_g = encode_batch(globals_, state.student, vit_cfg)
    s_cls_l = encode_batch(locals_, state.student, vit_cfg)
    s_embeds = ad.concat(
        [project_batch(s_cls_g, state.student), project_batch(s_cls_l, state.student)], axis=0
    )

    tau_t = state.schedules.teacher_temperature(state.epoch)
    loss = _consistency_loss(
        t_embeds,
        s_embeds,
        state.bank.rows(block),
        tau_t,
        state.schedules.tau_s,
        batch,
        n_teacher_views,
    )
    loss_value = loss.item()

    backward(loss)
    grads = {name: p.grad for name, p in state.student.items()}
    adamw_step(state.student, grads, state.opt, state.schedules.lr(state.step), state.schedules.wd(state.step))
    for p in state.student.values():
        p.zero_grad()

    ema_update(state.teacher, state.student, state.schedules.ema_momentum(state.step))

    if not pushed_early:
        state.bank.push(t_globals)
    state.step += 1
    return loss_value


def _checkpoint_data(state: TrainState, config: RunConfig, sampler: BalancedSampler | None) -> CheckpointData:
    return CheckpointData(
        config_hash=config_hash(config),
        step=state.step,
        epoch=state.epoch,
        student={n: p.data for n, p in state.student.items()},
        teacher={n: p.data for n, p in state.teacher.items()},
        opt_t=state.opt.t,
        opt_beta1=state.opt.beta1,
        opt_beta2=state.opt.beta2,
        opt_eps=state.opt.eps,
        opt_m=state.opt.m,
        opt_v=state.opt.v,
        seed=state.seed,
        sampler_state=sampler.state() if sampler is not None else {},
        bank_blob=state.bank.snapshot(),
    )


def restore_train_state(config: RunConfig, total_steps: int, data: CheckpointData) -> tuple[TrainState, dict]:
    """Rebuild a TrainState from a container; shapes are validated against
    the active config."""
    state = init_train_state(config, total_steps)
    reference = {n: p.data.shape for n, p in state.student.items()}
    check_shapes(data.student, reference, "student")
    check_shapes(data.teacher, reference, "teacher")
    check_shapes(data.opt_m, reference, "optimizer.m")
    check_shapes(data.opt_v, reference, "optimizer.v")
    for name, arr in data.student.items():
        state.student[name].data[...] = arr
    for name, arr in data.teacher.items():
        state.teacher[name].data[...] = arr
    state.opt.m = {n: a.copy() for n, a in data.opt_m.items()}
    state.opt.v = {n: a.copy() for n, a in data.opt_v.items()}
    state.opt.t = data.opt_t
    state.opt.beta1 = data.opt_beta1
    state.opt.beta2 = data.opt_beta2
    state.opt.eps = data.opt_eps
    state.bank = MemoryBank.restore(data.bank_blob, config.memory.block_size)
    state.step = data.step
    state.epoch = data.epoch
    state.seed = data.seed
    return state, data.sampler_state


def pretrain(
    config: RunConfig,
    records: list[SampleRecord],
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    log_every: int = 0,
) -> Path:
    """Run the full pretraining loop over the train split; writes the run
    manifest, a checkpoint series, and the loss CSV. Returns the final
    checkpoint path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write_probe"
    try:
        probe.write_bytes(b"")
    except OSError as exc:
        raise ConfigError(f"output directory {out_dir} is not writable: {exc}") from exc
    probe.unlink()

    train_records = [r for r in records if r.split == "train"]
    if not train_records:
        raise ConfigError("no train-split records in the manifest")
    sampler = BalancedSampler(train_records, config.pretrain.batch_size, config.run.seed)
    steps_per_epoch = sampler.batches_per_epoch()
    total_steps = max(1, config.pretrain.epochs * steps_per_epoch)

    if resume_from is not None:
        data = load_checkpoint(resume_from, expected_hash=config_hash(config))
        state, sampler_state = restore_train_state(config, total_steps, data)
        if sampler_state:
            sampler.restore_state(sampler_state)
    else:
        state = init_train_state(config, total_steps)

    write_run_manifest(config, out_dir, {"backend": K.active_backend()})
    if resume_from is None:
        save_checkpoint(_checkpoint_data(state, config, sampler), out_dir / "initial.mmfm")

    store = ImageStore()
    path_index = {r.path: i for i, r in enumerate(train_records)}
    loss_tmp = out_dir / "losses.csv.tmp"
    mode = "a" if resume_from is not None and loss_tmp.exists() else "w"
    try:
        with open(loss_tmp, mode, newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if mode == "w":
                writer.writerow(LOSS_CSV_HEADER)
            for epoch in range(state.epoch, config.pretrain.epochs):
                state.epoch = epoch
                for _ in range(steps_per_epoch):
                    batch = sampler.next_batch()
                    viewsets = [
                        generate_views(
                            store.get(r.path),
                            config.augment,
                            view_seed(state.seed, path_index[r.path], epoch),
                            config.encoder.global_view_px,
                            config.encoder.local_view_px,
                            source_id=r.path,
                        )
                        for r in batch
                    ]
                    step_before = state.step
                    loss = pretrain_step(state, viewsets, config)
                    writer.writerow(
                        [
                            step_before,
                            epoch,
                            repr(state.schedules.lr(step_before)),
                            repr(state.schedules.wd(step_before)),
                            repr(state.schedules.teacher_temperature(epoch)),
                            repr(state.schedules.ema_momentum(step_before)),
                            repr(loss),
                        ]
                    )
                    if log_every and state.step % log_every == 0:
                        print(f"step {state.step}/{total_steps} loss {loss:.4f}", flush=True)
                state.epoch = epoch + 1
                if config.pretrain.checkpoint_every and (epoch + 1) % config.pretrain.checkpoint_every == 0:
                    save_checkpoint(
                        _checkpoint_data(state, config, sampler),
                        out_dir / f"ckpt_epoch{epoch + 1:04d}.mmfm",
                    )
        if config.pretrain.epochs > 0:
            final = out_dir / "final.mmfm"
            save_checkpoint(_checkpoint_data(state, config, sampler), final)
        else:
            final = out_dir / "initial.mmfm"
        loss_tmp.replace(out_dir / "losses.csv")
    except BaseException:
        if loss_tmp.exists() and resume_from is None:
            loss_tmp.unlink()
        raise
    return final
