"""Self-distillation training loop over multi-scale views.

One step works on a batch of images.  Per image the sampler draws two Global
crops plus Mid and Local crops; the step then runs twice symmetrically, each
Global taking one turn as the teacher's anchor while the other Global and all
Mid/Local crops play student.  Students are encoded once; only the transport
to the anchor frame and the masks differ between the two passes.

The student parameter set is: encoder, prototype head, and the positional
group for the configured mode (offset nets + scale adapters, or embedding
tables).  The teacher mirrors the encoder only and follows it by EMA; teacher
logits are computed outside the tape, with the student's current head and
table values treated as constants.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import TrainConfig, validate_config
from .distill import (
    ScheduleValues,
    ema_update,
    head_logits,
    masked_kl_group,
    masked_kl_visible,
    schedule,
    student_distribution,
    symmetric_agreement,
    teacher_distribution,
    total_loss,
    update_center,
)
from .mpa import (
    MODE_MPA,
    MODE_PER_SCALE,
    MODE_SHARED,
    OffsetNetParams,
    apply_adapter,
    effective_mask,
    init_offset_net,
    interpolate_table,
    landing_positions,
    normalized_token_coords,
    offset_forward,
    transport_apply,
    transport_weights,
)
from .numeric import Stream, Tape, Tensor, ops
from .numeric.tensor import default_dtype
from .numeric.tree import tree_leaves, tree_map
from .ssm import SCALE_TAGS, EncoderParams, encode, init_encoder_params
from .views import (
    CropSpec,
    TokenGrid,
    ViewBatch,
    geometry_map,
    image_frame_landings,
    photometric,
    render_crop,
    sample_views,
    visibility_mask,
)

logger = logging.getLogger("psmb.train")

SHARED_TABLE_KEY = "IMG"


# -- parameter containers ----------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    """Student state: encoder, prototype head (K, d), and one positional
    group selected by the mpa mode (the other two stay None)."""

    encoder: EncoderParams
    head: Tensor
    offsets: Optional[Dict[str, OffsetNetParams]] = None
    adapters: Optional[Dict[str, Tensor]] = None
    tables: Optional[Dict[str, Tensor]] = None


@dataclass(frozen=True)
class TrainState:
    config: TrainConfig
    seed: int
    step: int
    total_steps: int
    student: ModelParams
    teacher: EncoderParams
    center: np.ndarray


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    total_loss: float
    loss_gm: float
    loss_gl: float
    loss_agree: float
    lambda1: float
    lambda2: float
    tau_t: float
    m: float
    grad_norm: float
    wall_ms: float

    def to_json(self) -> str:
        # wall_ms stays out of the file: identical runs must write
        # identical bytes, and timing is the one field that never repeats
        fields = dataclasses.asdict(self)
        del fields["wall_ms"]
        return json.dumps(fields)


def init_model(config: TrainConfig, stream: Stream) -> ModelParams:
    dt = default_dtype()
    d = config.encoder.d
    enc = init_encoder_params(config.encoder, stream.fork("encoder"))
    k = config.distill.n_prototypes
    # 0.02 keeps initial logits small enough that the tempered softmaxes
    # start far from one-hot; features arrive with unit RMS from the encoder.
    head = Tensor(stream.fork("head").normal(0.0, 0.02, size=(k, d)).astype(dt))

    mode = config.mpa.mode
    offsets = adapters = tables = None
    if mode == MODE_MPA:
        offsets = {tag: init_offset_net(stream.fork("offsets", tag), config.mpa.hidden)
                   for tag in SCALE_TAGS}
        adapters = {tag: Tensor(np.zeros(d, dtype=dt)) for tag in SCALE_TAGS}
    elif mode == MODE_PER_SCALE:
        patch = config.encoder.patch_size
        tables = {}
        for tag in SCALE_TAGS:
            h, w = config.views.grid(tag, patch)
            tables[tag] = Tensor(np.zeros((h * w, d), dtype=dt))
    elif mode == MODE_SHARED:
        h, w = config.views.grid("G", config.encoder.patch_size)
        tables = {SHARED_TABLE_KEY: Tensor(np.zeros((h * w, d), dtype=dt))}
    return ModelParams(encoder=enc, head=head, offsets=offsets,
                       adapters=adapters, tables=tables)


def init_train_state(config: TrainConfig, seed: int,
                     total_steps: Optional[int] = None) -> TrainState:
    student = init_model(config, Stream(seed, "init"))
    teacher = tree_map(lambda t: Tensor(t.data.copy()), student.encoder)
    center = np.zeros(config.distill.n_prototypes, dtype=default_dtype())
    if total_steps is None:
        total_steps = config.optim.epochs  # refined by pretrain once n is known
    return TrainState(config=config, seed=seed, step=0, total_steps=total_steps,
                      student=student, teacher=teacher, center=center)


# -- view batch assembly -----------------------------------------------------

@dataclass(frozen=True)
class BatchViews:
    """Per-image crop geometry plus photometric-augmented pixels stacked per
    scale: pixels[tag] has shape (B, V_tag, res, res, 3), image-major."""

    batches: Tuple[ViewBatch, ...]
    pixels: Dict[str, np.ndarray]


def assemble_batch(images: np.ndarray, stream: Stream,
                   config: TrainConfig) -> BatchViews:
    vcfg = config.views
    batches = []
    per_tag: Dict[str, list] = {tag: [] for tag in SCALE_TAGS}
    for i in range(len(images)):
        s = stream.fork("image", i)
        batch = sample_views(s.fork("geom"), vcfg)
        batches.append(batch)
        for tag, specs in (("G", batch.globals_), ("M", batch.mids),
                           ("L", batch.locals_)):
            crops = []
            for j, spec in enumerate(specs):
                crop = render_crop(images[i], spec)
                crops.append(photometric(crop, s.fork("photo", tag, j), vcfg))
            per_tag[tag].append(np.stack(crops) if crops else
                                np.zeros((0, vcfg.res[tag], vcfg.res[tag], 3),
                                         dtype=np.float32))
    pixels = {tag: np.stack(per_tag[tag]) for tag in SCALE_TAGS}
    return BatchViews(batches=tuple(batches), pixels=pixels)


def _view_specs(batch: ViewBatch, tag: str) -> Tuple[CropSpec, ...]:
    return {"G": batch.globals_, "M": batch.mids, "L": batch.locals_}[tag]


# -- positional inputs -------------------------------------------------------

def _encode_pos(student: ModelParams, mode: str, tag: str,
                specs: Sequence[CropSpec], grid_s: TokenGrid,
                grid_img: Tuple[int, int], taped: bool) -> Optional[Tensor]:
    """Additive positional input for a flat run of same-scale crops, or None.

    taped=False reads the current table values as constants (teacher side).
    """
    if mode == MODE_MPA:
        return None
    if mode == MODE_PER_SCALE:
        table = student.tables[tag]
        return table if taped else Tensor(table.data)
    table = student.tables[SHARED_TABLE_KEY]
    if not taped:
        table = Tensor(table.data)
    landings = np.stack([image_frame_landings(spec, grid_s, grid_img)
                         for spec in specs])
    return interpolate_table(table, landings, grid_img)


# -- the train step ----------------------------------------------------------

def _pass_terms(anchor_idx: int, batch: BatchViews, z_s: Dict[str, Tensor],
                q_per_image: List[np.ndarray], student: ModelParams,
                offset_by_tag: Dict[str, Optional[Tensor]],
                grids: Dict[str, TokenGrid], config: TrainConfig,
                sched: ScheduleValues, kept_by_image: np.ndarray):
    """Loss terms of one pass: the non-anchor Global, Mid and Local groups
    against the anchor's teacher distribution, plus optional agreement."""
    vcfg, mode = config.views, config.mpa.mode
    grid_g = grids["G"]
    n_g = grid_g.shape[0] * grid_g.shape[1]
    b = len(batch.batches)
    group_losses: Dict[str, Optional[Tensor]] = {"G": None, "M": None, "L": None}
    p_by_tag: Dict[str, Optional[Tensor]] = {}
    masks_by_tag: Dict[str, np.ndarray] = {}

    for tag in SCALE_TAGS:
        if tag == "G":
            rows = [(i, vcfg.n_global - 1 - anchor_idx) for i in range(b)] \
                if vcfg.n_global > 1 else []
        else:
            count = len(_view_specs(batch.batches[0], tag))
            rows = [(i, j) for i in range(b) for j in range(count)]
        if not rows:
            p_by_tag[tag] = None
            continue

        n_s = grids[tag].shape[0] * grids[tag].shape[1]
        landings = np.empty((len(rows), n_s, 2))
        vis = np.zeros((len(rows), n_g), dtype=np.uint8)
        for r, (i, j) in enumerate(rows):
            spec = _view_specs(batch.batches[i], tag)[j]
            anchor = batch.batches[i].globals_[anchor_idx]
            try:
                landings[r] = geometry_map(spec, anchor, grids[tag], grid_g)
            except ValueError:
                # disjoint from this pass's anchor: land everything off-grid
                # so the transport drops all mass and the mask filter skips it
                landings[r] = -10.0
                continue
            vis[r] = visibility_mask(spec, anchor, grid_g).bits

        v_per_img = len(rows) // b
        row_idx = np.array([i * v_per_img + j for (i, j) in rows]) if tag != "G" \
            else np.array([i * vcfg.n_global + j for (i, j) in rows])
        z_rows = _gather(z_s[tag], row_idx)

        if mode == MODE_MPA:
            refined = landing_positions(landings, offset_by_tag[tag], grid_g.shape)
            weights = transport_weights(refined, grid_g.shape)
            aligned, rho = apply_adapter(z_rows, student.adapters[tag], weights,
                                         config.mpa.row_normalize)
        else:
            clipped = np.clip(landings, [-0.5, -0.5],
                              [grid_g.shape[1] - 0.5, grid_g.shape[0] - 0.5])
            weights = transport_weights(Tensor(clipped), grid_g.shape)
            aligned, rho = transport_apply(weights, z_rows,
                                           config.mpa.row_normalize)

        masks = effective_mask(vis, rho.data)
        masks_by_tag[tag] = masks
        keep = masks.sum(axis=1) > 0
        for r, (i, _) in enumerate(rows):
            if keep[r]:
                kept_by_image[i] += 1
        kept = np.flatnonzero(keep)

        if config.distill.w_agree > 0:
            # the agreement term needs full per-position distributions
            p = student_distribution(head_logits(aligned, student.head),
                                     config.distill.tau_s)
            p_by_tag[tag] = p
            if kept.size:
                q_stack = np.stack([q_per_image[rows[r][0]] for r in kept])
                group_losses[tag] = masked_kl_group(q_stack, _gather(p, kept),
                                                    masks[kept])
        else:
            # only visible positions are supervised, so run the head and
            # softmax on those alone (typically a third of the grid)
            p_by_tag[tag] = None
            if kept.size:
                flat_idx, q_parts, row_of = [], [], []
                counts = np.empty(kept.size, dtype=np.int64)
                for seg, r in enumerate(kept):
                    pos = np.flatnonzero(masks[r])
                    flat_idx.append(r * n_g + pos)
                    q_parts.append(q_per_image[rows[r][0]][pos])
                    row_of.append(np.full(pos.size, seg, dtype=np.int64))
                    counts[seg] = pos.size
                feats = ops.gather_rows(
                    ops.reshape(aligned, (len(rows) * n_g, aligned.shape[-1])),
                    np.concatenate(flat_idx))
                p_vis = student_distribution(head_logits(feats, student.head),
                                             config.distill.tau_s)
                group_losses[tag] = masked_kl_visible(
                    np.concatenate(q_parts), p_vis, np.concatenate(row_of),
                    counts, kept.size)

    agree = None
    if config.distill.w_agree > 0 and p_by_tag.get("M") is not None \
            and p_by_tag.get("L") is not None:
        terms = []
        n_m = len(batch.batches[0].mids)
        n_l = len(batch.batches[0].locals_)
        pairs = min(n_m, n_l)
        for i in range(b):
            for k in range(pairs):
                rm, rl = i * n_m + k, i * n_l + k
                overlap = masks_by_tag["M"][rm] & masks_by_tag["L"][rl]
                terms.append(symmetric_agreement(
                    _single(p_by_tag["M"], rm),
                    _single(p_by_tag["L"], rl), overlap))
        if terms:
            agree = _mean_terms(terms)

    present = [t for t in group_losses.values() if t is not None] + \
              ([agree] if agree is not None else [])
    if not present:
        return None, group_losses, agree
    loss = total_loss(group_losses["G"], group_losses["M"], group_losses["L"],
                      agree, sched, config.distill)
    return loss, group_losses, agree


def _gather(t: Tensor, index) -> Tensor:
    return ops.gather_rows(t, np.asarray(index, dtype=np.int64))


def _single(t: Tensor, row: int) -> Tensor:
    picked = _gather(t, [row])
    return ops.reshape(picked, picked.shape[1:])


def _mean_terms(terms: List[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.mul(total, 1.0 / len(terms))


def _cosine_lr(step: int, total_steps: int, lr: float, lr_min: float) -> float:
    frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + float(np.cos(np.pi * frac)))


@dataclass(frozen=True)
class LossBreakdown:
    """One batch's loss plus the pieces the step and diagnostics read."""
    loss: Tensor
    student: ModelParams
    teacher_logits: np.ndarray
    gm: List[float]
    gl: List[float]
    agree: List[float]


def batch_loss(images: np.ndarray, state: TrainState,
               tape: Optional[Tape] = None,
               teacher_logits: Optional[np.ndarray] = None) -> LossBreakdown:
    """Two-pass distillation loss on one batch, without the update.

    When tape is given the student parameters are watched on it first.
    teacher_logits replaces the teacher encode when provided: a finite
    difference probe perturbs the student and must hold the teacher
    branch at its unperturbed values, which the override does.
    """
    config = state.config
    sched = schedule(state.step, state.total_steps, config.distill)
    patch = config.encoder.patch_size
    grids = {tag: TokenGrid(config.views.grid(tag, patch), patch)
             for tag in SCALE_TAGS}
    grid_img = config.views.grid("G", patch)
    mode = config.mpa.mode

    batch = assemble_batch(images, Stream(state.seed, "step", state.step),
                           config)
    b = len(batch.batches)

    student: ModelParams = state.student if tape is None \
        else tree_map(tape.watch, state.student)

    # students encoded once per scale, all views and images together
    z_s: Dict[str, Tensor] = {}
    for tag in SCALE_TAGS:
        px = batch.pixels[tag]
        if px.shape[1] == 0:
            continue
        flat = px.reshape(b * px.shape[1], *px.shape[2:])
        specs = [s for vb in batch.batches for s in _view_specs(vb, tag)]
        pos = _encode_pos(student, mode, tag, specs, grids[tag], grid_img,
                          taped=True)
        z_s[tag] = encode(flat, tag, config.encoder, student.encoder, pos=pos)

    if teacher_logits is None:
        # teacher sees the same augmented Globals, outside the tape
        g_px = batch.pixels["G"]
        g_flat = g_px.reshape(b * g_px.shape[1], *g_px.shape[2:])
        g_specs = [s for vb in batch.batches for s in vb.globals_]
        t_pos = _encode_pos(student, mode, "G", g_specs, grids["G"],
                            grid_img, taped=False)
        z_t = encode(g_flat, "G", config.encoder, state.teacher, pos=t_pos)
        teacher_logits = z_t.data @ state.student.head.data.T  # (B*V_G, N_G, K)

    offset_by_tag: Dict[str, Optional[Tensor]] = {}
    if mode == MODE_MPA:
        for tag in SCALE_TAGS:
            coords = normalized_token_coords(grids[tag].shape)
            offset_by_tag[tag] = offset_forward(student.offsets[tag], coords,
                                                config.mpa.max_offset)

    n_global = config.views.n_global
    kept_by_image = np.zeros(b, dtype=np.int64)
    pass_losses = []
    gm_vals, gl_vals, agree_vals = [], [], []
    for anchor_idx in range(min(2, n_global)):
        q_per_image = [teacher_distribution(teacher_logits[i * n_global + anchor_idx],
                                            state.center, sched.tau_t)
                       for i in range(b)]
        loss, groups, agree = _pass_terms(
            anchor_idx, batch, z_s, q_per_image, student, offset_by_tag,
            grids, config, sched, kept_by_image)
        if loss is not None:
            pass_losses.append(loss)
        if groups["M"] is not None:
            gm_vals.append(groups["M"].item())
        if groups["L"] is not None:
            gl_vals.append(groups["L"].item())
        if agree is not None:
            agree_vals.append(agree.item())

    for i in range(b):
        if kept_by_image[i] == 0:
            logger.warning("image %d of batch at step %d: every view excluded "
                           "(empty effective masks)", i, state.step)
    if not pass_losses:
        raise RuntimeError(f"step {state.step}: no view in any pass "
                           "produced a nonempty mask")
    return LossBreakdown(loss=_mean_terms(pass_losses), student=student,
                         teacher_logits=teacher_logits, gm=gm_vals,
                         gl=gl_vals, agree=agree_vals)


def train_step(images: np.ndarray, state: TrainState
               ) -> Tuple[float, TrainState, MetricsRecord]:
    """One symmetric two-pass update on a batch of raw images."""
    t0 = time.perf_counter()
    config = state.config
    sched = schedule(state.step, state.total_steps, config.distill)

    tape = Tape()
    terms = batch_loss(images, state, tape)
    loss, student = terms.loss, terms.student

    grads = tape.backward(loss)
    leaves = tree_leaves(student)
    sq = 0.0
    grad_list = []
    for _, t in leaves:
        g = grads[t]  # zeros for watched-but-unreached parameter groups
        grad_list.append(g)
        sq += float((g.astype(np.float64) ** 2).sum())
    grad_norm = float(np.sqrt(sq))
    tape.release()  # the graph is a cycle; free it now, not at next full gc

    clip = config.optim.clip_norm
    scale = 1.0 if clip <= 0 or grad_norm <= clip else clip / grad_norm
    lr_base = _cosine_lr(state.step, state.total_steps,
                         config.optim.lr, config.optim.lr_min)
    lr_eff = lr_base * scale
    # decoupled decay on weight matrices and the head (names W* or "head");
    # gains, biases, the state diagonal and positional parameters are exempt.
    # Decay rides on the unclipped lr so gradient spikes do not suspend it.
    decay = lr_base * config.optim.weight_decay

    leaf_iter = iter(zip(leaves, grad_list))

    def sgd(_: Tensor) -> Tensor:
        (name, t), g = next(leaf_iter)
        new = t.data - lr_eff * g
        if decay > 0.0 and (name.split(".")[-1].startswith("W") or name == "head"):
            new = new - decay * t.data
        return Tensor(new.astype(t.dtype))

    new_student = tree_map(sgd, student)
    new_teacher = ema_update(state.teacher, new_student.encoder, sched.m)
    new_center = update_center(state.center, terms.teacher_logits,
                               config.distill.rho_center).astype(state.center.dtype)

    new_state = dataclasses.replace(
        state, step=state.step + 1, student=new_student, teacher=new_teacher,
        center=new_center)
    wall_ms = (time.perf_counter() - t0) * 1000.0

    def avg(vals):
        return float(np.mean(vals)) if vals else 0.0

    record = MetricsRecord(
        step=state.step, total_loss=loss.item(), loss_gm=avg(terms.gm),
        loss_gl=avg(terms.gl), loss_agree=avg(terms.agree),
        lambda1=float(sched.lambda1), lambda2=float(sched.lambda2),
        tau_t=float(sched.tau_t), m=float(sched.m), grad_norm=grad_norm,
        wall_ms=wall_ms)
    return loss.item(), new_state, record


# -- pretraining loop --------------------------------------------------------

def pretrain(images: np.ndarray, config: TrainConfig, seed: int,
             metrics_path=None,
             checkpoint_fn: Optional[Callable[[TrainState], None]] = None,
             progress: Optional[Callable[[MetricsRecord], None]] = None
             ) -> TrainState:
    """Run the full loop: epochs of seeded shuffled batches over the images.

    metrics_path: JSONL sink, one record per log_every steps plus the final
    step.  checkpoint_fn: called at every run.save_every steps when set.
    """
    validate_config(config)
    n = len(images)
    bs = config.optim.batch_size
    steps_per_epoch = n // bs
    if steps_per_epoch == 0 and config.optim.epochs > 0:
        raise ValueError(f"batch_size {bs} exceeds dataset size {n}")
    total_steps = steps_per_epoch * config.optim.epochs
    state = init_train_state(config, seed, total_steps=total_steps)

    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for epoch in range(config.optim.epochs):
            order = Stream(seed, "order", epoch).permutation(n)
            for k in range(steps_per_epoch):
                idx = order[k * bs:(k + 1) * bs]
                _, state, record = train_step(images[idx], state)
                last = state.step == total_steps
                if sink is not None and (
                        state.step % max(config.run.log_every, 1) == 0 or last):
                    sink.write(record.to_json() + "\n")
                if progress is not None:
                    progress(record)
                if checkpoint_fn is not None and config.run.save_every > 0 \
                        and state.step % config.run.save_every == 0:
                    checkpoint_fn(state)
    finally:
        if sink is not None:
            sink.close()
    return state


# -- checkpoint state mapping ------------------------------------------------

def state_tensors(state: TrainState) -> Dict[str, np.ndarray]:
    out = {name: t.data for name, t in tree_leaves(state.student, "student")}
    out.update({name: t.data for name, t in tree_leaves(state.teacher, "teacher")})
    out["center"] = state.center
    return out


def restore_state(tensors: Dict[str, np.ndarray], step: int,
                  config: TrainConfig, seed: int = 0) -> TrainState:
    """Rebuild a TrainState from a flat tensor table; shapes must match the
    structure the config implies."""
    template = init_train_state(config, seed)

    def fill(tree, prefix):
        names = iter(name for name, _ in tree_leaves(tree, prefix))

        def pick(t: Tensor) -> Tensor:
            name = next(names)
            if name not in tensors:
                raise ValueError(f"checkpoint is missing tensor {name!r}")
            arr = np.asarray(tensors[name])
            if arr.shape != t.shape:
                raise ValueError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, "
                    f"config implies {t.shape}")
            return Tensor(arr.astype(t.dtype))

        return tree_map(pick, tree)

    student = fill(template.student, "student")
    teacher = fill(template.teacher, "teacher")
    center = np.asarray(tensors["center"], dtype=template.center.dtype)
    return dataclasses.replace(template, step=step, student=student,
                               teacher=teacher, center=center)


# -- linear probe ------------------------------------------------------------

def probe_features(images: np.ndarray, config: TrainConfig,
                   encoder: EncoderParams,
                   tables: Optional[Dict[str, Tensor]] = None,
                   chunk: int = 64) -> np.ndarray:
    """Frozen features: encode a deterministic full-window Global crop of
    every image and mean-pool the tokens."""
    patch = config.encoder.patch_size
    spec = CropSpec((0.0, 0.0, 1.0, 1.0), config.views.res["G"], "G", False)
    grid = TokenGrid(config.views.grid("G", patch), patch)
    grid_img = config.views.grid("G", patch)
    mode = config.mpa.mode

    pos = None
    if tables is not None and mode == MODE_PER_SCALE:
        pos = Tensor(tables["G"].data)
    elif tables is not None and mode == MODE_SHARED:
        landings = image_frame_landings(spec, grid, grid_img)
        pos = interpolate_table(Tensor(tables[SHARED_TABLE_KEY].data),
                                landings, grid_img)

    crops = np.stack([render_crop(im, spec) for im in images])
    feats = []
    for lo in range(0, len(crops), chunk):
        z = encode(crops[lo:lo + chunk], "G", config.encoder, encoder, pos=pos)
        feats.append(z.data.mean(axis=1))
    return np.concatenate(feats, axis=0)


def linear_probe(features: np.ndarray, labels: np.ndarray, split_seed: int = 0,
                 iters: int = 500, lr: float = 1.0) -> Tuple[float, float]:
    """Multinomial logistic regression by full-batch gradient descent on an
    80/20 split; returns (train accuracy, test accuracy)."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = len(x)
    perm = Stream(split_seed, "probe-split").permutation(n)
    n_train = int(round(0.8 * n))
    tr, te = perm[:n_train], perm[n_train:]

    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0) + 1e-6
    xs = (x - mu) / sd
    xs = np.concatenate([xs, np.ones((n, 1))], axis=1)

    classes = int(y.max()) + 1
    onehot = np.eye(classes)[y[tr]]
    w = np.zeros((xs.shape[1], classes))
    xtr = xs[tr]
    for _ in range(iters):
        logits = xtr @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * (xtr.T @ (p - onehot)) / n_train

    def acc(idx):
        pred = (xs[idx] @ w).argmax(axis=1)
        return float((pred == y[idx]).mean())

    return acc(tr), acc(te)


def probe_protocol(images: np.ndarray, labels: np.ndarray, state: TrainState,
                   split_seed: int = 0) -> float:
    """Fixed evaluation: teacher encoder features, fixed split, test accuracy."""
    feats = probe_features(images, state.config, state.teacher,
                           tables=state.student.tables)
    _, test_acc = linear_probe(feats, labels, split_seed=split_seed)
    return test_acc


# -- ablation harness --------------------------------------------------------

VIEW_VARIANTS: Dict[str, Tuple[int, int]] = {
    "global_only": (0, 0),
    "global_local": (0, 6),
    "global_mid": (6, 0),
    "full": (6, 6),
}
POSITIONAL_MODES = (MODE_SHARED, MODE_PER_SCALE, MODE_MPA)


def _with_view_counts(config: TrainConfig, n_mid: int, n_local: int) -> TrainConfig:
    views = dataclasses.replace(config.views, n_mid=n_mid, n_local=n_local)
    return dataclasses.replace(config, views=views)


def _with_mode(config: TrainConfig, mode: str) -> TrainConfig:
    mpa = dataclasses.replace(config.mpa, mode=mode)
    return dataclasses.replace(config, mpa=mpa)


def ablation_run(images: np.ndarray, labels: np.ndarray, config: TrainConfig,
                 seeds: Sequence[int], sweep: str = "views",
                 progress: Optional[Callable[[str], None]] = None) -> List[dict]:
    """Probe accuracy per (variant, seed); the probe split stays fixed so
    rows are comparable across variants."""
    if sweep == "views":
        variants = [(name, _with_view_counts(config, *counts))
                    for name, counts in VIEW_VARIANTS.items()]
    elif sweep == "positional":
        variants = [(mode, _with_mode(config, mode))
                    for mode in POSITIONAL_MODES]
    else:
        raise ValueError(f"unknown sweep {sweep!r}, want 'views' or 'positional'")

    rows = []
    for name, cfg in variants:
        for seed in seeds:
            if progress is not None:
                progress(f"{sweep} sweep: variant {name}, seed {seed}")
            state = pretrain(images, cfg, seed=seed)
            acc = probe_protocol(images, labels, state, split_seed=0)
            rows.append({"config": name, "probe_acc": acc, "seed": seed})
    return rows


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["config", "probe_acc", "seed"],
                                lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# -- embedding export --------------------------------------------------------

def export_embeddings(path, images: np.ndarray, labels: Optional[np.ndarray],
                      state: TrainState) -> None:
    """One CSV row per image: id, label (-1 when unlabeled), then the feature.

    Values are written with repr-faithful precision so a re-export of the
    same state is byte-identical.
    """
    feats = probe_features(images, state.config, state.teacher,
                           tables=state.student.tables)
    d = feats.shape[1]
    header = "image_id,label," + ",".join(f"f{j}" for j in range(d))
    lines = [header]
    for i in range(len(feats)):
        label = int(labels[i]) if labels is not None else -1
        vals = ",".join(np.format_float_positional(v, unique=True, trim="0")
                        for v in feats[i])
        lines.append(f"{i},{label},{vals}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
