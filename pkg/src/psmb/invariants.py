"""Runtime property suite behind the `invariants` CLI subcommand.

Each check re-verifies one structural promise of the pipeline from public
APIs only, with its own small reference computation where one is needed.
Checks print one PASS/FAIL line each, so logs show exactly which promise
broke.  quick mode shrinks trial counts; it never skips a check.
"""

from __future__ import annotations

import os
import sys
import tempfile
import traceback
from typing import Callable, List, Tuple

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, config_digest, config_to_toml, load_config, save_config
from .data import SyntheticDatasetSpec, generate_synthetic_dataset
from .distill import (
    DistillConfig,
    ema_update,
    masked_kl,
    schedule,
    student_distribution,
    teacher_distribution,
)
from .mpa import (
    apply_adapter,
    build_transport,
    effective_mask,
    transport,
    transport_weights,
)
from .numeric import Stream, Tape, Tensor, finite_diff_check, ops, using_dtype
from .ssm import (
    EncoderConfig,
    init_encoder_params,
    layer_forward,
    rasterize,
    selective_scan,
    zoh_discretize,
)
from .views import TokenGrid, ViewConfig, geometry_map, sample_views


def _recurrence_reference(a_bar, bb, c, u):
    """Direct unrolled evaluation of the diagonal recurrence with
    time-invariant discrete coefficients a_bar, bb of shape (d, k)."""
    n, d = u.shape
    z = np.zeros((n, d))
    h = np.zeros_like(a_bar)
    for t in range(n):
        h = a_bar * h + bb * u[t][:, None]
        z[t] = h @ c[t]
    return z


def check_scan_recurrence_oracle(quick: bool) -> None:
    trials = 10 if quick else 100
    stream = Stream(0, "inv-scan")
    with using_dtype(np.float64):
        for trial in range(trials):
            s = stream.fork(trial)
            n = int(s.fork("n").integers(2, 129))
            d = int(s.fork("d").integers(1, 9))
            k = int(s.fork("k").integers(1, 5))
            delta = s.fork("delta").uniform(0.05, 1.0, size=(d,))
            a = -s.fork("a").uniform(0.05, 2.0, size=(d, k))
            b = s.fork("b").normal(0.0, 1.0, size=(k,))
            c = s.fork("c").normal(0.0, 1.0, size=(n, k))
            u = s.fork("u").normal(0.0, 1.0, size=(n, d))
            a_bar, bb = zoh_discretize(a, b, delta[:, None])
            want = _recurrence_reference(a_bar, bb, c, u)
            got = selective_scan(
                np.broadcast_to(delta, (1, n, d)).copy(), a,
                np.broadcast_to(b, (1, n, k)).copy(), c[None], u[None]).data[0]
            denom = max(np.abs(want).max(), 1e-9)
            rel = np.abs(got - want).max() / denom
            assert rel < 1e-5, f"trial {trial}: rel err {rel:.2e}"


def check_zoh_closed_form(quick: bool) -> None:
    a_bar, b_bar = zoh_discretize(-1.0, 1.0, 0.1)
    assert abs(a_bar - 0.9048374180359595) < 1e-9, a_bar
    assert abs(b_bar - 0.09516258196404043) < 1e-9, b_bar
    for delta in (1e-9, 1e-12):
        a_bar, b_bar = zoh_discretize(-1.0, 2.0, delta)
        assert abs(a_bar - 1.0) < 1e-8
        assert abs(b_bar - 2.0 * delta) <= 1e-8 * delta


def check_scan_linear_in_input(quick: bool) -> None:
    s = Stream(1, "inv-linear")
    v, n, d, k = 2, 9, 3, 2
    with using_dtype(np.float64):
        delta = s.fork("delta").uniform(0.1, 1.0, size=(v, n, d))
        a = -s.fork("a").uniform(0.1, 1.0, size=(d, k))
        bm = s.fork("bm").normal(0.0, 1.0, size=(v, n, k))
        c = s.fork("c").normal(0.0, 1.0, size=(v, n, k))
        u1 = s.fork("u1").normal(0.0, 1.0, size=(v, n, d))
        u2 = s.fork("u2").normal(0.0, 1.0, size=(v, n, d))
        mixed = selective_scan(delta, a, bm, c, 2.0 * u1 - 3.0 * u2).data
        parts = (2.0 * selective_scan(delta, a, bm, c, u1).data
                 - 3.0 * selective_scan(delta, a, bm, c, u2).data)
        assert np.abs(mixed - parts).max() < 1e-9


def check_scan_reversal_symmetry(quick: bool) -> None:
    s = Stream(2, "inv-rev")
    v, n, d, k = 2, 11, 3, 2
    delta = s.fork("delta").uniform(0.1, 1.0, size=(v, n, d)).astype(np.float32)
    a = -s.fork("a").uniform(0.1, 1.0, size=(d, k)).astype(np.float32)
    bm = s.fork("bm").normal(0.0, 1.0, size=(v, n, k)).astype(np.float32)
    c = s.fork("c").normal(0.0, 1.0, size=(v, n, k)).astype(np.float32)
    u = s.fork("u").normal(0.0, 1.0, size=(v, n, d)).astype(np.float32)
    rev = selective_scan(delta, a, bm, c, u, reverse=True).data
    flip = selective_scan(delta[:, ::-1].copy(), a, bm[:, ::-1].copy(),
                          c[:, ::-1].copy(), u[:, ::-1].copy()).data[:, ::-1]
    assert np.abs(rev - flip).max() < 1e-6


def check_raster_round_trip(quick: bool) -> None:
    for shape in ((1, 1), (3, 5), (8, 8)):
        rm = rasterize(shape)
        grid = np.arange(shape[0] * shape[1] * 2).reshape(*shape, 2)
        back = rm.to_grid(rm.to_sequence(grid))
        assert np.array_equal(back, grid), shape


def _random_geometry(stream: Stream):
    """Mid-onto-Global landings for one sampled view batch, clamped to the
    anchor grid the way the training path clamps them."""
    cfg = ViewConfig(res={"G": 16, "M": 12, "L": 8}, n_global=2, n_mid=2, n_local=2)
    batch = sample_views(stream, cfg)
    grid_g = TokenGrid((4, 4), 4)
    grid_m = TokenGrid((3, 3), 4)
    landings = geometry_map(batch.mids[0], batch.globals_[batch.anchor],
                            grid_m, grid_g)
    return np.clip(landings, [-0.5, -0.5], [3.5, 3.5]), grid_g


def check_transport_column_sums(quick: bool) -> None:
    trials = 50 if quick else 300
    stream = Stream(3, "inv-cols")
    for trial in range(trials):
        landings, grid_g = _random_geometry(stream.fork(trial))
        pi = build_transport(landings, grid_g.shape)
        dense = pi.to_dense()
        assert np.abs(dense.sum(axis=0) - 1.0).max() < 1e-12, trial
        w = transport_weights(Tensor(landings), grid_g.shape)
        assert np.abs(np.asarray(w.data, dtype=np.float64) - dense).max() < 1e-12, \
            f"trial {trial}: dense and sparse transports disagree"


def check_transport_constant_field(quick: bool) -> None:
    stream = Stream(4, "inv-const")
    for trial in range(20):
        landings, grid_g = _random_geometry(stream.fork(trial))
        pi = build_transport(landings, grid_g.shape)
        const = np.full((pi.shape[1], 5), 3.25, dtype=np.float32)
        out, rho = transport(const, pi, row_normalize=True)
        covered = rho > 0
        assert np.all(out[covered].astype(np.float32) == np.float32(3.25)), trial


def check_transport_mass_conservation(quick: bool) -> None:
    stream = Stream(5, "inv-mass")
    for trial in range(20):
        landings, grid_g = _random_geometry(stream.fork(trial))
        pi = build_transport(landings, grid_g.shape)
        z = Stream(trial, "inv-mass-z").normal(0.0, 1.0, size=(pi.shape[1], 3))
        out, rho = transport(z, pi, row_normalize=False)
        assert abs(rho.sum() - pi.shape[1]) < 1e-6, trial
        assert np.abs(out.sum(axis=0) - z.sum(axis=0)).max() < 1e-6, trial


def check_adapter_linearity(quick: bool) -> None:
    s = Stream(6, "inv-adapter")
    landings, grid_g = _random_geometry(s.fork("geom"))
    w = transport_weights(Tensor(landings[None]), grid_g.shape)
    adapter = Tensor(s.fork("adapter").normal(0.0, 0.5, size=(5,)))
    z1 = Tensor(s.fork("z1").normal(0.0, 1.0, size=(1, 9, 5)))
    z2 = Tensor(s.fork("z2").normal(0.0, 1.0, size=(1, 9, 5)))
    zero = Tensor(np.zeros(5))
    d1 = apply_adapter(z1, adapter, w, True)[0].data - \
        apply_adapter(z1, zero, w, True)[0].data
    d2 = apply_adapter(z2, adapter, w, True)[0].data - \
        apply_adapter(z2, zero, w, True)[0].data
    assert np.abs(d1 - d2).max() < 1e-6


def check_effective_mask_subset(quick: bool) -> None:
    s = Stream(7, "inv-mask")
    vis = (s.fork("vis").uniform(0.0, 1.0, size=(6, 16)) < 0.5).astype(np.uint8)
    rho = np.where(s.fork("rho").uniform(0.0, 1.0, size=(6, 16)) < 0.5, 0.0, 1.0)
    eff = effective_mask(vis, rho)
    assert eff.dtype == np.uint8
    assert np.all(eff <= vis)
    assert np.all(eff[rho == 0] == 0)


def check_kl_identities(quick: bool) -> None:
    s = Stream(8, "inv-kl")
    q = teacher_distribution(s.fork("q").normal(0.0, 1.0, size=(4, 6)),
                             np.zeros(6), 0.2)
    assert masked_kl(q, Tensor(q), np.ones(4)).item() < 1e-7
    hand = masked_kl(np.array([[1.0, 0.0]]),
                     Tensor(np.array([[0.5, 0.5]])), np.ones(1)).item()
    assert abs(hand - np.log(2.0)) < 1e-6
    p = teacher_distribution(s.fork("p").normal(0.0, 1.0, size=(4, 6)),
                             np.zeros(6), 0.3)
    mask = np.array([1, 0, 1, 1])
    base = masked_kl(q, Tensor(p), mask).item()
    dup = masked_kl(np.concatenate([q, q]), Tensor(np.concatenate([p, p])),
                    np.concatenate([mask, mask])).item()
    assert abs(base - dup) < 1e-9


def check_teacher_and_center_get_no_gradient(quick: bool) -> None:
    s = Stream(9, "inv-stopgrad")
    tape = Tape()
    logits_t = tape.watch(Tensor(s.fork("lt").normal(0.0, 1.0, size=(3, 8))))
    center = tape.watch(Tensor(s.fork("c").normal(0.0, 0.1, size=(8,))))
    logits_s = tape.watch(Tensor(s.fork("ls").normal(0.0, 1.0, size=(3, 8))))
    q = teacher_distribution(logits_t.data, center.data, 0.07)
    p = student_distribution(logits_s, 0.1)
    grads = tape.backward(masked_kl(q, p, np.ones(3)))
    assert np.all(grads[logits_t] == 0.0)
    assert np.all(grads[center] == 0.0)
    assert np.abs(grads[logits_s]).max() > 0.0


def check_ema_endpoints_bitwise(quick: bool) -> None:
    s = Stream(10, "inv-ema")
    teacher = {"w": Tensor(s.fork("t").normal(0.0, 1.0, size=(4, 3)))}
    student = {"w": Tensor(s.fork("s").normal(0.0, 1.0, size=(4, 3)))}
    copied = ema_update(teacher, student, 0.0)
    assert np.array_equal(copied["w"].data, student["w"].data)
    frozen = ema_update(teacher, student, 1.0)
    assert np.array_equal(frozen["w"].data, teacher["w"].data)


def check_schedule_ranges(quick: bool) -> None:
    cfg = DistillConfig()
    total = 400
    prev = None
    for step in range(0, total + 1, 8):
        sv = schedule(step, total, cfg)
        assert cfg.lambda1_start <= sv.lambda1 <= cfg.lambda1_end
        assert cfg.lambda2_end <= sv.lambda2 <= cfg.lambda2_start
        assert cfg.tau_t_end <= sv.tau_t <= cfg.tau_t_start
        assert cfg.m_start <= sv.m <= cfg.m_end
        if prev is not None:
            assert sv.m >= prev.m and sv.tau_t <= prev.tau_t
        prev = sv
    end = schedule(total, total, cfg)
    assert abs(end.lambda1 - cfg.lambda1_end) < 1e-12
    assert abs(end.m - cfg.m_end) < 1e-12


def check_checkpoint_round_trip(quick: bool) -> None:
    s = Stream(11, "inv-ckpt")
    tensors = {
        "a.w": s.fork("a").normal(0.0, 1.0, size=(3, 4)).astype(np.float32),
        "b": s.fork("b").normal(0.0, 1.0, size=(7,)),
        "step_like": np.array(9, dtype=np.int64),
    }
    fd, path = tempfile.mkstemp(suffix=".psmb")
    os.close(fd)
    try:
        save_checkpoint(path, tensors, step=5, config_digest="ab" * 32)
        blob = load_checkpoint(path)
        assert blob.step == 5 and blob.config_digest == "ab" * 32
        for name, arr in tensors.items():
            got = blob.tensors[name]
            assert got.dtype == arr.dtype and np.array_equal(got, arr), name
    finally:
        os.unlink(path)


def check_config_round_trip(quick: bool) -> None:
    cfg = TrainConfig()
    fd, path = tempfile.mkstemp(suffix=".toml")
    os.close(fd)
    try:
        save_config(path, cfg)
        back = load_config(path)
        assert back == cfg
        assert config_digest(back) == config_digest(cfg)
        assert config_to_toml(back) == config_to_toml(cfg)
    finally:
        os.unlink(path)


def check_view_geometry(quick: bool) -> None:
    trials = 20 if quick else 200
    cfg = ViewConfig(res={"G": 16, "M": 12, "L": 8})
    for trial in range(trials):
        batch = sample_views(Stream(trial, "inv-views"), cfg)
        ax0, ay0, aw, ah = batch.globals_[batch.anchor].window
        for spec in batch.globals_ + batch.mids + batch.locals_:
            x0, y0, w, h = spec.window
            assert w > 0 and h > 0, trial
            assert 0.0 <= x0 <= 1.0 - w + 1e-9 and 0.0 <= y0 <= 1.0 - h + 1e-9
            assert x0 < ax0 + aw and ax0 < x0 + w, \
                f"trial {trial}: view disjoint from the anchor Global"
            assert y0 < ay0 + ah and ay0 < y0 + h, \
                f"trial {trial}: view disjoint from the anchor Global"


def check_dataset_contract(quick: bool) -> None:
    spec = SyntheticDatasetSpec(n_images=12, image_side=32, seed=1)
    im1, lab1 = generate_synthetic_dataset(spec)
    im2, lab2 = generate_synthetic_dataset(spec)
    assert np.array_equal(im1, im2) and np.array_equal(lab1, lab2)
    counts = np.bincount(lab1, minlength=3)
    assert counts.max() - counts.min() <= 1
    assert im1.dtype == np.float32 and im1.min() >= 0.0 and im1.max() <= 1.0


def check_layer_gradients(quick: bool) -> None:
    n_coords = 12 if quick else 40
    with using_dtype(np.float64):
        cfg = EncoderConfig(depth=1, d=6, n=3, patch_size=2)
        layer = init_encoder_params(cfg, Stream(12, "inv-grad")).layers[0]
        x = Tensor(Stream(13, "inv-grad-x").normal(0.0, 1.0, size=(2, 8, 6)))
        names = ["A_raw", "W_delta", "W_B", "W_C", "g_embed", "W_f", "W_b",
                 "norm_gain"]
        arrs = [getattr(layer, nm).data for nm in names]

        def fn(params):
            import dataclasses as dc
            lp = dc.replace(layer, **dict(zip(names, params)))
            return ops.tsum(layer_forward(x, lp, "M"))

        report = finite_diff_check(fn, arrs, n_coords=n_coords, seed=14)
        assert report["frac_ok"] >= 0.95, report


CHECKS: List[Tuple[str, Callable[[bool], None]]] = [
    ("scan-matches-recurrence-oracle", check_scan_recurrence_oracle),
    ("zoh-closed-form-and-limits", check_zoh_closed_form),
    ("scan-linear-in-input", check_scan_linear_in_input),
    ("scan-reversal-symmetry", check_scan_reversal_symmetry),
    ("raster-round-trip", check_raster_round_trip),
    ("transport-columns-stochastic", check_transport_column_sums),
    ("transport-constant-field", check_transport_constant_field),
    ("transport-mass-conservation", check_transport_mass_conservation),
    ("adapter-linearity", check_adapter_linearity),
    ("effective-mask-subset-of-visibility", check_effective_mask_subset),
    ("masked-kl-identities", check_kl_identities),
    ("teacher-and-center-zero-gradient", check_teacher_and_center_get_no_gradient),
    ("ema-endpoints-bitwise", check_ema_endpoints_bitwise),
    ("schedule-ranges-and-monotonicity", check_schedule_ranges),
    ("checkpoint-round-trip-bitwise", check_checkpoint_round_trip),
    ("config-round-trip-equality", check_config_round_trip),
    ("view-windows-and-anchor-overlap", check_view_geometry),
    ("dataset-balance-and-determinism", check_dataset_contract),
    ("layer-gradients-finite-difference", check_layer_gradients),
]


def run_suite(quick: bool = False, out=None) -> int:
    """Run every check; print one PASS/FAIL line each; return failure count."""
    out = out if out is not None else sys.stdout
    failures = 0
    for name, fn in CHECKS:
        try:
            fn(quick)
        except Exception as exc:  # report and keep going
            failures += 1
            reason = str(exc).strip().splitlines()
            head = reason[0] if reason else exc.__class__.__name__
            print(f"FAIL {name}: {head}", file=out)
            if os.environ.get("PSMB_DEBUG"):
                traceback.print_exc()
        else:
            print(f"PASS {name}", file=out)
    return failures
