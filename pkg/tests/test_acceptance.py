"""Acceptance criteria 1-10, one test each.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary ends with a
PASS/FAIL line per criterion.
"""

import math
from fractions import Fraction

import numpy as np
import pytest
import torch

from sctforge.cleaning import build_reference, clean_cohort
from sctforge.data import slice_pairs
from sctforge.evaluation import (
    SweepTable, compute_metrics, evaluate_model, export_qualitative, predict_volume, psnr_from_mse, select_best,
    sweep_checkpoints, tissue_kde_compare, to_hu,
)
from sctforge.heuristic import optimal_p, token_count, tp_ratio
from sctforge.models import (
    BLUR_KERNEL, ArchConfig, IdentityGenerator, build_cyclegan_models, build_fqga_discriminator,
    build_fqga_generator, build_model, count_parameters, gaussian_blur, variant,
)
from sctforge.padding import constant_pad_to_factor, crop_to_original, reflect_pad_to
from sctforge.phantom import AnomalyKind, PhantomParams, desk_params, generate_cohort, generate_phantom_patient, inject_anomaly
from sctforge.trainer import (
    CheckpointKey, CheckpointStore, PatientSlices, TrainConfig, build_gan_state, load_checkpoint, loss_log,
    pad_patient, restore_state, save_checkpoint, train_sem, train_step,
)
from test_models import brute_blur, hand_cyclegan_disc, hand_cyclegan_gen, hand_fqga_disc, hand_fqga_gen
from test_models import _fd_relative_errors, unit_scale_block
from test_trainer import TINY_DISC, TINY_GEN, run_mock, tensors


def detail(record_property, text):
    record_property("detail", text)
    print(text)


# --------------------------------------------------------------------------- 1


def test_criterion_01_metric_scale(record_property):
    assert abs(psnr_from_mse(0.527) - 8.80) <= 0.005
    target = np.zeros((32, 32))
    pred = np.full((32, 32), math.sqrt(0.527))
    r = compute_metrics(pred, target)
    assert r.mse == pytest.approx(0.527, abs=1e-12)
    assert abs(r.psnr - 10 * math.log10(4 / r.mse)) <= 1e-9
    assert abs(r.psnr - 8.80) <= 0.005
    detail(record_property, f"mse 0.527 -> {r.psnr:.4f} dB")


# --------------------------------------------------------------------------- 2


def test_criterion_02_parameter_claims(record_property):
    gen = count_parameters(build_fqga_generator(ArchConfig("fqga_gen", fqga_layers=1)))
    cg_gen, cg_disc = (count_parameters(m) for m in build_cyclegan_models(ArchConfig("cyclegan_gen", resblocks=9)))
    disc = count_parameters(build_fqga_discriminator())
    assert 3_000_000 <= gen <= 5_500_000
    assert 0.2 <= gen / cg_gen <= 0.4
    assert disc > cg_disc
    assert (gen, disc, cg_gen, cg_disc) == (hand_fqga_gen(1), hand_fqga_disc(), hand_cyclegan_gen(9), hand_cyclegan_disc())
    detail(record_property, f"fqga_gen {gen:,}; ratio {gen / cg_gen:.3f}; disc {disc:,} > {cg_disc:,}")


# --------------------------------------------------------------------------- 3


def test_criterion_03_shape_padding_suite(record_property):
    rng = np.random.default_rng(2024)
    torch.manual_seed(0)
    tiny_gen = build_model(ArchConfig("fqga_gen", **{"channel_plan": TINY_GEN.channel_plan})).eval()
    tiny_cg = build_model(ArchConfig("cyclegan_gen", channel_plan=(4, 8, 8, 8, 4), resblocks=1)).eval()
    tiny_disc = build_model(ArchConfig("fqga_disc", channel_plan=TINY_DISC.channel_plan)).eval()
    dims = rng.integers(20, 301, size=(200, 2))
    with torch.no_grad():
        for i, (h, w) in enumerate(dims):
            x = rng.uniform(-1, 1, (h, w)).astype(np.float32)
            padded = constant_pad_to_factor(x, 4)
            ph, pw = padded.data.shape
            assert ph % 4 == 0 and pw % 4 == 0 and ph - h < 4 and pw - w < 4
            gen = tiny_gen if i % 2 == 0 else tiny_cg
            out = gen(torch.from_numpy(padded.data)[None, None])[0, 0].numpy()
            assert crop_to_original(out, like=padded).shape == (h, w)
            extra = rng.integers(0, 40, size=2)
            reflected = reflect_pad_to(x, (h + extra[0], w + extra[1]))
            assert np.array_equal(crop_to_original(reflected), x)
            patch = tiny_disc(torch.from_numpy(padded.data)[None, None])
            assert tuple(patch.shape) == (1, 1, 10, 10)
        full_gen = build_fqga_generator().eval()
        full_disc = build_fqga_discriminator().eval()
        for h, w in [(20, 300), (137, 61), (256, 256)]:
            padded = constant_pad_to_factor(rng.uniform(-1, 1, (h, w)).astype(np.float32), 4)
            t = torch.from_numpy(padded.data)[None, None]
            assert crop_to_original(full_gen(t)[0, 0].numpy(), like=padded).shape == (h, w)
            assert tuple(full_disc(t).shape) == (1, 1, 10, 10)
    detail(record_property, "200 random dims + 3 full-size checks")


# --------------------------------------------------------------------------- 4


def test_criterion_04_blur_kernel(record_property):
    assert BLUR_KERNEL.sum() == 1.0
    expected = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]]) / 16
    impulse = np.zeros((3, 3))
    impulse[1, 1] = 1.0
    assert np.array_equal(gaussian_blur(impulse, mode="constant"), expected)
    rng = np.random.default_rng(4)
    worst = 0.0
    for shape in [(9, 9), (17, 5), (1, 12), (32, 31)]:
        img = rng.normal(size=shape)
        worst = max(worst, float(np.abs(gaussian_blur(img) - brute_blur(img)).max()))
    assert worst <= 1e-6
    detail(record_property, f"max |fast - brute| = {worst:.2e}")


# --------------------------------------------------------------------------- 5


def test_criterion_05_sem_scheduler(tmp_path, record_property):
    store, _ = run_mock(tmp_path, 35, 1)
    assert len(store) == 35
    for n, e, double in [(2, 2, False), (3, 1, True), (5, 3, False)]:
        store, _ = run_mock(tmp_path, n, e, double)
        loads = [k for op, k in store.events if op == "load"]
        saves = [k for op, k in store.events if op == "save" and k.endswith("_s1")]
        assert len(loads) == len(saves) == n * e
        assert loads[0] == "init" and loads[1:] == saves[:-1]
        assert len(store) == n * e * (2 if double else 1)

    params = PhantomParams(seed=5, depth_range=(3, 3), height_range=(20, 20), width_range=(20, 20))
    pats = [PatientSlices(f"P{i}", slice_pairs(generate_phantom_patient(params, f"P{i}"))) for i in range(2)]
    cfg = TrainConfig(seed=1)
    state = build_gan_state(cfg, TINY_GEN, TINY_DISC)
    for s in pad_patient(pats[0].slices):
        train_step(state, s, cfg)
    rt = CheckpointStore(tmp_path / "rt")
    save_checkpoint(state, rt, CheckpointKey(1, 1, 1))
    fresh = load_checkpoint(rt, CheckpointKey(1, 1, 1), build_gan_state(TrainConfig(seed=9), TINY_GEN, TINY_DISC))
    a, b = tensors(state.state_dict()), tensors(fresh.state_dict())
    assert a.keys() == b.keys() and any("exp_avg_sq" in k for k in a)
    assert all(torch.equal(a[k], b[k]) for k in a)

    runs = []
    for tag in ("a", "b"):
        s = CheckpointStore(tmp_path / tag)
        train_sem(build_gan_state(cfg, TINY_GEN, TINY_DISC), pats, TrainConfig(seed=1, epochs=2), s)
        runs.append(s)
    assert (runs[0].root / "manifest.json").read_bytes() == (runs[1].root / "manifest.json").read_bytes()
    assert loss_log(runs[0]) == loss_log(runs[1])
    detail(record_property, "chains (35,1) (2,2) (3,1,double) (5,3); round trip and rerun identical")


# --------------------------------------------------------------------------- 6


def test_criterion_06_gradient_check(record_property):
    block, x = unit_scale_block()
    rel = _fd_relative_errors(block, x, 1e-3)
    share = float((rel < 1e-3).mean())
    assert share >= 0.99
    detail(record_property, f"{share:.2%} of {rel.size} parameters within 1e-3")


# --------------------------------------------------------------------------- 7


def test_criterion_07_heuristic(record_property):
    lo, hi = token_count((436, 416), 50), token_count((436, 416), 105)
    assert (lo, hi) == (9_068_800, 19_044_480)
    r = (tp_ratio(lo, 4_000_000), tp_ratio(hi, 4_000_000))
    assert (round(r[0], 3), round(r[1], 3)) == (2.267, 4.761)
    for t in (lo, hi):
        p, obj = optimal_p(t)
        assert Fraction(t) / Fraction(p) == 5 and obj == 0.0
    detail(record_property, f"T [{lo:,}, {hi:,}]  T/P [{r[0]:.3f}, {r[1]:.3f}]")


# --------------------------------------------------------------------------- 8


def test_criterion_08_cleaning_recall(record_property):
    params = PhantomParams(seed=0)
    cohort, _ = generate_cohort(18, 0.0, params, seed=0)
    picks = np.random.default_rng(8).choice(18, size=3, replace=False)
    labels = {p.patient_id: None for p in cohort}
    for idx, kind in zip(picks, AnomalyKind):
        cohort[idx] = inject_anomaly(cohort[idx], kind, seed=1)
        labels[cohort[idx].patient_id] = kind
    reference = build_reference(generate_phantom_patient(params, "REF", "reference"))
    _, log = clean_cohort(cohort, reference)
    flagged = {d.patient_id for d in log if d.status != "kept"}
    bad = {p for p, k in labels.items() if k is not None}
    wrongly_discarded = [d.patient_id for d in log if d.status == "discarded" and labels[d.patient_id] is None]
    assert bad <= flagged
    assert not wrongly_discarded
    detail(record_property, "flagged " + ", ".join(f"{d.patient_id}:{d.status}" for d in log if d.status != "kept"))


# --------------------------------------------------------------------------- 9 and 10


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    params = desk_params()
    train = [generate_phantom_patient(params, f"T{i}") for i in range(5)]
    val = [generate_phantom_patient(params, f"V{i}") for i in range(2)]
    test = [generate_phantom_patient(params, f"X{i}") for i in range(2)]
    gen, disc = variant("fqga-single")
    cfg = TrainConfig(seed=0)
    store = CheckpointStore(tmp_path_factory.mktemp("desk") / "checkpoints")
    train_sem(build_gan_state(cfg, gen, disc), [PatientSlices(p.patient_id, slice_pairs(p)) for p in train],
              cfg, store)
    return store, val, test


def test_criterion_09_desk_training(desk_run, record_property):
    store, _, test = desk_run
    model = restore_state(store, CheckpointKey(1, 5, 1)).generator
    trained = evaluate_model(model, test).aggregate
    identity = evaluate_model(IdentityGenerator(), test).aggregate
    gain = trained.psnr - identity.psnr
    closer = []
    for p in test:
        cmp = tissue_kde_compare(p.ct, p.cbct, to_hu(predict_volume(model, p)), roi=(-200, 200))
        closer.append(cmp.sct_to_ct < cmp.cbct_to_ct)
    detail(record_property, f"psnr {trained.psnr:.2f} vs identity {identity.psnr:.2f} (+{gain:.2f} dB); "
                            f"KDE closer on {sum(closer)}/{len(closer)}")
    assert gain >= 1.0
    assert any(closer)


def test_criterion_10_sweep_select(desk_run, tmp_path, record_property):
    store, val, _ = desk_run
    table = sweep_checkpoints(store, (1, 5), val)
    assert len(table.rows) == len(store) == 5
    again = sweep_checkpoints(CheckpointStore(store.root), (1, 5), val)
    choice = select_best(table)
    assert again.rows == table.rows and select_best(again) == choice
    assert choice.row["psnr"] == max(r["psnr"] for r in table.rows)
    tie = SweepTable([{"checkpoint_key": k, "psnr": 30.0, "ssim": s, "mae": 0.1, "mse": 0.004}
                      for k, s in (("a", 0.8), ("b", 0.9), ("c", 0.9))], (1, 3))
    assert select_best(tie).checkpoint_key == "b"
    pngs = []
    for key in [choice.checkpoint_key, *choice.neighbors]:
        model = restore_state(store, CheckpointKey.parse(key)).generator
        pngs += export_qualitative(model, [slice_pairs(p)[8] for p in val], tmp_path, tag=key)
    assert len(pngs) == 2 * (1 + len(choice.neighbors)) and all(p.stat().st_size > 0 for p in pngs)
    detail(record_property, f"{len(table.rows)} rows; selected {choice.checkpoint_key}; {len(pngs)} PNGs")
