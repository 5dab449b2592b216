import json

import numpy as np
import pytest
import torch
from torch import nn

from sctforge.data import SlicePair, slice_pairs
from sctforge.errors import CheckpointNotFound, IntegrityError, ParameterError, TrainingError
from sctforge.models import ArchConfig
from sctforge.phantom import PhantomParams, generate_phantom_patient
from sctforge.trainer import (
    CheckpointKey, CheckpointStore, GanState, LossRecord, PatientSlices, TrainConfig, build_gan_state,
    discriminator_loss, generator_adversarial_loss, load_checkpoint, loss_log, pad_patient, restore_state, save_checkpoint,
    train_sem, train_step,
)

TINY_GEN = ArchConfig("fqga_gen", channel_plan=(4, 4, 4, 4, 8, 8, 8, 4))
TINY_DISC = ArchConfig("fqga_disc", channel_plan=(2, 2, 4, 4, 4))
TINY_CG = ArchConfig("cyclegan_gen", channel_plan=(4, 8, 8, 8, 4), resblocks=1)
TINY_CGD = ArchConfig("cyclegan_disc", channel_plan=(4, 4, 8, 8))


class MockTrainable:
    """Counts visits; its 'weights' are the list of patients seen so far."""

    def __init__(self):
        self.seen = torch.zeros(0, dtype=torch.int64)

    def state_dict(self):
        return {"seen": self.seen.clone()}

    def load_state_dict(self, state):
        self.seen = state["seen"].clone()

    def train_patient(self, slices, cfg, start_step):
        pid = slices[0].patient_id
        assert all(s.patient_id == pid for s in slices)
        self.seen = torch.cat([self.seen, torch.tensor([int(pid[1:])])])
        return [LossRecord(start_step + i, s.patient_id, {"loss": float(s.slice_index)}) for i, s in enumerate(slices)]


def mock_patients(n, depth=3):
    z = np.zeros((4, 4), dtype=np.float32)
    return [PatientSlices(f"P{i:03d}", [SlicePair(f"P{i:03d}", k, z, z) for k in range(depth)]) for i in range(n)]


def run_mock(tmp_path, n, epochs, double=False):
    store = CheckpointStore(tmp_path / f"n{n}e{epochs}{double}")
    state = MockTrainable()
    train_sem(state, mock_patients(n), TrainConfig(epochs=epochs, double_pass=double), store)
    return store, state


def test_35_patients_one_epoch(tmp_path):
    store, _ = run_mock(tmp_path, 35, 1)
    assert len(store) == 35
    assert [str(k) for k in store.keys()] == [f"e1_p{i}_s1" for i in range(1, 36)]
    assert all((store.root / f"ckpt_e1_p{i}_s1.bin").is_file() for i in range(1, 36))


def test_two_by_two_load_chain(tmp_path):
    store, state = run_mock(tmp_path, 2, 2)
    assert store.events == [
        ("load", "init"), ("save", "e1_p1_s1"),
        ("load", "e1_p1_s1"), ("save", "e1_p2_s1"),
        ("load", "e1_p2_s1"), ("save", "e2_p1_s1"),
        ("load", "e2_p1_s1"), ("save", "e2_p2_s1"),
    ]
    assert state.seen.tolist() == [0, 1, 0, 1]


@pytest.mark.parametrize("n,e", [(2, 2), (5, 3), (1, 4)])
def test_chain_property(tmp_path, n, e):
    store, _ = run_mock(tmp_path, n, e)
    loads = [k for op, k in store.events if op == "load"]
    saves = [k for op, k in store.events if op == "save"]
    assert len(loads) == len(saves) == n * e
    assert loads[0] == "init"
    assert loads[1:] == saves[:-1]
    order = [(k.epoch, k.patient_index, k.pass_index) for k in store.keys()]
    assert order == sorted(order)


def test_double_pass_chain(tmp_path):
    store, state = run_mock(tmp_path, 3, 1, double=True)
    assert len(store) == 6
    assert store.events == [
        ("load", "init"), ("save", "e1_p1_s1"), ("save", "e1_p1_s2"),
        ("load", "e1_p1_s1"), ("save", "e1_p2_s1"), ("save", "e1_p2_s2"),
        ("load", "e1_p2_s1"), ("save", "e1_p3_s1"), ("save", "e1_p3_s2"),
    ]
    # the pass-2 training of a patient never reaches the next patient
    assert state.seen.tolist() == [0, 1, 2, 2]
    assert store.load_raw(CheckpointKey(1, 2, 1))["seen"].tolist() == [0, 1]


def test_loss_log_segments(tmp_path):
    assert loss_log(CheckpointStore(tmp_path / "empty")) == {}
    store, _ = run_mock(tmp_path, 35, 1)
    series = loss_log(store)["loss"]
    assert [s for s, _, _ in series] == list(range(35 * 3))
    segments = [series[i][2] for i in range(0, len(series), 3)]
    assert segments == [f"P{i:03d}" for i in range(35)]
    assert all(np.isfinite(v) for _, v, _ in series)


def test_shuffle_stays_within_patient(tmp_path):
    store, _ = run_mock(tmp_path, 4, 1)
    for r in store.records:
        assert {s["patient_id"] for s in r["steps"]} == {r["patient_id"]}
        assert sorted(s["loss"] for s in r["steps"]) == [0.0, 1.0, 2.0]


def test_checkpoint_key_and_lookup(tmp_path):
    key = CheckpointKey(2, 7, 1)
    assert key.filename == "ckpt_e2_p7_s1.bin"
    assert CheckpointKey.parse(str(key)) == key
    with pytest.raises(CheckpointNotFound):
        CheckpointStore(tmp_path).record(key)
    assert issubclass(CheckpointNotFound, LookupError)


def test_corrupt_checkpoint_reports_digests(tmp_path):
    store, _ = run_mock(tmp_path, 2, 1)
    path = store.root / "ckpt_e1_p1_s1.bin"
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError, match="expected .* found"):
        store.load_raw(CheckpointKey(1, 1, 1))
    path.unlink()
    with pytest.raises(CheckpointNotFound):
        store.load_raw(CheckpointKey(1, 1, 1))


# --------------------------------------------------------------------------- real networks


def tiny_patients(n=3, depth=3):
    params = PhantomParams(seed=5, depth_range=(depth, depth), height_range=(18, 22), width_range=(18, 22))
    return [PatientSlices(f"P{i:03d}", slice_pairs(generate_phantom_patient(params, f"P{i:03d}")))
            for i in range(n)]


def tensors(sd, prefix=""):
    out = {}
    for k, v in sd.items():
        if isinstance(v, dict):
            out.update(tensors(v, f"{prefix}{k}."))
        elif isinstance(v, torch.Tensor):
            out[prefix + str(k)] = v
    return out


def test_round_trip_bit_exact_with_adam_moments(tmp_path):
    cfg = TrainConfig(seed=1)
    state = build_gan_state(cfg, TINY_GEN, TINY_DISC)
    for s in tiny_patients(1)[0].slices:
        train_step(state, pad_patient([s])[0], cfg)
    store = CheckpointStore(tmp_path)
    save_checkpoint(state, store, CheckpointKey(1, 1, 1))
    fresh = build_gan_state(TrainConfig(seed=99), TINY_GEN, TINY_DISC)
    load_checkpoint(store, CheckpointKey(1, 1, 1), fresh)
    a, b = tensors(state.state_dict()), tensors(fresh.state_dict())
    assert a.keys() == b.keys()
    assert any("exp_avg_sq" in k for k in a)
    for k in a:
        assert a[k].dtype == b[k].dtype and torch.equal(a[k], b[k]), k


def sem_run(root, cfg, patients, gen=TINY_GEN, disc=TINY_DISC):
    store = CheckpointStore(root)
    train_sem(build_gan_state(cfg, gen, disc), patients, cfg, store)
    return store


def test_determinism_identical_manifests(tmp_path):
    cfg = TrainConfig(seed=3, epochs=2)
    pats = tiny_patients(2)
    s1 = sem_run(tmp_path / "a", cfg, pats)
    s2 = sem_run(tmp_path / "b", cfg, pats)
    assert (s1.root / "manifest.json").read_text() == (s2.root / "manifest.json").read_text()
    assert loss_log(s1) == loss_log(s2)


def test_resume_matches_uninterrupted(tmp_path):
    cfg = TrainConfig(seed=4)
    pats = tiny_patients(3)
    full = sem_run(tmp_path / "full", cfg, pats)
    part = sem_run(tmp_path / "part", cfg, pats[:2])
    resumed = CheckpointStore(tmp_path / "part")
    train_sem(build_gan_state(TrainConfig(seed=77), TINY_GEN, TINY_DISC), pats, cfg, resumed)
    assert ("load", "e1_p2_s1") in resumed.events and len(resumed) == 3
    assert full.record(CheckpointKey(1, 3, 1))["steps"] == resumed.record(CheckpointKey(1, 3, 1))["steps"]
    assert full.record(CheckpointKey(1, 3, 1))["sha256"] == resumed.record(CheckpointKey(1, 3, 1))["sha256"]
    assert len(part.records) == 2


def test_restore_state_from_header(tmp_path):
    cfg = TrainConfig(seed=2)
    store = sem_run(tmp_path, cfg, tiny_patients(1))
    state = restore_state(CheckpointStore(tmp_path), CheckpointKey(1, 1, 1))
    assert state.archs["generator"] == TINY_GEN.to_dict()


def test_cyclegan_regime_losses(tmp_path):
    cfg = TrainConfig(regime="cyclegan", seed=0)
    store = sem_run(tmp_path, cfg, tiny_patients(1), TINY_CG, TINY_CGD)
    names = set(loss_log(store))
    assert names == {"gen_AtoB_loss", "gen_BtoA_loss", "cycle_loss", "disc_A_loss", "disc_B_loss"}


def test_paired_loss_names_and_total():
    cfg = TrainConfig(seed=0)
    state = build_gan_state(cfg, TINY_GEN, TINY_DISC)
    rec = train_step(state, (np.zeros((64, 64)), np.zeros((64, 64))), cfg)
    assert set(rec.losses) == {"gen_adv", "gen_l1", "gen_total", "disc"}
    assert rec.losses["gen_total"] == pytest.approx(rec.losses["gen_adv"] + 100.0 * rec.losses["gen_l1"], rel=1e-5)


def test_lsgan_definitions():
    zeros, ones = torch.zeros(1, 1, 10, 10), torch.ones(1, 1, 10, 10)
    assert generator_adversarial_loss(zeros).item() == 1.0
    assert generator_adversarial_loss(ones).item() == 0.0
    assert discriminator_loss(ones, zeros).item() == 0.0
    assert discriminator_loss(zeros, ones).item() == 1.0


class ScaleGen(nn.Module):
    size_factor = 1

    def __init__(self):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(1.0))

    def forward(self, x):
        return self.a * x


class ZeroDisc(nn.Module):
    """Patch map of zeros whatever the input; its gradient is zero, so Adam leaves it alone."""

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(0.0))

    def forward(self, x):
        return 0.0 * self.w * x.mean() + torch.zeros(x.shape[0], 1, 10, 10)


def toy_state(cfg):
    g, d = ScaleGen(), ZeroDisc()
    opts = {"gen": torch.optim.Adam(g.parameters(), lr=cfg.lr, betas=cfg.betas),
            "disc": torch.optim.Adam(d.parameters(), lr=cfg.lr, betas=cfg.betas)}
    return GanState({"BtoA": g}, {"A": d}, opts)


def test_constant_zero_discriminator_adversarial_loss_is_one():
    cfg = TrainConfig(lambda_l1=0.0)
    state = toy_state(cfg)
    x = np.random.default_rng(0).uniform(-1, 1, (8, 8))
    rec = train_step(state, (x, x), cfg)
    assert rec.losses["gen_adv"] == 1.0
    assert state.discriminators["A"].w.item() == 0.0


def test_toy_l1_descent_and_zero_at_target():
    cfg = TrainConfig(lambda_l1=1.0, lr=1e-2)
    state = toy_state(cfg)
    x = np.random.default_rng(1).uniform(-1, 1, (8, 8))
    first = train_step(state, (x, 0.5 * x), cfg).losses["gen_l1"]
    second = train_step(state, (x, 0.5 * x), cfg).losses["gen_l1"]
    assert second <= first
    exact = toy_state(cfg)
    assert train_step(exact, (x, x), cfg).losses["gen_l1"] == 0.0


def test_non_finite_loss_dumps_diagnostics(tmp_path):
    cfg = TrainConfig()
    bad = np.full((4, 4), np.nan, dtype=np.float32)
    pats = [PatientSlices("P000", [SlicePair("P000", 0, bad, bad)])]
    state = toy_state(cfg)
    store = CheckpointStore(tmp_path)
    with pytest.raises(TrainingError, match="non-finite"):
        train_sem(state, pats, cfg, store)
    dump = json.loads((tmp_path / "failure_dump.json").read_text())
    assert dump["patient_id"] == "P000"


def test_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(regime="pix2pix")
    with pytest.raises(ParameterError):
        TrainConfig(lambda_l1=-1)
    with pytest.raises(ParameterError):
        TrainConfig.from_dict({"lr": 1e-3, "momentum": 0.9})
    cfg = TrainConfig(double_pass=True, epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(TrainingError):
        LossRecord(0, "p", {"x": float("inf")})
    with pytest.raises(ParameterError):
        train_sem(MockTrainable(), [], TrainConfig(), CheckpointStore("/tmp/_unused_store"))
