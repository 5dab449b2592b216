"""Single-epoch-modification (SEM) training.

Patients are trained one at a time in a fixed order. Slices are shuffled
only within the current patient. After each patient the full training
state (all networks and optimizer moments) is written to a
:class:`CheckpointStore`, and the next patient starts by loading that
checkpoint back. The first patient of epoch ``e > 1`` loads the last
patient's checkpoint from epoch ``e - 1``.

With ``double_pass`` every patient is trained twice; both passes are
saved, but the next patient continues from the first-pass checkpoint.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import logging
import math
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import SlicePair
from .errors import CheckpointNotFound, IntegrityError, ParameterError, TrainingError
from .models import ArchConfig, build_model
from .padding import prepare_batch

log = logging.getLogger(__name__)

REGIMES = ("fqga_paired", "cyclegan")


@dataclass
class TrainConfig:
    regime: str = "fqga_paired"
    epochs: int = 1
    batch_size: int = 1
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lambda_cycle: float = 10.0
    lambda_l1: float = 100.0
    double_pass: bool = False
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ParameterError(f"unknown regime {self.regime!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")
        if self.lambda_cycle < 0 or self.lambda_l1 < 0:
            raise ParameterError("loss weights must be non-negative")
        self.betas = tuple(self.betas)  # type: ignore[assignment]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ParameterError(f"unknown TrainConfig keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class LossRecord:
    step: int
    patient_id: str
    losses: dict[str, float]

    def __post_init__(self) -> None:
        bad = {k: v for k, v in self.losses.items() if not math.isfinite(v)}
        if bad:
            raise TrainingError(f"non-finite loss at step {self.step} ({self.patient_id}): {bad}")


@dataclass(frozen=True, order=True)
class CheckpointKey:
    epoch: int
    patient_index: int
    pass_index: int = 1

    @property
    def filename(self) -> str:
        return f"ckpt_e{self.epoch}_p{self.patient_index}_s{self.pass_index}.bin"

    def __str__(self) -> str:
        return f"e{self.epoch}_p{self.patient_index}_s{self.pass_index}"

    @classmethod
    def parse(cls, text: str) -> "CheckpointKey":
        try:
            e, p, s = text.split("_")
            return cls(int(e[1:]), int(p[1:]), int(s[1:]))
        except ValueError:
            raise ParameterError(f"malformed checkpoint key {text!r}") from None


# --------------------------------------------------------------------------- losses


def lsgan_loss(pred: torch.Tensor, target: float) -> torch.Tensor:
    """Least-squares GAN loss of a patch map against a constant label."""
    return F.mse_loss(pred, torch.full_like(pred, target))


def generator_adversarial_loss(pred_fake: torch.Tensor) -> torch.Tensor:
    return lsgan_loss(pred_fake, 1.0)


def discriminator_loss(pred_real: torch.Tensor, pred_fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * (lsgan_loss(pred_real, 1.0) + lsgan_loss(pred_fake, 0.0))


# --------------------------------------------------------------------------- state


class Trainable(Protocol):
    """What the SEM scheduler needs from a training state."""

    def state_dict(self) -> dict[str, Any]: ...

    def load_state_dict(self, state: dict[str, Any]) -> None: ...

    def train_patient(self, slices: Sequence[SlicePair], cfg: TrainConfig, start_step: int) -> list[LossRecord]: ...


@dataclass
class GanState:
    """Networks, optimizers and the architectures they were built from.

    Domain A is CT, domain B is CBCT. ``generators["BtoA"]`` is always the
    CBCT -> sCT generator. The paired regime has one generator and one
    discriminator (on A); the cycle regime adds ``AtoB`` and a discriminator
    on B.
    """

    generators: dict[str, nn.Module]
    discriminators: dict[str, nn.Module]
    optimizers: dict[str, torch.optim.Optimizer]
    archs: dict[str, dict[str, Any]] = field(default_factory=dict)

    @property
    def generator(self) -> nn.Module:
        return self.generators["BtoA"]

    def modules(self) -> dict[str, nn.Module]:
        out = {f"gen_{k}": m for k, m in self.generators.items()}
        out.update({f"disc_{k}": m for k, m in self.discriminators.items()})
        return out

    def state_dict(self) -> dict[str, Any]:
        return {
            "models": {k: m.state_dict() for k, m in self.modules().items()},
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
        }

    def load_state_dict(self, state: dict[str, Any]) -> None:
        for k, m in self.modules().items():
            m.load_state_dict(state["models"][k])
        for k, o in self.optimizers.items():
            o.load_state_dict(state["optimizers"][k])

    def train_patient(self, slices: Sequence[SlicePair], cfg: TrainConfig, start_step: int) -> list[LossRecord]:
        records = []
        for i, batch in enumerate(pad_patient(slices)):
            records.append(train_step(self, batch, cfg, step=start_step + i))
        return records


def build_gan_state(cfg: TrainConfig, gen_arch: ArchConfig, disc_arch: ArchConfig) -> GanState:
    """Fresh networks and Adam optimizers for ``cfg.regime``, seeded from ``cfg.seed``."""
    torch.manual_seed(cfg.seed)
    directions = ("BtoA",) if cfg.regime == "fqga_paired" else ("BtoA", "AtoB")
    domains = ("A",) if cfg.regime == "fqga_paired" else ("A", "B")
    gens = {d: build_model(gen_arch) for d in directions}
    discs = {d: build_model(disc_arch) for d in domains}
    gen_params = [p for g in gens.values() for p in g.parameters()]
    disc_params = [p for d in discs.values() for p in d.parameters()]
    opts = {
        "gen": torch.optim.Adam(gen_params, lr=cfg.lr, betas=cfg.betas),
        "disc": torch.optim.Adam(disc_params, lr=cfg.lr, betas=cfg.betas),
    }
    return GanState(gens, discs, opts, {"generator": gen_arch.to_dict(), "discriminator": disc_arch.to_dict()})


def _batch_tensors(batch: SlicePair | tuple[np.ndarray, np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(batch, SlicePair):
        cbct, ct = batch.cbct_slice, batch.ct_slice
    else:
        cbct, ct = batch
    cbct = torch.as_tensor(np.asarray(cbct, dtype=np.float32))
    ct = torch.as_tensor(np.asarray(ct, dtype=np.float32))
    while cbct.ndim < 4:
        cbct, ct = cbct[None], ct[None]
    return cbct, ct


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def train_step(state: GanState, batch: SlicePair | tuple, cfg: TrainConfig, step: int = 0) -> LossRecord:
    """One discriminator update followed by one generator update.

    ``batch`` must already be padded (see :func:`sctforge.padding.prepare_batch`).
    """
    real_b, real_a = _batch_tensors(batch)  # B = CBCT, A = CT
    pid = batch.patient_id if isinstance(batch, SlicePair) else ""
    gens, discs = state.generators, state.discriminators
    for m in state.modules().values():
        m.train()

    if cfg.regime == "fqga_paired":
        fake_a = gens["BtoA"](real_b)
        _set_requires_grad(discs.values(), True)
        state.optimizers["disc"].zero_grad()
        d_loss = discriminator_loss(discs["A"](real_a), discs["A"](fake_a.detach()))
        _check_finite(state, step, pid, {"disc": d_loss})
        d_loss.backward()
        state.optimizers["disc"].step()

        _set_requires_grad(discs.values(), False)
        state.optimizers["gen"].zero_grad()
        adv = generator_adversarial_loss(discs["A"](fake_a))
        l1 = F.l1_loss(fake_a, real_a)
        g_loss = adv + cfg.lambda_l1 * l1
        _check_finite(state, step, pid, {"gen": g_loss})
        g_loss.backward()
        state.optimizers["gen"].step()
        _set_requires_grad(discs.values(), True)
        losses = {"gen_adv": adv.item(), "gen_l1": l1.item(), "gen_total": g_loss.item(), "disc": d_loss.item()}
        return LossRecord(step, pid, losses)

    # cycle-consistent regime
    _set_requires_grad(discs.values(), False)
    state.optimizers["gen"].zero_grad()
    fake_a = gens["BtoA"](real_b)
    fake_b = gens["AtoB"](real_a)
    adv_ab = generator_adversarial_loss(discs["B"](fake_b))
    adv_ba = generator_adversarial_loss(discs["A"](fake_a))
    cycle = F.l1_loss(gens["AtoB"](fake_a), real_b) + F.l1_loss(gens["BtoA"](fake_b), real_a)
    g_loss = adv_ab + adv_ba + cfg.lambda_cycle * cycle
    _check_finite(state, step, pid, {"gen": g_loss})
    g_loss.backward()
    state.optimizers["gen"].step()

    _set_requires_grad(discs.values(), True)
    state.optimizers["disc"].zero_grad()
    d_a = discriminator_loss(discs["A"](real_a), discs["A"](fake_a.detach()))
    d_b = discriminator_loss(discs["B"](real_b), discs["B"](fake_b.detach()))
    _check_finite(state, step, pid, {"disc_A": d_a, "disc_B": d_b})
    (d_a + d_b).backward()
    state.optimizers["disc"].step()
    losses = {
        "gen_AtoB_loss": adv_ab.item(), "gen_BtoA_loss": adv_ba.item(), "cycle_loss": cycle.item(),
        "disc_A_loss": d_a.item(), "disc_B_loss": d_b.item(),
    }
    return LossRecord(step, pid, losses)


_DUMP_DIR: Path | None = None


def _check_finite(state: GanState, step: int, pid: str, losses: dict[str, torch.Tensor]) -> None:
    values = {k: float(v.detach()) for k, v in losses.items()}
    if all(math.isfinite(v) for v in values.values()):
        return
    diag = {
        "step": step, "patient_id": pid, "losses": {k: repr(v) for k, v in values.items()},
        "nonfinite_params": [
            f"{mname}.{pname}" for mname, m in state.modules().items()
            for pname, p in m.named_parameters() if not torch.isfinite(p).all()
        ],
    }
    if _DUMP_DIR is not None:
        (_DUMP_DIR / "failure_dump.json").write_text(json.dumps(diag, indent=2))
    raise TrainingError(f"non-finite loss at step {step} ({pid}): {diag['losses']}")


# --------------------------------------------------------------------------- checkpoints


class CheckpointStore:
    """Directory of checkpoint archives plus an ordered JSON manifest.

    Layout: ``<root>/manifest.json`` and ``<root>/ckpt_e{E}_p{P}_s{S}.bin``.
    Each record carries the SHA-256 of its archive, so a damaged file is
    reported instead of silently loaded.
    """

    def __init__(self, root: str | Path, header: dict[str, Any] | None = None) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.events: list[tuple[str, str]] = []
        manifest = self.root / "manifest.json"
        if manifest.is_file():
            payload = json.loads(manifest.read_text())
            self.header, self.records = payload.get("header", {}), payload.get("records", [])
        else:
            self.header, self.records = {}, []
        if header:
            self.header.update(header)
            self._write_manifest()

    def __len__(self) -> int:
        return len(self.records)

    def keys(self) -> list[CheckpointKey]:
        return [CheckpointKey(r["epoch"], r["patient_index"], r["pass_index"]) for r in self.records]

    def record(self, key: CheckpointKey) -> dict[str, Any]:
        for r in self.records:
            if (r["epoch"], r["patient_index"], r["pass_index"]) == (key.epoch, key.patient_index, key.pass_index):
                return r
        raise CheckpointNotFound(f"no checkpoint {key} in {self.root}")

    def _write_manifest(self) -> None:
        tmp = self.root / "manifest.json.tmp"
        tmp.write_text(json.dumps({"header": self.header, "records": self.records}, indent=1))
        os.replace(tmp, self.root / "manifest.json")

    def save(self, state: Trainable, key: CheckpointKey, patient_id: str = "",
             losses: Sequence[LossRecord] = ()) -> dict[str, Any]:
        buf = io.BytesIO()
        torch.save(state.state_dict(), buf)
        blob = buf.getvalue()
        (self.root / key.filename).write_bytes(blob)
        summary: dict[str, float] = {}
        for rec in losses:
            for k, v in rec.losses.items():
                summary[k] = summary.get(k, 0.0) + v / len(losses)
        record = {
            "epoch": key.epoch, "patient_index": key.patient_index, "pass_index": key.pass_index,
            "patient_id": patient_id, "weights_path": key.filename,
            # weights and optimizer moments share one archive
            "optimizer_path": key.filename,
            "sha256": hashlib.sha256(blob).hexdigest(),
            "loss_summary": summary,
            "steps": [{"step": r.step, "patient_id": r.patient_id, **r.losses} for r in losses],
        }
        self.records = [r for r in self.records
                        if (r["epoch"], r["patient_index"], r["pass_index"]) != (key.epoch, key.patient_index, key.pass_index)]
        self.records.append(record)
        self.records.sort(key=lambda r: (r["epoch"], r["patient_index"], r["pass_index"]))
        self._write_manifest()
        self.events.append(("save", str(key)))
        return record

    def load_raw(self, key: CheckpointKey) -> dict[str, Any]:
        record = self.record(key)
        path = self.root / record["weights_path"]
        if not path.is_file():
            raise CheckpointNotFound(f"checkpoint file missing for {key}: {path}")
        blob = path.read_bytes()
        found = hashlib.sha256(blob).hexdigest()
        if found != record["sha256"]:
            raise IntegrityError(f"checkpoint {key} digest mismatch: expected {record['sha256']}, found {found}")
        return torch.load(io.BytesIO(blob), weights_only=True)

    def load(self, state: Trainable, key: CheckpointKey) -> Trainable:
        state.load_state_dict(self.load_raw(key))
        self.events.append(("load", str(key)))
        return state


def save_checkpoint(state: Trainable, store: CheckpointStore, key: CheckpointKey, **kw) -> dict[str, Any]:
    return store.save(state, key, **kw)


def load_checkpoint(store: CheckpointStore, key: CheckpointKey, state: Trainable) -> Trainable:
    return store.load(state, key)


def restore_state(store: CheckpointStore, key: CheckpointKey) -> GanState:
    """Rebuild a :class:`GanState` from the architectures in the store header and load ``key``."""
    hdr = store.header
    try:
        cfg = TrainConfig.from_dict(hdr["train_config"])
        gen, disc = ArchConfig.from_dict(hdr["archs"]["generator"]), ArchConfig.from_dict(hdr["archs"]["discriminator"])
    except KeyError as exc:
        raise IntegrityError(f"store {store.root} lacks architecture header: {exc}") from exc
    state = build_gan_state(cfg, gen, disc)
    state.load_state_dict(store.load_raw(key))
    return state


# --------------------------------------------------------------------------- scheduler


def _seed_for(seed: int, *parts: int) -> int:
    return zlib.crc32(np.asarray([seed, *parts], dtype=np.int64).tobytes())


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True) -> Iterator[None]:
    """Single-threaded, deterministic kernels for reproducible runs."""
    if not enabled:
        yield
        return
    prev_det = torch.are_deterministic_algorithms_enabled()
    prev_threads = torch.get_num_threads()
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_num_threads(prev_threads)


@dataclass
class PatientSlices:
    patient_id: str
    slices: list[SlicePair]


def pad_patient(slices: Sequence[SlicePair]) -> list[SlicePair]:
    """Reflect-pad a patient's slices to their common max dims, then to a multiple of 4."""
    cb = prepare_batch([s.cbct_slice for s in slices])
    ct = prepare_batch([s.ct_slice for s in slices])
    return [SlicePair(s.patient_id, s.slice_index, a.data.astype(np.float32), b.data.astype(np.float32))
            for s, a, b in zip(slices, cb, ct)]


def train_sem(state: Trainable, patients: Sequence[PatientSlices], cfg: TrainConfig,
              store: CheckpointStore, resume: bool = True) -> CheckpointStore:
    """Run the SEM schedule, checkpointing after every patient (and pass).

    With ``resume`` a store that already holds records continues after the
    last completed patient, loading its checkpoint first.
    """
    global _DUMP_DIR
    if not patients:
        raise ParameterError("train_sem needs at least one patient")
    store.header.setdefault("train_config", cfg.to_dict())
    if isinstance(state, GanState):
        store.header.setdefault("archs", state.archs)
    store.header["patients"] = [p.patient_id for p in patients]
    store._write_manifest()

    done = {(r["epoch"], r["patient_index"], r["pass_index"]) for r in store.records} if resume else set()
    prev: CheckpointKey | None = None
    step = 0
    _DUMP_DIR = store.root
    with deterministic_mode(cfg.deterministic):
        for epoch in range(1, cfg.epochs + 1):
            for index, patient in enumerate(patients, start=1):
                key = CheckpointKey(epoch, index, 1)
                passes = (1, 2) if cfg.double_pass else (1,)
                if all((epoch, index, s) in done for s in passes):
                    prev = key
                    step += sum(len(store.record(CheckpointKey(epoch, index, s))["steps"]) for s in passes)
                    continue
                if prev is None:
                    store.events.append(("load", "init"))
                else:
                    try:
                        store.load(state, prev)
                    except Exception as exc:
                        raise TrainingError(f"cannot load predecessor {prev} before {key}: {exc}") from exc
                for pass_index in passes:
                    order = np.random.default_rng(_seed_for(cfg.seed, epoch, index, pass_index)).permutation(len(patient.slices))
                    torch.manual_seed(_seed_for(cfg.seed, epoch, index, pass_index, 1))
                    batches = [patient.slices[i] for i in order]
                    records = state.train_patient(batches, cfg, step)
                    step += len(records)
                    store.save(state, CheckpointKey(epoch, index, pass_index), patient.patient_id, records)
                    log.info("epoch %d patient %d (%s) pass %d: %d steps", epoch, index,
                             patient.patient_id, pass_index, len(records))
                prev = key
    return store


def loss_log(store: CheckpointStore, pass_index: int | None = None) -> dict[str, list[tuple[int, float, str]]]:
    """Per-loss time series ``name -> [(step, value, patient_id), ...]`` in step order."""
    series: dict[str, list[tuple[int, float, str]]] = {}
    for r in store.records:
        if pass_index is not None and r["pass_index"] != pass_index:
            continue
        for s in r["steps"]:
            for k, v in s.items():
                if k in ("step", "patient_id"):
                    continue
                series.setdefault(k, []).append((s["step"], v, s["patient_id"]))
    for v in series.values():
        v.sort(key=lambda t: t[0])
    return series
