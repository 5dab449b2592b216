"""Train FQGA-single for one single-epoch pass over five phantom patients and compare with doing nothing.

Takes a couple of minutes on one CPU core. Writes checkpoints and triptychs
under ./desk_demo.
"""

from pathlib import Path

from sctforge.data import slice_pairs
from sctforge.evaluation import (
    evaluate_model, export_qualitative, predict_volume, select_best, sweep_checkpoints, tissue_kde_compare, to_hu,
)
from sctforge.models import IdentityGenerator, variant
from sctforge.phantom import desk_params, generate_phantom_patient
from sctforge.trainer import CheckpointKey, CheckpointStore, PatientSlices, TrainConfig, build_gan_state, restore_state, train_sem

out = Path("desk_demo")
params = desk_params()
train = [generate_phantom_patient(params, f"T{i}") for i in range(5)]
val = [generate_phantom_patient(params, f"V{i}") for i in range(2)]
test = [generate_phantom_patient(params, f"X{i}") for i in range(2)]

cfg = TrainConfig(seed=0)
gen, disc = variant("fqga-single")
store = CheckpointStore(out / "checkpoints")
train_sem(build_gan_state(cfg, gen, disc), [PatientSlices(p.patient_id, slice_pairs(p)) for p in train], cfg, store)

table = sweep_checkpoints(store, (1, 5), val)
for row in table.rows:
    print(f"{row['checkpoint_key']}  psnr {row['psnr']:.2f}  ssim {row['ssim']:.3f}")
choice = select_best(table)
print(f"selected {choice.checkpoint_key}; {choice.note}")

model = restore_state(store, CheckpointKey.parse(choice.checkpoint_key)).generator
ours, identity = evaluate_model(model, test).aggregate, evaluate_model(IdentityGenerator(), test).aggregate
print(f"test psnr {ours.psnr:.2f} dB against {identity.psnr:.2f} dB for sCT := CBCT")
for p in test:
    cmp = tissue_kde_compare(p.ct, p.cbct, to_hu(predict_volume(model, p)), roi=(-200, 200))
    print(f"{p.patient_id}: soft-tissue KDE distance to CT  sCT {cmp.sct_to_ct:.3f}  CBCT {cmp.cbct_to_ct:.3f}")
export_qualitative(model, [slice_pairs(p)[8] for p in test], out / "images", tag=choice.checkpoint_key)
