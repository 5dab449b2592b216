"""Generate a phantom cohort with a few broken pairs and let the KDE cleaner sort them out."""

from sctforge.cleaning import build_reference, clean_cohort
from sctforge.phantom import PhantomParams, generate_cohort, generate_phantom_patient

params = PhantomParams(seed=0)
cohort, truth = generate_cohort(18, 1 / 6, params, seed=0)
reference = build_reference(generate_phantom_patient(params, "REF", "reference"))

kept, decisions = clean_cohort(cohort, reference)
for d in decisions:
    label = truth[d.patient_id].value if truth[d.patient_id] else "clean"
    print(f"{d.patient_id}  {label:22s} -> {d.status:9s} distance {d.distance:.3f} {d.repair or ''}")
print(f"{len(kept)} of {len(cohort)} patients survive cleaning")
