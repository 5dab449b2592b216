"""How many parameters should a model have to see its data about once?

Counts pixels as tokens over a cohort of 436x416 slices and compares the
ratio with the actual generator sizes.
"""

from sctforge.heuristic import HeuristicInput, optimal_p, tp_band
from sctforge.models import ArchConfig, build_model, count_parameters, variant

band = tp_band(HeuristicInput(4_000_000, (436, 416), (50, 105)))
print(f"tokens per patient: {band.tokens[0]:,} .. {band.tokens[1]:,}")
print(f"T/P at 4M parameters: {band.ratio[0]:.3f} .. {band.ratio[1]:.3f}")
print(f"parameter count for T/P = 5: {optimal_p(band.tokens[0])[0]:,} .. {optimal_p(band.tokens[1])[0]:,}")

for name in ("fqga-single", "fqga-double", "fqga-triple", "cyclegan-m"):
    gen, _ = variant(name)
    print(f"{name:12s} generator {count_parameters(build_model(gen)):>12,}")
print(f"{'cyclegan-9':12s} generator {count_parameters(build_model(ArchConfig('cyclegan_gen', resblocks=9))):>12,}")
