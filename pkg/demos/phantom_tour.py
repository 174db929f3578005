"""Generate a handful of phantom scans, look at their labels and split them at the midline.

    python3 demos/phantom_tour.py [outdir]

Writes one PGM per scan (the slice holding most lesion voxels) so the
hypodense blob can be eyeballed next to its mirror-image hemisphere.
"""

import sys
from pathlib import Path

import numpy as np

from halfbrain import phantom
from halfbrain.explain import write_pgm
from halfbrain.pipeline import mirror, split_midline, standardize

out = Path(sys.argv[1] if len(sys.argv) > 1 else "phantom_tour")
scans = phantom.generate_detailed(phantom.PhantomConfig(n_scans=8, seed=4))

for scan in scans:
    lab = scan.label
    vol = standardize(scan.volume)
    pair = split_midline(vol)
    # a lesion shows up as a gap between the two canonical halves
    asym = float(np.abs(pair.left - pair.right).mean())
    where = ", ".join(f"{r}/{s}" for r, s in sorted(lab.locations)) or "-"
    print(f"{scan.volume.scan_id:8s} {lab.four_class:5s} grade {lab.size_grade}  "
          f"regions {where:22s} background {sorted(lab.background)}  asymmetry {asym:.4f}")

    k = int(scan.lesion_map.sum(axis=(1, 2)).argmax()) if lab.presence else 5
    write_pgm(out / f"{scan.volume.scan_id}.pgm", vol.voxels[k], vmax=1.0)

# swapping hemispheres of the input swaps the halves, bit for bit
v = standardize(scans[0].volume)
a = split_midline(mirror(v.voxels))
b = split_midline(v).swapped()
print("mirror check:", np.array_equal(a.left, b.left) and np.array_equal(a.right, b.right))
print(f"slices written to {out}/")
