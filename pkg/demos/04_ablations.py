"""The two ablations from the acceptance suite, at a size you can run during lunch.

Ablation A compares three-scale, two-scale and single-scale models on twin
organs that differ only by side. Ablation B compares deformation
augmentation with mirror/scale/rotate augmentation on a deformed test set.
Each arm trains three seeds and reports the median mIoU.

    python3 demos/04_ablations.py            # both, about 6 minutes on one core
    python3 demos/04_ablations.py A          # only ablation A
"""
import sys

from apnet.experiments import ablation_a, ablation_b

which = sys.argv[1].upper() if len(sys.argv) > 1 else "AB"
if "A" in which:
    res = ablation_a(verbose=True)
    print(res.summary())
if "B" in which:
    res = ablation_b(verbose=True)
    print(res.summary())
