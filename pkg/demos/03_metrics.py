"""Scoring helpers on small hand-checkable inputs."""

# %%
from tara_forge.metrics import ap_at_iou, ap_at_k, bleu, iou, micro_average, rouge_l
from tara_forge.model import BBox

# %% Frame tolerance: only the first prediction lands within 5 frames
print(ap_at_k([5, 20, None], [5, 27, 9], k=5))

# %% Half-overlapping boxes share a third of their union
a, b = BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)
print(iou(a, b), ap_at_iou([b], [a], 0.3), ap_at_iou([b], [a], 0.5))

# %% Text overlap
print(rouge_l("the cat sat", "the cat"))
print(bleu(["the car hit a bike rider"], ["a car hit the rider on a bike"]))

# %% Pooled accuracy over 3254 accident and 2000 non-accident clips
print(round(micro_average(0.1895, 3254, 0.9937, 2000), 4))
