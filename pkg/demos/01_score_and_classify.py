"""
Scoring a set of heart landmarks
================================

The score is six times the ratio of the two heart axes to the length of
a vertebral segment: 6 * (|AB| + |CD|) / |EF|. Because it is a ratio of
distances, the number does not care where the image came from, how it
was cropped, or how large the animal printed on the film.
"""
import numpy as np

from vhskit import HeartClass, KeypointSet, calc_vhs, classify

# Six landmarks in normalized image coordinates: A,B span the long axis,
# C,D the short axis, E,F one vertebral segment along the spine.
points = KeypointSet.from_points(
    (0.42, 0.58), (0.62, 0.58),   # A, B
    (0.52, 0.46), (0.52, 0.71),   # C, D
    (0.15, 0.12), (0.15, 0.41),   # E, F
)

score = calc_vhs(points.flatten().reshape(6, 2))
verdict = classify(score)
print(f"score {score:.3f} -> {HeartClass(verdict).name}")

# The classification bands are inclusive on both ends of the normal range:
for v in (8.199, 8.2, 10.0, 10.001):
    print(f"  vhs {v:>6} -> class {int(classify(v))} ({HeartClass(classify(v)).name})")

# Similarity transforms leave the score untouched. Rotate, scale, and
# shift the same landmarks and measure again.
rng = np.random.default_rng(0)
theta = rng.uniform(0, 2 * np.pi)
rot = np.array([[np.cos(theta), -np.sin(theta)],
                [np.sin(theta), np.cos(theta)]])
moved = 1.7 * (points.flatten().reshape(6, 2) @ rot.T) + rng.uniform(-1, 1, 2)
print(f"after a random similarity transform: {calc_vhs(moved):.12f}")
print(f"original:                            {score:.12f}")
