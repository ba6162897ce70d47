"""
Keypoints and segmentation maps as layouts
==========================================

Any spatial condition becomes boxes through its coordinate extents.
"""

import numpy as np

from compbalance.conditions import KeypointSet, SegmentationMap, rasterize, transfer

pose = KeypointSet(((3, ((0.2, 0.1), (0.25, 0.6), (0.4, 0.35))), (7, ((0.7, 0.5),))))
for box in transfer(pose).boxes:
    print("keypoints ->", box.token_index, box.coords)

labels = np.zeros((8, 8), dtype=int)
labels[1:4, 1:3] = 3
labels[5:8, 4:8] = 7
seg = SegmentationMap(labels)
layout = transfer(seg)
for box in layout.boxes:
    print("segment   ->", box.token_index, box.coords)
    print(rasterize(box, 8, 8).astype(int))
