"""Multi-task fetal-biometry toolkit on synthetic ultrasound phantoms.

A small U-Net with a bottleneck classification head, trained with a
lambda-weighted joint cross-entropy/Dice loss, plus the geometric
post-processing that turns segmentation masks into head/abdomen
circumference and femur length.
"""

__version__ = "0.1.0"
