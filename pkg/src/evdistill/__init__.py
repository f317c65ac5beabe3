"""Cross-modality object-centric distillation for event-camera detection.

A frozen grayscale-image detector teaches an event-voxel detector through
slot-attention object features: attention-masked pixel alignment, direct
slot matching, inter-object relation matching, and an auxiliary head that
keeps the teacher-side slots informative.
"""

__version__ = "0.1.0"
