"""Language-guided feature disentanglement for infrared object detection."""
