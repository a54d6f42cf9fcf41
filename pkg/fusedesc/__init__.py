"""
fusedesc: point cloud descriptors with image-guided attention fusion,
descriptor activation maps and a registration evaluation pipeline
"""
