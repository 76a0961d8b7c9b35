"""
Mask synthesis and the two-stage training loop
"""
