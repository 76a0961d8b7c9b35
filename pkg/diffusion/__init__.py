"""
Diffusion machinery: noise schedule, priors, temporal planning and the inpainting pipeline
"""
