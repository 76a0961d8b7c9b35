"""
Networks for DiffuEraser Desk: latent codec, attention blocks, dual-branch denoiser, checkpoint archive
"""
