# a sphere moving between captures, masked out before building the cloud
width = 64
height = 64

references = 2
objects = 2
dynamic = 1
dynamic_displacement = 0.5

rotation_jitter = 5.0
translation_jitter = 0.5

mask_mode = "inpaint"
mask_area = 0.25
