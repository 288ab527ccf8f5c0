width = 64
height = 64

references = 3
objects = 3

rotation_jitter = 5.0
translation_jitter = 0.5

mask_mode = "outpaint"
mask_area = 0.35
