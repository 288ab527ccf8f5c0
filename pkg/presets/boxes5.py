width = 64
height = 64

references = 5
objects = 4

rotation_jitter = 6.0
translation_jitter = 0.6

mask_mode = "inpaint"
mask_area = 0.3
