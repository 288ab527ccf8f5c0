# small scene for smoke runs
width = 32
height = 32

references = 2
objects = 2

rotation_jitter = 4.0
translation_jitter = 0.3

mask_mode = "inpaint"
mask_area = 0.2
