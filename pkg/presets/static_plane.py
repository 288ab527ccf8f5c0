# every camera coincides with the target, nothing to complete from
width = 64
height = 64

references = 2
objects = 0
wall = False
camera_distance = 2.5
camera_height = 4.0

rotation_jitter = 0.0
translation_jitter = 0.0

mask_mode = "inpaint"
mask_area = 0.2
