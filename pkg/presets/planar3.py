# textured ground plane and back wall, three references around the target
width = 64
height = 64

references = 3
objects = 0

rotation_jitter = 4.0
translation_jitter = 0.4

mask_mode = "inpaint"
mask_area = 0.25
