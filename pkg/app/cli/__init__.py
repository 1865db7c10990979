# CAAC Lab command-line surface
