# CAAC Lab sub-commands
