# Numerical core and analysis instruments for multi-exit networks
