# Autodiff, optimizer, model, training regimes and early-exit inference
