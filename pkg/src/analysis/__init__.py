# Gradient dominance, permutation alignment, connectivity, representation and landscape instruments
