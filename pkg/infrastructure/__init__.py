# Datasets, checkpoints, reports and experiment orchestration
