# Validated run configuration models
