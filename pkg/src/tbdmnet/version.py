"""tbdmnet version."""

# We use the semantic version scheme: MAJOR.MINOR.MAINTENANCE
# - Increase MAJOR when making breaking changes
# - Increase MINOR when adding backward-compatible features
# - Increase MAINTENANCE when fixing bugs without adding features
# - During development, add suffix .devN with N >= 0
version = "0.1.0"
