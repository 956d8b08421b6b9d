# Utilities: error handling, monitoring, deterministic seeding
