"""Pipeline block implementations: embed, aggregate, evaluate, visualize."""
