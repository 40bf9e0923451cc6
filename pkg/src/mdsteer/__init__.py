"""ML-steered ensemble simulation at desk scale."""
