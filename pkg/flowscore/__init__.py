"""Flow-modulated scoring for knowledge graph completion."""
