"""Astronaut photography localization engine: pair mining, contrastive losses,
query-weighted cluster mining and rotation-augmented recall@N retrieval over
precomputed embeddings."""

__version__ = "0.1.0"
