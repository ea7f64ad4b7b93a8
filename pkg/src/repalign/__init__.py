"""Cross-model representation alignment: train small structured and dense
networks, extract layer activations, and compare them with CKA, subspace
overlap, linear alignment maps and probe transfer accuracy."""

__version__ = "0.1.0"
