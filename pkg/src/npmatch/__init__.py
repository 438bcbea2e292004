"""NP-Match: neural-process semi-supervised classification."""
