"""Riemannian extension - desk-scale gluing, metric extension and completion of manifolds with boundary."""
