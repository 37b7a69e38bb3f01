"""Learning-based 1D+T contrast reconstruction from simulated rotational angiography."""
