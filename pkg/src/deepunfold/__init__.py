"""Deep unfolding toolkit: sparse and deep NMF for source separation, and
unfolded Markov random field inference networks."""

__version__ = "0.1.0"
