"""In-context game playing for two-player zero-sum Markov games.

Context algorithms (EXP3, V-learning, VI-ULCB with an MWU CCE solver), a
masked ReLU-attention transformer with hand-written gradients, the
state-augmented pretraining pipeline, hand-built transformer realizations of
the MWU solver and an NE-gap evaluation harness.
"""
__version__ = "0.1.0"
