"""Goal-oriented yes/no question games over synthetic object scenes.

The package provides a small laboratory for the full loop: scene
generation, a question grammar with exact set semantics, a programmatic
answerer, transformer and recurrent questioner agents, supervised and
policy-gradient training, and an evaluation/report pipeline.
"""

__version__ = "0.1.0"
