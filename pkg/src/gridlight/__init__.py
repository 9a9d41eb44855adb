"""gridlight: a desk-scale offline multi-agent RL laboratory for traffic signals.

The pieces, in pipeline order: a store-and-forward grid simulator
(:mod:`.simnet`), rule-based controllers that generate logged behaviour
(:mod:`.controllers`), an episode datastore with dataset mixing
(:mod:`.datastore`), a graph-recurrent variational behaviour-policy model
(:mod:`.behavior_model`), importance/return-based sample weighting
(:mod:`.weighting`), weighted offline trainers (:mod:`.trainers`), and
evaluation plus the ``gridlight`` command line (:mod:`.evaluation`,
:mod:`.pipeline`, :mod:`.cli`).
"""

__version__ = "0.1.0"
