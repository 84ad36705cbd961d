"""Domain-adaptive crack detection at desk scale.

Modules: ``ndgrad`` (reverse-mode autodiff), ``imgproc`` (APAGE, PGM I/O),
``augment``, ``losses``, ``mkmmd``, ``detector``, ``datasynth``, ``train``,
``metrics``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
