"""Unpaired video-to-video translation with flow-warped recurrent generation.

Subpackages:

* :mod:`flowcycle.core`     shared frame/clip/flow types and file I/O
* :mod:`flowcycle.toygen`   procedural two-domain toy video corpus
* :mod:`flowcycle.flow`     flow estimation, differentiable warping, occlusion masks
* :mod:`flowcycle.nets`     generators, fusion block, discriminators, content extractor
* :mod:`flowcycle.losses`   training objectives
* :mod:`flowcycle.train`    adversarial training loop and checkpointing
* :mod:`flowcycle.evaluate` warping-error and semantic-preservation metrics
* :mod:`flowcycle.cli`      command-line entry point
"""

__version__ = "0.1.0"
