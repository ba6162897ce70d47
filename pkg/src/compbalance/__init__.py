"""Training-free balancing of a text-conditioned and a layout-conditioned denoiser.

Per-pixel influence maps mix the predicted noise of the two branches during
DDIM sampling and are tuned on the fly so that every object's cross-attention
stays inside its box.  Everything runs on small analytic testbeds in numpy.
"""

__version__ = "0.1.0"
