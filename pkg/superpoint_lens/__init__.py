from . import kernels
from . import hook_points
from . import utils
from . import scenes
from . import components
from .HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig
from .HookedSuperpointTransformer import HookedSuperpointTransformer
from . import matching
from . import loss
from . import evals
from . import train
from . import gradcheck
