"""Rate-induced tipping of a bistable reaction-diffusion equation on a shifting habitat."""

__version__ = "0.1.0"

from .errors import RTippingError  # noqa: E402
from .model import ModelParams, ShiftField, habitat, ramp, reaction, reaction_du, shift_velocity  # noqa: E402

__all__ = ["ModelParams", "ShiftField", "habitat", "ramp", "reaction", "reaction_du", "shift_velocity",
           "RTippingError", "__version__"]
